// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "maskdit/flops.hpp"

using namespace maskdit;

namespace {

BackboneConfig desk_config() { return BackboneConfig{}; }  // 6x192 / 2x96 defaults

}  // namespace

TEST(Flops, UnmaskedRatioIsExactlyOne) {
    const CostReport r = flops_count(desk_config(), 64, 0.0);
    EXPECT_DOUBLE_EQ(r.ratio_vs_unmasked, 1.0);
    EXPECT_EQ(r.visible_tokens, 64);
}

TEST(Flops, VisibleTokenBookkeeping) {
    EXPECT_EQ(flops_count(desk_config(), 256, 0.5).visible_tokens, 128);
    EXPECT_EQ(flops_count(desk_config(), 256, 0.75).visible_tokens, 64);
}

// Desk-config regression constants, computed once from the closed form and
// locked. N = 64 tokens (16x16 image, patch 2), r = 0.5.
TEST(Flops, DeskConfigPinnedConstants) {
    const CostReport r = flops_count(desk_config(), 64, 0.5);
    EXPECT_EQ(r.encoder_flops, 174686208);
    EXPECT_EQ(r.decoder_flops, 32636928);
    EXPECT_EQ(r.head_flops, 49152);
    EXPECT_EQ(r.total_flops, 207372288);
    EXPECT_EQ(r.visible_tokens, 32);
    EXPECT_NEAR(r.ratio_vs_unmasked, 207372288.0 / 392577024.0, 1e-15);
    // encoder cost is sub-halved (quadratic attention term); small decoder unchanged
    EXPECT_GT(r.ratio_vs_unmasked, 0.45);
    EXPECT_LT(r.ratio_vs_unmasked, 0.65);
}

TEST(Flops, MonotoneNonIncreasingInRatio) {
    double prev = 2.0;
    for (double r = 0.0; r < 0.96; r += 0.05) {
        const double ratio = flops_count(desk_config(), 64, r).ratio_vs_unmasked;
        EXPECT_LE(ratio, prev + 1e-12);
        prev = ratio;
    }
}

// Attention FLOPs scale as n(2d + n): check the closed form rather than a timer.
TEST(Flops, AttentionTermQuadraticInVisibleTokens) {
    const BackboneConfig cfg = desk_config();
    const long n_tokens = 64;
    const long n_half = 32;
    const long d = cfg.encoder_width;
    auto attention = [&](long n) { return 2 * (4 * n * d * d + 2 * n * n * d); };
    const double measured =
        static_cast<double>(attention(n_half)) / static_cast<double>(attention(n_tokens));
    const double expected = (static_cast<double>(n_half) * (2 * d + n_half)) /
                            (static_cast<double>(n_tokens) * (2 * d + n_tokens));
    EXPECT_DOUBLE_EQ(measured, expected);
    EXPECT_LT(measured, 0.5);  // strictly better than linear halving
}

TEST(VerifyTokenCounts, AcceptsCorrectTrace) {
    ForwardTrace trace;
    trace.recs = {{"encoder", 0, 128}, {"encoder", 1, 128}, {"decoder", 0, 256}};
    EXPECT_TRUE(verify_token_counts(trace, 0.5, 256));
}

TEST(VerifyTokenCounts, ReportsPerLayerMismatch) {
    ForwardTrace trace;
    trace.recs = {{"encoder", 0, 256}, {"decoder", 0, 256}};
    std::string detail;
    EXPECT_FALSE(verify_token_counts(trace, 0.5, 256, &detail));
    EXPECT_NE(detail.find("encoder[0]"), std::string::npos);
    EXPECT_NE(detail.find("expected 128"), std::string::npos);
}

// Instrumented forward passes across the three headline masking regimes.
TEST(VerifyTokenCounts, EndToEndAgainstBackbone) {
    BackboneConfig cfg;
    cfg.encoder_depth = 2;
    cfg.encoder_width = 16;
    cfg.encoder_heads = 2;
    cfg.decoder_depth = 1;
    cfg.decoder_width = 8;
    cfg.decoder_heads = 2;
    cfg.patch_size = 2;
    cfg.num_classes = 2;
    cfg.mlp_ratio = 2.0;
    Rng rng(1);
    Backbone<float> net(cfg, 16, 16, 1);  // N = 256
    net.default_init(rng);
    for (double r : {0.0, 0.5, 0.75}) {
        Mat<float> tokens = Mat<float>::Zero(256, 4);
        std::vector<MaskPattern> masks = {sample_mask(256, r, rng)};
        Backbone<float>::Cache cache;
        Mat<float> out;
        ForwardTrace trace;
        net.forward(tokens, masks, {0.5}, {0}, cache, out, &trace);
        std::string detail;
        EXPECT_TRUE(verify_token_counts(trace, r, 256, &detail)) << detail;
    }
}
