// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "maskdit/backbone.hpp"
#include "maskdit/patches.hpp"

using namespace maskdit;

namespace {

BackboneConfig small_config() {
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
    return cfg;
}

struct Setup {
    Mat<float> tokens;
    std::vector<MaskPattern> masks;
    std::vector<double> sigmas;
    std::vector<int> labels;
};

Setup make_inputs(long batch, long n_tokens, long token_dim, double ratio, Rng& rng) {
    Setup s;
    s.tokens = Mat<float>::Zero(batch * n_tokens, token_dim);
    for (long i = 0; i < s.tokens.rows(); ++i)
        for (long j = 0; j < token_dim; ++j) s.tokens(i, j) = static_cast<float>(rng.normal());
    for (long b = 0; b < batch; ++b) {
        s.masks.push_back(sample_mask(n_tokens, ratio, rng));
        s.sigmas.push_back(0.3 + 0.4 * static_cast<double>(b));
        s.labels.push_back(static_cast<int>(b % 3));  // includes the null token (K = 2)
    }
    return s;
}

}  // namespace

TEST(BackboneConfig, ValidationCatchesBadWidths) {
    BackboneConfig cfg = small_config();
    cfg.encoder_heads = 3;  // 16 % 3 != 0
    EXPECT_THROW(cfg.validate(), ValueError);
}

TEST(Backbone, OutputShapeIndependentOfRatio) {
    Rng rng(1);
    Backbone<float> net(small_config(), 4, 4, 1);
    net.default_init(rng);
    for (double r : {0.0, 0.25, 0.5, 0.75}) {
        auto in = make_inputs(3, 16, 4, r, rng);
        Backbone<float>::Cache cache;
        Mat<float> out;
        net.forward(in.tokens, in.masks, in.sigmas, in.labels, cache, out);
        EXPECT_EQ(out.rows(), 3 * 16);
        EXPECT_EQ(out.cols(), 4);
    }
}

TEST(Backbone, ZeroMaskOutputIndependentOfMaskRngSeed) {
    Rng rng(2);
    Backbone<float> net(small_config(), 4, 4, 1);
    net.default_init(rng);
    net.random_init(rng, 0.05);
    auto in = make_inputs(2, 16, 4, 0.0, rng);

    Rng mask_rng_a(123), mask_rng_b(987);
    std::vector<MaskPattern> masks_a, masks_b;
    for (long b = 0; b < 2; ++b) {
        masks_a.push_back(sample_mask(16, 0.0, mask_rng_a));
        masks_b.push_back(sample_mask(16, 0.0, mask_rng_b));
    }
    Backbone<float>::Cache cache;
    Mat<float> out_a, out_b;
    net.forward(in.tokens, masks_a, in.sigmas, in.labels, cache, out_a);
    net.forward(in.tokens, masks_b, in.sigmas, in.labels, cache, out_b);
    EXPECT_EQ((out_a - out_b).cwiseAbs().maxCoeff(), 0.0f);
}

TEST(Backbone, ForwardIsDeterministic) {
    Rng rng(3);
    Backbone<float> net(small_config(), 4, 4, 1);
    net.random_init(rng, 0.05);
    auto in = make_inputs(2, 16, 4, 0.5, rng);
    Backbone<float>::Cache c1, c2;
    Mat<float> out1, out2;
    net.forward(in.tokens, in.masks, in.sigmas, in.labels, c1, out1);
    net.forward(in.tokens, in.masks, in.sigmas, in.labels, c2, out2);
    EXPECT_EQ((out1 - out2).cwiseAbs().maxCoeff(), 0.0f);
}

// Encoder blocks must consume exactly N - floor(rN) tokens: the whole point
// of masked training. N = 256 here to match the headline configuration.
TEST(Backbone, EncoderSeesOnlyVisibleTokens) {
    Rng rng(4);
    Backbone<float> net(small_config(), 16, 16, 1);
    net.default_init(rng);
    auto in = make_inputs(2, 256, 4, 0.5, rng);
    Backbone<float>::Cache cache;
    Mat<float> out;
    ForwardTrace trace;
    net.forward(in.tokens, in.masks, in.sigmas, in.labels, cache, out, &trace);
    ASSERT_EQ(trace.recs.size(), 3u);  // 2 encoder + 1 decoder blocks
    for (const auto& rec : trace.recs) {
        if (rec.stage == "encoder")
            EXPECT_EQ(rec.tokens_per_image, 128);
        else
            EXPECT_EQ(rec.tokens_per_image, 256);
    }
}

TEST(Backbone, DeskConfigParameterAsymmetry) {
    Rng rng(5);
    BackboneConfig desk;  // defaults: 6x192 encoder, 2x96 decoder
    Backbone<float> net(desk, 8, 8, 1);
    net.default_init(rng);
    const double ratio = static_cast<double>(net.decoder_param_count()) /
                         static_cast<double>(net.encoder_param_count());
    EXPECT_LT(ratio, 0.25);
    EXPECT_GT(ratio, 0.0);
}

// At initialization the head and all modulation gates are zero, so the raw
// network output is exactly zero and D(x, sigma) = c_skip * x.
TEST(Backbone, ZeroInitializationGivesZeroRawOutput) {
    Rng rng(6);
    Backbone<float> net(small_config(), 4, 4, 1);
    net.default_init(rng);
    auto in = make_inputs(2, 16, 4, 0.5, rng);
    Backbone<float>::Cache cache;
    Mat<float> out;
    net.forward(in.tokens, in.masks, in.sigmas, in.labels, cache, out);
    EXPECT_EQ(out.cwiseAbs().maxCoeff(), 0.0f);
}

TEST(Backbone, MaskTokenReceivesGradientWheneverMasked) {
    Rng rng(7);
    Backbone<float> net(small_config(), 4, 4, 1);
    net.random_init(rng, 0.05);
    auto in = make_inputs(2, 16, 4, 0.5, rng);
    Backbone<float>::Cache cache;
    Mat<float> out;
    net.forward(in.tokens, in.masks, in.sigmas, in.labels, cache, out);
    net.store().zero_grad();
    Mat<float> d_out = Mat<float>::Ones(out.rows(), out.cols());
    net.backward(d_out, cache);
    double mask_token_grad = 0.0;
    for (const auto& e : net.store().entries()) {
        if (e.name == "mask_token") {
            for (long i = 0; i < e.rows * e.cols; ++i)
                mask_token_grad +=
                    std::abs(static_cast<double>(net.store().grad_data()[static_cast<std::size_t>(
                        e.offset + i)]));
        }
    }
    EXPECT_GT(mask_token_grad, 0.0);
}

// Routing geometry: with zero-depth encoder/decoder there is no attention
// mixing, so output slot i depends only on input token i. Perturbing one
// token must change exactly one output row.
TEST(Backbone, TokenRoutingPreservesPositionsAtZeroRatio) {
    Rng rng(8);
    BackboneConfig cfg = small_config();
    cfg.encoder_depth = 0;
    cfg.decoder_depth = 0;
    Backbone<float> net(cfg, 4, 4, 1);
    net.random_init(rng, 0.1);
    auto in = make_inputs(1, 16, 4, 0.0, rng);
    Backbone<float>::Cache cache;
    Mat<float> base;
    net.forward(in.tokens, in.masks, in.sigmas, in.labels, cache, base);

    for (long j : {0L, 5L, 15L}) {
        Mat<float> perturbed_tokens = in.tokens;
        perturbed_tokens.row(j).array() += 0.5f;
        Mat<float> out;
        net.forward(perturbed_tokens, in.masks, in.sigmas, in.labels, cache, out);
        for (long i = 0; i < out.rows(); ++i) {
            const float delta = (out.row(i) - base.row(i)).cwiseAbs().maxCoeff();
            if (i == j)
                EXPECT_GT(delta, 0.0f) << "perturbed row " << j;
            else
                EXPECT_EQ(delta, 0.0f) << "row " << i << " moved when " << j << " was perturbed";
        }
    }
}

TEST(ConditionEmbed, FullDropoutAlwaysGivesNullEmbedding) {
    Rng rng(9);
    Backbone<float> net(small_config(), 4, 4, 1);
    net.random_init(rng, 0.1);
    Rng r1(5);
    const Mat<float> dropped = net.condition_embed(NoiseLevel(0.4), 1, 1.0, r1, true);
    Rng r2(99);
    const Mat<float> null_direct = net.condition_embed(NoiseLevel(0.4), 2, 0.0, r2, false);
    EXPECT_EQ((dropped - null_direct).cwiseAbs().maxCoeff(), 0.0f);
}

TEST(ConditionEmbed, EvalModeNeverDrops) {
    Rng rng(10);
    Backbone<float> net(small_config(), 4, 4, 1);
    net.random_init(rng, 0.1);
    Rng r1(5), r2(6);
    const Mat<float> a = net.condition_embed(NoiseLevel(0.4), 1, 1.0, r1, false);
    const Mat<float> b = net.condition_embed(NoiseLevel(0.4), 1, 0.0, r2, false);
    EXPECT_EQ((a - b).cwiseAbs().maxCoeff(), 0.0f);
}

TEST(ConditionEmbed, DeterministicUnderFixedSeed) {
    Rng rng(11);
    Backbone<float> net(small_config(), 4, 4, 1);
    net.random_init(rng, 0.1);
    Rng r1(42), r2(42);
    const Mat<float> a = net.condition_embed(NoiseLevel(0.9), 0, 0.5, r1, true);
    const Mat<float> b = net.condition_embed(NoiseLevel(0.9), 0, 0.5, r2, true);
    EXPECT_EQ((a - b).cwiseAbs().maxCoeff(), 0.0f);
}

TEST(ConditionEmbed, LabelOutOfRangeRejected) {
    Rng rng(12);
    Backbone<float> net(small_config(), 4, 4, 1);
    net.random_init(rng, 0.1);
    Rng r(1);
    EXPECT_THROW(net.condition_embed(NoiseLevel(0.9), 3, 0.0, r, false), ValueError);
    EXPECT_THROW(net.condition_embed(NoiseLevel(0.9), -1, 0.0, r, false), ValueError);
}

TEST(Backbone, LabelDropoutProbabilityRespected) {
    Rng rng(13);
    const int trials = 20000;
    int dropped = 0;
    for (int i = 0; i < trials; ++i) {
        auto labels = apply_label_dropout({0}, 2, 0.1, true, rng);
        if (labels[0] == 2) ++dropped;
    }
    EXPECT_NEAR(static_cast<double>(dropped) / trials, 0.1, 0.01);
}
