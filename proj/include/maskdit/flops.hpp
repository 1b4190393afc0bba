// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <sstream>
#include <string>

#include "maskdit/backbone.hpp"
#include "maskdit/common.hpp"
#include "maskdit/nn.hpp"
#include "maskdit/patches.hpp"

namespace maskdit {

/// Analytic per-forward cost. Counting convention: one multiply-accumulate is
/// 2 FLOPs; only token-touching matrix products are counted (patch embedding,
/// attention projections and score/value products, MLPs, encoder-to-decoder
/// projection, output head). Per-image conditioning work (time/class MLP,
/// adaLN modulation projections) and normalizations are token-count
/// independent and excluded.
struct CostReport {
    std::int64_t encoder_flops = 0;  // patch embed + encoder blocks
    std::int64_t decoder_flops = 0;  // decoder projection + decoder blocks
    std::int64_t head_flops = 0;     // final linear head
    std::int64_t total_flops = 0;
    long visible_tokens = 0;
    double ratio_vs_unmasked = 1.0;
};

namespace detail {
inline std::int64_t block_flops(std::int64_t n, std::int64_t d, std::int64_t d_mlp) {
    const std::int64_t attention = 2 * (4 * n * d * d + 2 * n * n * d);
    const std::int64_t mlp = 2 * (2 * n * d * d_mlp);
    return attention + mlp;
}

inline std::int64_t forward_flops(const BackboneConfig& cfg, std::int64_t n_tokens,
                                  std::int64_t n_vis, std::int64_t token_dim,
                                  std::int64_t* enc_out, std::int64_t* dec_out,
                                  std::int64_t* head_out) {
    const std::int64_t we = cfg.encoder_width;
    const std::int64_t wd = cfg.decoder_width;
    // Patch embedding runs on all N tokens; masked tokens are dropped after.
    std::int64_t enc = 2 * n_tokens * token_dim * we;
    enc += cfg.encoder_depth * block_flops(n_vis, we, cfg.encoder_mlp_hidden());
    std::int64_t dec = 2 * n_vis * we * wd;  // projection of visible tokens
    dec += cfg.decoder_depth * block_flops(n_tokens, wd, cfg.decoder_mlp_hidden());
    const std::int64_t head = 2 * n_tokens * wd * token_dim;
    if (enc_out) *enc_out = enc;
    if (dec_out) *dec_out = dec;
    if (head_out) *head_out = head;
    return enc + dec + head;
}
}  // namespace detail

inline CostReport flops_count(const BackboneConfig& cfg, long n_tokens, double r,
                              long channels = 1) {
    cfg.validate();
    require(n_tokens > 0, "flops_count: token count must be positive");
    require(r >= 0.0 && r < 1.0, "flops_count: ratio must lie in [0, 1)");
    const long n_vis = n_tokens - masked_token_count(n_tokens, r);
    const std::int64_t token_dim = cfg.patch_size * cfg.patch_size * channels;

    CostReport report;
    report.visible_tokens = n_vis;
    report.total_flops = detail::forward_flops(cfg, n_tokens, n_vis, token_dim,
                                               &report.encoder_flops, &report.decoder_flops,
                                               &report.head_flops);
    const std::int64_t unmasked = detail::forward_flops(cfg, n_tokens, n_tokens, token_dim,
                                                        nullptr, nullptr, nullptr);
    report.ratio_vs_unmasked =
        static_cast<double>(report.total_flops) / static_cast<double>(unmasked);
    return report;
}

/// Checks an instrumented forward trace: every encoder block must have
/// consumed exactly N - floor(rN) tokens and every decoder block exactly N.
/// On failure, `detail` receives per-layer counts.
inline bool verify_token_counts(const ForwardTrace& trace, double r, long n_tokens,
                                std::string* detail = nullptr) {
    const long n_vis = n_tokens - masked_token_count(n_tokens, r);
    bool ok = true;
    std::ostringstream msg;
    for (const auto& rec : trace.recs) {
        const long expected = (rec.stage == "encoder") ? n_vis : n_tokens;
        if (rec.tokens_per_image != expected) {
            ok = false;
            msg << rec.stage << "[" << rec.block << "]: got " << rec.tokens_per_image
                << ", expected " << expected << "\n";
        }
    }
    if (!ok && detail) *detail = msg.str();
    return ok;
}

}  // namespace maskdit
