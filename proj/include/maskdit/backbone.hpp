// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "maskdit/common.hpp"
#include "maskdit/edm.hpp"
#include "maskdit/nn.hpp"
#include "maskdit/patches.hpp"
#include "maskdit/rng.hpp"

namespace maskdit {

/// Fixed (non-learned) 1-D sine-cosine table: [sin(pos*w_k) | cos(pos*w_k)],
/// w_k = 1 / 10000^(k / (dim/2)).
template <class T>
Mat<T> sincos_1d(const std::vector<double>& positions, long dim) {
    require(dim % 2 == 0, "sincos_1d: dim must be even");
    const long half = dim / 2;
    Mat<T> out(static_cast<long>(positions.size()), dim);
    for (long i = 0; i < out.rows(); ++i) {
        for (long k = 0; k < half; ++k) {
            const double omega =
                1.0 / std::pow(10000.0, static_cast<double>(k) / static_cast<double>(half));
            const double v = positions[static_cast<std::size_t>(i)] * omega;
            out(i, k) = static_cast<T>(std::sin(v));
            out(i, half + k) = static_cast<T>(std::cos(v));
        }
    }
    return out;
}

/// 2-D table for a grid in row-major token order: first half of the features
/// encodes the row coordinate, second half the column coordinate.
template <class T>
Mat<T> sincos_2d(long grid_h, long grid_w, long dim) {
    require(dim % 4 == 0, "sincos_2d: dim must be divisible by 4");
    std::vector<double> hs, ws;
    hs.reserve(static_cast<std::size_t>(grid_h * grid_w));
    ws.reserve(static_cast<std::size_t>(grid_h * grid_w));
    for (long y = 0; y < grid_h; ++y)
        for (long x = 0; x < grid_w; ++x) {
            hs.push_back(static_cast<double>(y));
            ws.push_back(static_cast<double>(x));
        }
    Mat<T> out(grid_h * grid_w, dim);
    out.leftCols(dim / 2) = sincos_1d<T>(hs, dim / 2);
    out.rightCols(dim / 2) = sincos_1d<T>(ws, dim / 2);
    return out;
}

/// Frequency embedding of the conditioning scalar (c_noise), DiT-style:
/// [cos(t*w_k) | sin(t*w_k)], w_k = exp(-ln(10000) * k / (dim/2)).
template <class T>
void freq_embed(const std::vector<double>& values, long dim, Mat<T>& out) {
    require(dim % 2 == 0, "freq_embed: dim must be even");
    const long half = dim / 2;
    out.resize(static_cast<long>(values.size()), dim);
    for (long i = 0; i < out.rows(); ++i) {
        for (long k = 0; k < half; ++k) {
            const double omega = std::exp(-std::log(10000.0) * static_cast<double>(k) /
                                          static_cast<double>(half));
            const double v = values[static_cast<std::size_t>(i)] * omega;
            out(i, k) = static_cast<T>(std::cos(v));
            out(i, half + k) = static_cast<T>(std::sin(v));
        }
    }
}

/// Replaces labels by the null token (index = num_classes) with probability
/// p_uncond. Draws exactly one uniform per sample in train mode and nothing
/// in eval mode, so the RNG stream stays replayable.
inline std::vector<int> apply_label_dropout(std::vector<int> labels, long num_classes,
                                            double p_uncond, bool train_mode, Rng& rng) {
    for (auto& label : labels) {
        require(label >= 0 && label <= num_classes, "class label out of range");
        if (train_mode && rng.uniform() < p_uncond) label = static_cast<int>(num_classes);
    }
    return labels;
}

/// Noise-level + class conditioning: sinusoidal embedding of c_noise through a
/// 2-layer SiLU MLP, summed with a learned class table of size K+1 (row K is
/// the null token).
template <class T>
struct ConditionEmbedder {
    long freq_dim = 0;
    long cond_dim = 0;
    long num_classes = 0;
    Linear<T> fc1, fc2;
    long table_idx = -1;
    ParamStore<T>* ps = nullptr;

    void init(ParamStore<T>& store, long fd, long cd, long k) {
        ps = &store;
        freq_dim = fd;
        cond_dim = cd;
        num_classes = k;
        fc1.init(store, "cond.time_fc1", fd, cd);
        fc2.init(store, "cond.time_fc2", cd, cd);
        table_idx = store.add("cond.class_table", k + 1, cd);
    }

    void default_init(Rng& rng) {
        fc1.init_normal(rng, 0.02);
        fc2.init_normal(rng, 0.02);
        auto table = ps->param(table_idx);
        for (long i = 0; i < table.rows(); ++i)
            for (long j = 0; j < table.cols(); ++j) table(i, j) = static_cast<T>(0.02 * rng.normal());
    }

    struct Cache {
        Mat<T> freq;
        Mat<T> fc1_out;
        Mat<T> silu_out;
        std::vector<int> labels;
    };

    void forward(const std::vector<double>& sigmas, const std::vector<int>& labels, Cache& c,
                 Mat<T>& cond) const {
        std::vector<double> c_noise(sigmas.size());
        for (std::size_t i = 0; i < sigmas.size(); ++i) {
            require(sigmas[i] > 0.0, "conditioning sigma must be positive");
            c_noise[i] = 0.25 * std::log(sigmas[i]);
        }
        freq_embed(c_noise, freq_dim, c.freq);
        fc1.forward(c.freq, c.fc1_out);
        silu_forward(c.fc1_out, c.silu_out);
        fc2.forward(c.silu_out, cond);
        c.labels = labels;
        auto table = ps->param(table_idx);
        for (long i = 0; i < cond.rows(); ++i) {
            const int label = labels[static_cast<std::size_t>(i)];
            require(label >= 0 && label <= num_classes, "class label out of range");
            cond.row(i) += table.row(label);
        }
    }

    void backward(const Cache& c, const Mat<T>& d_cond) {
        auto table_grad = ps->grad(table_idx);
        for (long i = 0; i < d_cond.rows(); ++i)
            table_grad.row(c.labels[static_cast<std::size_t>(i)]) += d_cond.row(i);
        Mat<T> d_silu, d_fc1;
        fc2.backward(c.silu_out, d_cond, &d_silu);
        silu_backward(c.fc1_out, d_silu, d_fc1);
        fc1.backward(c.freq, d_fc1, nullptr);
    }
};

struct BackboneConfig {
    long encoder_depth = 6;
    long encoder_width = 192;
    long encoder_heads = 6;
    long decoder_depth = 2;
    long decoder_width = 96;
    long decoder_heads = 6;
    long patch_size = 2;
    long num_classes = 2;
    double mlp_ratio = 4.0;

    long encoder_mlp_hidden() const {
        return static_cast<long>(std::lround(mlp_ratio * static_cast<double>(encoder_width)));
    }
    long decoder_mlp_hidden() const {
        return static_cast<long>(std::lround(mlp_ratio * static_cast<double>(decoder_width)));
    }

    void validate() const {
        require(encoder_depth >= 0 && decoder_depth >= 0, "depths must be non-negative");
        require(encoder_width > 0 && decoder_width > 0, "widths must be positive");
        require(encoder_width % encoder_heads == 0, "encoder width not divisible by heads");
        require(decoder_width % decoder_heads == 0, "decoder width not divisible by heads");
        require(encoder_width % 4 == 0 && decoder_width % 4 == 0,
                "widths must be divisible by 4 for 2-D positional tables");
        require(patch_size > 0, "patch size must be positive");
        require(num_classes >= 1, "need at least one class");
        require(mlp_ratio > 0.0, "mlp_ratio must be positive");
    }
};

/// Asymmetric encoder-decoder diffusion transformer. The encoder runs on
/// visible tokens only; a shared learnable mask token fills the hidden slots
/// before the lightweight decoder runs on the full sequence. The raw output F
/// is consumed by the EDM skip connection D = c_skip*x + c_out*F; head and
/// modulation layers are zero-initialized so F == 0 at step 0.
template <class T>
class Backbone {
public:
    Backbone(const BackboneConfig& cfg, long grid_h, long grid_w, long channels)
        : cfg_(cfg), grid_h_(grid_h), grid_w_(grid_w), channels_(channels) {
        cfg.validate();
        require(grid_h > 0 && grid_w > 0 && channels > 0, "bad token grid geometry");
        const long token_dim = cfg.patch_size * cfg.patch_size * channels;

        patch_embed_.init(store_, "patch_embed", token_dim, cfg.encoder_width);
        cond_.init(store_, cfg.encoder_width, cfg.encoder_width, cfg.num_classes);
        enc_blocks_.resize(static_cast<std::size_t>(cfg.encoder_depth));
        for (long l = 0; l < cfg.encoder_depth; ++l)
            enc_blocks_[static_cast<std::size_t>(l)].init(store_, "enc." + std::to_string(l),
                                                          cfg.encoder_width, cfg.encoder_heads,
                                                          cfg.encoder_mlp_hidden(), cfg.encoder_width);
        dec_embed_.init(store_, "dec_embed", cfg.encoder_width, cfg.decoder_width);
        mask_token_idx_ = store_.add("mask_token", 1, cfg.decoder_width);
        dec_blocks_.resize(static_cast<std::size_t>(cfg.decoder_depth));
        for (long l = 0; l < cfg.decoder_depth; ++l)
            dec_blocks_[static_cast<std::size_t>(l)].init(store_, "dec." + std::to_string(l),
                                                          cfg.decoder_width, cfg.decoder_heads,
                                                          cfg.decoder_mlp_hidden(), cfg.encoder_width);
        final_mod_.init(store_, "final.modulation", cfg.encoder_width, 2 * cfg.decoder_width);
        head_.init(store_, "final.head", cfg.decoder_width, token_dim);
        store_.freeze();

        pos_enc_ = sincos_2d<T>(grid_h, grid_w, cfg.encoder_width);
        pos_dec_ = sincos_2d<T>(grid_h, grid_w, cfg.decoder_width);
    }

    const BackboneConfig& config() const { return cfg_; }
    ParamStore<T>& store() { return store_; }
    const ParamStore<T>& store() const { return store_; }
    long tokens_per_image() const { return grid_h_ * grid_w_; }
    long token_dim() const { return cfg_.patch_size * cfg_.patch_size * channels_; }
    long grid_h() const { return grid_h_; }
    long grid_w() const { return grid_w_; }
    long channels() const { return channels_; }

    long encoder_param_count() const {
        return store_.size_with_prefix("patch_embed") + store_.size_with_prefix("cond.") +
               store_.size_with_prefix("enc.");
    }
    long decoder_param_count() const {
        return store_.size_with_prefix("dec_embed") + store_.size_with_prefix("mask_token") +
               store_.size_with_prefix("dec.") + store_.size_with_prefix("final.");
    }

    void default_init(Rng& rng) {
        patch_embed_.init_xavier(rng);
        cond_.default_init(rng);
        for (auto& block : enc_blocks_) block.default_init(rng);
        dec_embed_.init_xavier(rng);
        auto mask_token = store_.param(mask_token_idx_);
        for (long j = 0; j < mask_token.cols(); ++j)
            mask_token(0, j) = static_cast<T>(0.02 * rng.normal());
        for (auto& block : dec_blocks_) block.default_init(rng);
        final_mod_.init_zero();
        head_.init_zero();
        require(decoder_param_count() < encoder_param_count(),
                "decoder must hold fewer parameters than the encoder");
    }

    /// Every tensor uniform in (-bound, bound); used by gradient tests, where
    /// the zero-initialized gates and head would otherwise hide whole paths.
    void random_init(Rng& rng, double bound) {
        for (auto& v : store_.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    }

    struct Cache {
        typename ConditionEmbedder<T>::Cache cond;
        Mat<T> cond_vec;   // (B, We) pre-SiLU
        Mat<T> cond_act;   // SiLU(cond)
        Mat<T> tokens_in;  // copy of the network input, for patch-embed backward
        Mat<T> emb;        // patch embed + positional, all N slots
        std::vector<long> visible_rows;  // global row indices into emb, image-major
        long n_vis = 0;
        long batch = 0;
        Mat<T> enc_x;  // gathered encoder input
        std::vector<typename TransformerBlock<T>::Cache> enc;
        Mat<T> enc_final;
        std::vector<std::vector<long>> masked_slots;  // per image, token indices with m=1
        Mat<T> dec_x;
        std::vector<typename TransformerBlock<T>::Cache> dec;
        Mat<T> dec_final;
        LayerNormCache<T> ln_f;
        Mat<T> final_mod_out;  // (B, 2*Wd): shift | scale
        Mat<T> h_final;
        // reused scratch
        Mat<T> x_buf, vis_dec, d_hf, d_final_mod, d_xhat, d_cond_act, d_x, d_vis, d_enc, d_emb,
            d_cond;
    };

    /// tokens_in: (B*N, p^2*C), already noised and scaled by c_in per sample.
    /// All masks must hide the same number of tokens (true for a shared ratio).
    /// Output: raw prediction F over all N slots, (B*N, p^2*C).
    void forward(const Mat<T>& tokens_in, const std::vector<MaskPattern>& masks,
                 const std::vector<double>& sigmas, const std::vector<int>& labels, Cache& cache,
                 Mat<T>& out, ForwardTrace* trace = nullptr) const {
        const long n_tokens = tokens_per_image();
        const auto batch = static_cast<long>(sigmas.size());
        require_shape(tokens_in.rows() == batch * n_tokens, "forward: token rows != batch * N");
        require_shape(tokens_in.cols() == token_dim(), "forward: token dim mismatch");
        require_shape(static_cast<long>(masks.size()) == batch, "forward: one mask per image");
        require_shape(static_cast<long>(labels.size()) == batch, "forward: one label per image");

        cache.batch = batch;
        cache.tokens_in = tokens_in;

        cond_.forward(sigmas, labels, cache.cond, cache.cond_vec);
        silu_forward(cache.cond_vec, cache.cond_act);

        patch_embed_.forward(tokens_in, cache.emb);
#pragma omp parallel for schedule(static)
        for (long b = 0; b < batch; ++b) cache.emb.middleRows(b * n_tokens, n_tokens) += pos_enc_;

        // Drop masked tokens. Equal visible counts keep the batch rectangular.
        const long n_vis = masks[0].visible_count();
        cache.visible_rows.clear();
        cache.masked_slots.assign(static_cast<std::size_t>(batch), {});
        for (long b = 0; b < batch; ++b) {
            const MaskPattern& m = masks[static_cast<std::size_t>(b)];
            require_shape(m.size() == n_tokens, "forward: mask length != N");
            require_shape(m.visible_count() == n_vis, "forward: unequal visible counts in batch");
            for (long i = 0; i < n_tokens; ++i) {
                if (m.m[static_cast<std::size_t>(i)] == 0)
                    cache.visible_rows.push_back(b * n_tokens + i);
                else
                    cache.masked_slots[static_cast<std::size_t>(b)].push_back(i);
            }
        }
        cache.n_vis = n_vis;
        cache.enc_x.resize(batch * n_vis, cfg_.encoder_width);
        for (std::size_t r = 0; r < cache.visible_rows.size(); ++r)
            cache.enc_x.row(static_cast<long>(r)) = cache.emb.row(cache.visible_rows[r]);

        cache.enc.resize(enc_blocks_.size());
        cache.enc_final = cache.enc_x;
        for (std::size_t l = 0; l < enc_blocks_.size(); ++l) {
            if (trace) trace->recs.push_back({"encoder", static_cast<long>(l), n_vis});
            enc_blocks_[l].forward(cache.enc_final, cache.cond_act, batch, cache.enc[l],
                                   cache.x_buf);
            cache.enc_final.swap(cache.x_buf);
        }

        dec_embed_.forward(cache.enc_final, cache.vis_dec);

        auto mask_token = store_.param(mask_token_idx_);
        cache.dec_x.resize(batch * n_tokens, cfg_.decoder_width);
#pragma omp parallel for schedule(static)
        for (long b = 0; b < batch; ++b) {
            auto rows = cache.dec_x.middleRows(b * n_tokens, n_tokens);
            rows = mask_token.row(0).replicate(n_tokens, 1);
            const MaskPattern& m = masks[static_cast<std::size_t>(b)];
            long v = 0;
            for (long i = 0; i < n_tokens; ++i)
                if (m.m[static_cast<std::size_t>(i)] == 0)
                    rows.row(i) = cache.vis_dec.row(b * n_vis + v++);
            rows += pos_dec_;
        }

        cache.dec.resize(dec_blocks_.size());
        cache.dec_final = cache.dec_x;
        for (std::size_t l = 0; l < dec_blocks_.size(); ++l) {
            if (trace) trace->recs.push_back({"decoder", static_cast<long>(l), n_tokens});
            dec_blocks_[l].forward(cache.dec_final, cache.cond_act, batch, cache.dec[l],
                                   cache.x_buf);
            cache.dec_final.swap(cache.x_buf);
        }

        layernorm_forward(cache.dec_final, TransformerBlock<T>::kLnEps, cache.ln_f);
        final_mod_.forward(cache.cond_act, cache.final_mod_out);
        cache.h_final.resize(batch * n_tokens, cfg_.decoder_width);
        const long wd = cfg_.decoder_width;
#pragma omp parallel for schedule(static)
        for (long b = 0; b < batch; ++b) {
            auto shift = cache.final_mod_out.row(b).segment(0, wd).array();
            auto scale = cache.final_mod_out.row(b).segment(wd, wd).array();
            cache.h_final.middleRows(b * n_tokens, n_tokens) =
                ((cache.ln_f.xhat.middleRows(b * n_tokens, n_tokens).array().rowwise() *
                  (T(1) + scale))
                     .rowwise() +
                 shift)
                    .matrix();
        }
        head_.forward(cache.h_final, out);
    }

    /// Accumulates parameter gradients for d(loss)/d(F). Call zero_grad first
    /// when a fresh gradient is wanted.
    void backward(const Mat<T>& d_out, Cache& cache) {
        const long n_tokens = tokens_per_image();
        const long batch = cache.batch;
        const long wd = cfg_.decoder_width;

        head_.backward(cache.h_final, d_out, &cache.d_hf);

        cache.d_final_mod.setZero(batch, 2 * wd);
        cache.d_xhat.resize(batch * n_tokens, wd);
#pragma omp parallel for schedule(static)
        for (long b = 0; b < batch; ++b) {
            auto scale = cache.final_mod_out.row(b).segment(wd, wd).array();
            auto dh = cache.d_hf.middleRows(b * n_tokens, n_tokens);
            cache.d_final_mod.row(b).segment(0, wd) += dh.colwise().sum();
            cache.d_final_mod.row(b).segment(wd, wd) +=
                (dh.array() * cache.ln_f.xhat.middleRows(b * n_tokens, n_tokens).array())
                    .colwise()
                    .sum()
                    .matrix();
            cache.d_xhat.middleRows(b * n_tokens, n_tokens) =
                (dh.array().rowwise() * (T(1) + scale)).matrix();
        }
        final_mod_.backward(cache.cond_act, cache.d_final_mod, &cache.d_cond_act);

        layernorm_backward(cache.ln_f, cache.d_xhat, cache.d_x);

        for (std::size_t l = dec_blocks_.size(); l-- > 0;)
            dec_blocks_[l].backward(cache.cond_act, batch, cache.dec[l], cache.d_x,
                                    cache.d_cond_act);

        // Scatter backward: visible slots feed the decoder projection, masked
        // slots feed the shared mask token.
        cache.d_vis.resize(batch * cache.n_vis, wd);
        auto mask_token_grad = store_.grad(mask_token_idx_);
        {
            long v = 0;
            for (long b = 0; b < batch; ++b) {
                auto rows = cache.d_x.middleRows(b * n_tokens, n_tokens);
                for (long i : cache.masked_slots[static_cast<std::size_t>(b)])
                    mask_token_grad.row(0) += rows.row(i);
                const auto& slots = cache.masked_slots[static_cast<std::size_t>(b)];
                std::size_t s = 0;
                for (long i = 0; i < n_tokens; ++i) {
                    if (s < slots.size() && slots[s] == i) {
                        ++s;
                        continue;
                    }
                    cache.d_vis.row(v++) = rows.row(i);
                }
            }
        }

        dec_embed_.backward(cache.enc_final, cache.d_vis, &cache.d_enc);

        for (std::size_t l = enc_blocks_.size(); l-- > 0;)
            enc_blocks_[l].backward(cache.cond_act, batch, cache.enc[l], cache.d_enc,
                                    cache.d_cond_act);

        cache.d_emb.setZero(batch * n_tokens, cfg_.encoder_width);
        for (std::size_t r = 0; r < cache.visible_rows.size(); ++r)
            cache.d_emb.row(cache.visible_rows[r]) = cache.d_enc.row(static_cast<long>(r));
        patch_embed_.backward(cache.tokens_in, cache.d_emb, nullptr);

        silu_backward(cache.cond_vec, cache.d_cond_act, cache.d_cond);
        cond_.backward(cache.cond, cache.d_cond);
    }

    /// Conditioning vector for one sample, with label dropout applied in train
    /// mode. Deterministic given the RNG state.
    Mat<T> condition_embed(const NoiseLevel& sigma, int label, double p_uncond, Rng& rng,
                           bool train_mode) const {
        const auto dropped =
            apply_label_dropout({label}, cfg_.num_classes, p_uncond, train_mode, rng);
        typename ConditionEmbedder<T>::Cache scratch;
        Mat<T> cond;
        cond_.forward({sigma.sigma}, dropped, scratch, cond);
        return cond;
    }

private:
    BackboneConfig cfg_;
    long grid_h_, grid_w_, channels_;
    ParamStore<T> store_;
    Linear<T> patch_embed_;
    ConditionEmbedder<T> cond_;
    std::vector<TransformerBlock<T>> enc_blocks_;
    Linear<T> dec_embed_;
    long mask_token_idx_ = -1;
    std::vector<TransformerBlock<T>> dec_blocks_;
    Linear<T> final_mod_;
    Linear<T> head_;
    Mat<T> pos_enc_;
    Mat<T> pos_dec_;
};

}  // namespace maskdit
