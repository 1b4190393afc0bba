// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "maskdit/backbone.hpp"
#include "maskdit/checkpoint.hpp"
#include "maskdit/config.hpp"
#include "maskdit/dataset.hpp"
#include "maskdit/edm.hpp"
#include "maskdit/objective.hpp"
#include "maskdit/optim.hpp"
#include "maskdit/patches.hpp"

namespace maskdit {

struct StepMetrics {
    std::uint64_t step = 0;
    int phase = 1;
    double mask_ratio = 0.0;
    double sigma_mean = 0.0;
    double loss_total = 0.0;
    double loss_dsm = 0.0;
    double loss_mae = 0.0;
    double grad_norm = 0.0;
    double lr = 0.0;
    double wallclock_s = 0.0;
};

/// Per-step CSV log. Rows are written in step order and flushed periodically.
class MetricsWriter {
public:
    MetricsWriter() = default;

    void open(const std::string& path, bool append) {
        const bool exists = std::filesystem::exists(path);
        out_.open(path, append ? (std::ios::out | std::ios::app) : (std::ios::out | std::ios::trunc));
        if (!out_) throw Error("cannot open metrics file: " + path);
        if (!append || !exists)
            out_ << "step,phase,mask_ratio,sigma_mean,loss_total,loss_dsm,loss_mae,grad_norm,lr,"
                    "wallclock_s\n";
    }

    void append(const StepMetrics& m) {
        if (!out_.is_open()) return;
        char line[512];
        std::snprintf(line, sizeof(line),
                      "%llu,%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.3f\n",
                      static_cast<unsigned long long>(m.step), m.phase, m.mask_ratio, m.sigma_mean,
                      m.loss_total, m.loss_dsm, m.loss_mae, m.grad_norm, m.lr, m.wallclock_s);
        out_ << line;
        if (++rows_since_flush_ >= 50) flush();
    }

    void flush() {
        if (out_.is_open()) out_.flush();
        rows_since_flush_ = 0;
    }

private:
    std::ofstream out_;
    int rows_since_flush_ = 0;
};

/// Owns the model, the optimizer/EMA state and the RNG; runs the masked
/// training phase and the unmasking-tuning phase. Single-threaded and fully
/// deterministic under a fixed seed.
class Trainer {
public:
    explicit Trainer(const RunConfig& cfg)
        : cfg_(cfg),
          net_(cfg.backbone, cfg.dataset.height / cfg.backbone.patch_size,
               cfg.dataset.width / cfg.backbone.patch_size, cfg.dataset.channels),
          rng_(cfg.seed) {
        cfg.validate();
    }

    /// Fresh initialization: default weight init, EMA = params, zero moments.
    void init() {
        net_.default_init(rng_);
        ema_.assign(net_.store().data().begin(), net_.store().data().end());
        adam_.reset(net_.store().data().size());
        step_ = 0;
        phase_ = 1;
    }

    Backbone<float>& net() { return net_; }
    const RunConfig& run_config() const { return cfg_; }
    std::uint64_t step() const { return step_; }
    int phase() const { return phase_; }
    const AlignedVec<float>& ema() const { return ema_; }
    const AdamState<float>& adam() const { return adam_; }
    Rng& rng() { return rng_; }
    long masks_sampled() const { return masks_sampled_; }
    const std::vector<StepMetrics>& history() const { return history_; }

    /// One optimizer step at the given mask ratio. Draw order per step: batch
    /// (label, jitter, pixels), sigmas, noise, masks (only when floor(rN) > 0),
    /// label dropout.
    StepMetrics train_step(double mask_ratio, double lr, long batch_size, int phase) {
        phase_ = phase;
        const long n_tokens = net_.tokens_per_image();
        auto [x0, labels] = make_batch<float>(cfg_.dataset, batch_size, rng_);

        std::vector<double> sigmas(static_cast<std::size_t>(batch_size));
        for (auto& s : sigmas) s = sample_training_sigma(rng_, cfg_.edm).sigma;

        ImageBatch<float> eps = ImageBatch<float>::gaussian(batch_size, x0.channels, x0.height,
                                                            x0.width, rng_);
        ImageBatch<float> noisy = x0;
        for (long b = 0; b < batch_size; ++b)
            noisy.data.row(b) += static_cast<float>(sigmas[static_cast<std::size_t>(b)]) *
                                 eps.data.row(b);

        std::vector<MaskPattern> masks;
        masks.reserve(static_cast<std::size_t>(batch_size));
        if (masked_token_count(n_tokens, mask_ratio) > 0) {
            for (long b = 0; b < batch_size; ++b) {
                masks.push_back(sample_mask(n_tokens, mask_ratio, rng_));
                ++masks_sampled_;
            }
        } else {
            for (long b = 0; b < batch_size; ++b) masks.push_back(MaskPattern::none(n_tokens));
        }

        const auto dropped = apply_label_dropout(labels, cfg_.backbone.num_classes,
                                                 cfg_.train.p_uncond, /*train_mode=*/true, rng_);

        TokenGrid<float> tokens0 = patchify(x0, cfg_.backbone.patch_size);
        TokenGrid<float> tokens_noisy = patchify(noisy, cfg_.backbone.patch_size);

        std::vector<double> weights(static_cast<std::size_t>(batch_size));
        Mat<float> scaled(tokens_noisy.tokens.rows(), tokens_noisy.tokens.cols());
        for (long b = 0; b < batch_size; ++b) {
            const EdmCoeffs c = edm_coeffs(NoiseLevel(sigmas[static_cast<std::size_t>(b)]), cfg_.edm);
            scaled.middleRows(b * n_tokens, n_tokens) =
                tokens_noisy.tokens.middleRows(b * n_tokens, n_tokens) * static_cast<float>(c.c_in);
            weights[static_cast<std::size_t>(b)] =
                loss_weight(NoiseLevel(sigmas[static_cast<std::size_t>(b)]), cfg_.edm);
        }

        Mat<float> raw;
        net_.forward(scaled, masks, sigmas, dropped, cache_, raw);

        Mat<float> pred(raw.rows(), raw.cols());
        for (long b = 0; b < batch_size; ++b) {
            const EdmCoeffs c = edm_coeffs(NoiseLevel(sigmas[static_cast<std::size_t>(b)]), cfg_.edm);
            pred.middleRows(b * n_tokens, n_tokens) =
                static_cast<float>(c.c_skip) *
                    tokens_noisy.tokens.middleRows(b * n_tokens, n_tokens) +
                static_cast<float>(c.c_out) * raw.middleRows(b * n_tokens, n_tokens);
        }

        Mat<float> d_pred;
        const std::vector<double>* mae_w = cfg_.train.mae_sigma_weighted ? &weights : nullptr;
        const LossBreakdown loss =
            batch_objective(pred, tokens0.tokens, tokens_noisy.tokens, masks, weights,
                            cfg_.train.dsm_mode_enum(), cfg_.train.lambda_mae, &d_pred, mae_w);
        if (!std::isfinite(loss.total)) {
            double sig_lo = sigmas[0], sig_hi = sigmas[0];
            for (double s : sigmas) {
                sig_lo = std::min(sig_lo, s);
                sig_hi = std::max(sig_hi, s);
            }
            throw TrainingError("non-finite loss at step " + std::to_string(step_) +
                                ": dsm=" + std::to_string(loss.dsm) +
                                " mae=" + std::to_string(loss.mae) +
                                " sigma range=[" + std::to_string(sig_lo) + ", " +
                                std::to_string(sig_hi) + "]");
        }

        Mat<float> d_raw(d_pred.rows(), d_pred.cols());
        for (long b = 0; b < batch_size; ++b) {
            const EdmCoeffs c = edm_coeffs(NoiseLevel(sigmas[static_cast<std::size_t>(b)]), cfg_.edm);
            d_raw.middleRows(b * n_tokens, n_tokens) =
                static_cast<float>(c.c_out) * d_pred.middleRows(b * n_tokens, n_tokens);
        }

        net_.store().zero_grad();
        net_.backward(d_raw, cache_);

        double grad_sq = 0.0;
        for (float g : net_.store().grad_data()) grad_sq += static_cast<double>(g) * g;

        AdamConfig opt;
        opt.lr = lr;
        opt.beta1 = cfg_.train.adam_beta1;
        opt.beta2 = cfg_.train.adam_beta2;
        opt.eps = cfg_.train.adam_eps;
        opt.weight_decay = cfg_.train.weight_decay;
        adamw_update(net_.store().data(), net_.store().grad_data(), adam_, opt, step_);
        ema_update(ema_, net_.store().data(),
                   ema_effective_decay(cfg_.train.ema_decay, step_, cfg_.train.ema_warmup));
        ++step_;

        StepMetrics m;
        m.step = step_;
        m.phase = phase;
        m.mask_ratio = mask_ratio;
        double sig_sum = 0.0;
        for (double s : sigmas) sig_sum += s;
        m.sigma_mean = sig_sum / static_cast<double>(batch_size);
        m.loss_total = loss.total;
        m.loss_dsm = loss.dsm;
        m.loss_mae = loss.mae;
        m.grad_norm = std::sqrt(grad_sq);
        m.lr = lr;
        m.wallclock_s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - run_start_).count();
        history_.push_back(m);
        return m;
    }

    /// Phase 1 (fixed ratio) followed by the optional phase 2 with the
    /// configured schedule; resume-aware via the global step counter.
    void run_all(MetricsWriter* metrics = nullptr) {
        run_start_ = std::chrono::steady_clock::now();
        std::filesystem::create_directories(cfg_.out_dir);
        const long s1 = cfg_.train.steps_phase1;
        const long s2 = cfg_.train.steps_phase2;
        while (static_cast<long>(step_) < s1) {
            const StepMetrics m =
                train_step(cfg_.train.mask_ratio, cfg_.train.lr, cfg_.train.batch_size, 1);
            if (metrics) metrics->append(m);
            maybe_checkpoint();
        }
        while (static_cast<long>(step_) < s1 + s2) {
            const long i = static_cast<long>(step_) - s1;
            const double r = tune_ratio(cfg_.train.tune_schedule, i, s2);
            const StepMetrics m =
                train_step(r, cfg_.train.tune_lr, cfg_.train.tune_batch_size, 2);
            if (metrics) metrics->append(m);
            maybe_checkpoint();
        }
        if (metrics) metrics->flush();
        save(checkpoint_path("final"));
    }

    /// Standalone unmasking tuning from the current state (used by `tune`).
    void run_tune(long steps, const std::string& schedule, double lr, long batch_size,
                  MetricsWriter* metrics = nullptr) {
        require(steps > 0, "tune: step count must be positive");
        run_start_ = std::chrono::steady_clock::now();
        std::filesystem::create_directories(cfg_.out_dir);
        for (long i = 0; i < steps; ++i) {
            const StepMetrics m = train_step(tune_ratio(schedule, i, steps), lr, batch_size, 2);
            if (metrics) metrics->append(m);
            maybe_checkpoint();
        }
        if (metrics) metrics->flush();
        save(checkpoint_path("tuned"));
    }

    /// Schedule value for tuning step i of n: zero-ratio is identically 0;
    /// cosine-ratio runs from 0.5 at the first step to exactly 0 at the last.
    static double tune_ratio(const std::string& schedule, long i, long n_steps) {
        if (schedule == "zero") return 0.0;
        if (schedule == "cosine") return cosine_ratio(i, std::max(n_steps - 1, 1L));
        throw ConfigError("unknown tuning schedule: " + schedule);
    }

    CheckpointData make_checkpoint() const {
        CheckpointData ck;
        ck.step = step_;
        ck.phase = phase_;
        ck.config_hash = config_hash(cfg_);
        ck.config_json = to_json(cfg_).dump();
        ck.rng_state = rng_.save();
        for (const auto& e : net_.store().entries()) ck.tensors.push_back({e.name, e.rows, e.cols});
        ck.params.assign(net_.store().data().begin(), net_.store().data().end());
        ck.ema.assign(ema_.begin(), ema_.end());
        ck.adam_m.assign(adam_.m.begin(), adam_.m.end());
        ck.adam_v.assign(adam_.v.begin(), adam_.v.end());
        return ck;
    }

    void save(const std::string& path) const { save_checkpoint(path, make_checkpoint()); }

    void load(const CheckpointData& ck) {
        const auto& entries = net_.store().entries();
        if (ck.tensors.size() != entries.size())
            throw CheckpointError("shape mismatch: checkpoint has " +
                                  std::to_string(ck.tensors.size()) + " tensors, model has " +
                                  std::to_string(entries.size()));
        for (std::size_t i = 0; i < entries.size(); ++i) {
            const auto& a = ck.tensors[i];
            const auto& b = entries[i];
            if (a.name != b.name || a.rows != b.rows || a.cols != b.cols)
                throw CheckpointError("shape mismatch for tensor '" + b.name + "': checkpoint " +
                                      a.name + " " + std::to_string(a.rows) + "x" +
                                      std::to_string(a.cols) + ", model " + std::to_string(b.rows) +
                                      "x" + std::to_string(b.cols));
        }
        if (ck.config_hash != config_hash(cfg_))
            throw CheckpointError("config hash mismatch: checkpoint was written by a different "
                                  "architecture configuration");
        net_.store().data().assign(ck.params.begin(), ck.params.end());
        ema_.assign(ck.ema.begin(), ck.ema.end());
        adam_.m.assign(ck.adam_m.begin(), ck.adam_m.end());
        adam_.v.assign(ck.adam_v.begin(), ck.adam_v.end());
        rng_.restore(ck.rng_state);
        step_ = ck.step;
        phase_ = ck.phase;
    }

    void load_file(const std::string& path) { load(load_checkpoint(path)); }

    /// Copies the EMA shadow into the live parameters (for sampling/eval).
    void use_ema_weights() { net_.store().data().assign(ema_.begin(), ema_.end()); }

private:
    void maybe_checkpoint() {
        if (step_ > 0 && step_ % static_cast<std::uint64_t>(cfg_.train.checkpoint_every) == 0)
            save(checkpoint_path(std::to_string(step_)));
    }

    std::string checkpoint_path(const std::string& tag) const {
        return (std::filesystem::path(cfg_.out_dir) / ("ckpt_" + tag + ".mdit")).string();
    }

    RunConfig cfg_;
    Backbone<float> net_;
    Rng rng_;
    AlignedVec<float> ema_;
    AdamState<float> adam_;
    std::uint64_t step_ = 0;
    int phase_ = 1;
    long masks_sampled_ = 0;
    Backbone<float>::Cache cache_;
    std::vector<StepMetrics> history_;
    std::chrono::steady_clock::time_point run_start_ = std::chrono::steady_clock::now();
};

/// Loads checkpoint weights (EMA by default) into a standalone backbone,
/// validating names and shapes against the model.
inline void load_weights_into(Backbone<float>& net, const CheckpointData& ck, bool use_ema) {
    const auto& entries = net.store().entries();
    if (ck.tensors.size() != entries.size())
        throw CheckpointError("shape mismatch: tensor count differs from model");
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& a = ck.tensors[i];
        const auto& b = entries[i];
        if (a.name != b.name || a.rows != b.rows || a.cols != b.cols)
            throw CheckpointError("shape mismatch for tensor '" + b.name + "'");
    }
    const std::vector<float>& src = use_ema ? ck.ema : ck.params;
    net.store().data().assign(src.begin(), src.end());
}

}  // namespace maskdit
