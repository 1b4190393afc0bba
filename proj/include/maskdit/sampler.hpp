// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "maskdit/backbone.hpp"
#include "maskdit/common.hpp"
#include "maskdit/edm.hpp"
#include "maskdit/image.hpp"
#include "maskdit/patches.hpp"

namespace maskdit {

struct SamplerConfig {
    long num_steps = 40;
    double t_min = 0.002;
    double t_max = 80.0;
    double rho = 7.0;
    double guidance_scale = 1.0;  // w = 1 means no guidance

    void validate() const {
        require(num_steps >= 2, "sampler: need at least 2 steps");
        require(t_min > 0.0 && t_max > t_min, "sampler: need 0 < t_min < t_max");
        require(rho > 0.0, "sampler: rho must be positive");
        require(guidance_scale >= 1.0, "sampler: guidance scale must be >= 1");
    }
};

/// Decreasing rho-spaced times t_0 = t_max ... t_{N-1} = t_min, with a final 0
/// appended so the last step integrates to the clean-data endpoint.
inline std::vector<double> time_schedule(const SamplerConfig& cfg) {
    cfg.validate();
    std::vector<double> t(static_cast<std::size_t>(cfg.num_steps) + 1);
    const double inv_rho = 1.0 / cfg.rho;
    const double a = std::pow(cfg.t_max, inv_rho);
    const double b = std::pow(cfg.t_min, inv_rho);
    for (long i = 0; i < cfg.num_steps; ++i) {
        const double frac = static_cast<double>(i) / static_cast<double>(cfg.num_steps - 1);
        t[static_cast<std::size_t>(i)] = std::pow(a + frac * (b - a), cfg.rho);
    }
    t[static_cast<std::size_t>(cfg.num_steps)] = 0.0;
    return t;
}

/// Guided denoiser output d_uncond + w * (d_cond - d_uncond). w == 1 returns
/// the conditional branch bit-exactly.
template <class T>
ImageBatch<T> cfg_denoise(const ImageBatch<T>& d_cond, const ImageBatch<T>& d_uncond, double w) {
    require_shape(d_cond.same_shape(d_uncond), "cfg_denoise: shape mismatch");
    if (w == 1.0) return d_cond;
    ImageBatch<T> out = d_cond;
    out.data = d_uncond.data + static_cast<T>(w) * (d_cond.data - d_uncond.data);
    return out;
}

/// One integrator step of dx = (x - D(x, t)) / t * dt. Euler predictor plus a
/// trapezoidal corrector, except at t_next == 0 where the derivative is
/// singular and the Euler value is final.
template <class T, class DenoiseFn>
ImageBatch<T> heun_step(const ImageBatch<T>& x, double t_cur, double t_next, DenoiseFn&& denoise) {
    require(t_cur > t_next && t_next >= 0.0, "heun_step: need t_cur > t_next >= 0");
    const T h = static_cast<T>(t_next - t_cur);
    ImageBatch<T> d_cur = denoise(x, t_cur);
    require_shape(d_cur.same_shape(x), "heun_step: denoiser changed shape");
    Mat<T> deriv = (x.data - d_cur.data) / static_cast<T>(t_cur);
    ImageBatch<T> x_next = x;
    x_next.data = x.data + h * deriv;
    if (t_next > 0.0) {
        ImageBatch<T> d_nxt = denoise(x_next, t_next);
        Mat<T> deriv2 = (x_next.data - d_nxt.data) / static_cast<T>(t_next);
        x_next.data = x.data + h * T(0.5) * (deriv + deriv2);
    }
    return x_next;
}

struct SampleStats {
    long denoiser_evals = 0;     // calls to the (possibly guided) denoiser
    long backbone_forwards = 0;  // underlying network evaluations
};

/// Full-token denoiser built from a backbone: D(x, sigma) = c_skip*x +
/// c_out*F(c_in*x, c_noise) with no masking. Evaluates the null-token branch
/// only when the guidance scale asks for it.
template <class T>
class BackboneDenoiser {
public:
    BackboneDenoiser(const Backbone<T>& net, const EdmConstants& consts)
        : net_(net), consts_(consts) {
        consts.validate();
    }

    ImageBatch<T> denoise(const ImageBatch<T>& x, double t, const std::vector<int>& labels,
                          double guidance, SampleStats* stats) const {
        ++cached_stats_.denoiser_evals;
        ImageBatch<T> d_cond = run(x, t, labels);
        ImageBatch<T> out;
        if (guidance == 1.0) {
            out = std::move(d_cond);
        } else {
            const std::vector<int> null_labels(labels.size(),
                                               static_cast<int>(net_.config().num_classes));
            ImageBatch<T> d_uncond = run(x, t, null_labels);
            out = cfg_denoise(d_cond, d_uncond, guidance);
        }
        if (stats) *stats = cached_stats_;
        return out;
    }

    const SampleStats& stats() const { return cached_stats_; }

private:
    ImageBatch<T> run(const ImageBatch<T>& x, double t, const std::vector<int>& labels) const {
        ++cached_stats_.backbone_forwards;
        const EdmCoeffs c = edm_coeffs(NoiseLevel(t), consts_);
        TokenGrid<T> grid = patchify(x, net_.config().patch_size);
        Mat<T> scaled = grid.tokens * static_cast<T>(c.c_in);
        const std::vector<MaskPattern> masks(static_cast<std::size_t>(x.batch),
                                             MaskPattern::none(grid.tokens_per_image()));
        const std::vector<double> sigmas(static_cast<std::size_t>(x.batch), t);
        Mat<T> raw;
        net_.forward(scaled, masks, sigmas, labels, cache_, raw);
        grid.tokens = static_cast<T>(c.c_skip) * grid.tokens + static_cast<T>(c.c_out) * raw;
        return unpatchify(grid);
    }

    const Backbone<T>& net_;
    EdmConstants consts_;
    mutable typename Backbone<T>::Cache cache_;
    mutable SampleStats cached_stats_;
};

/// Deterministic probability-flow sampling: x ~ N(0, t_max^2 I), integrated
/// through the rho schedule with Heun steps, all patches visible. Large label
/// lists are processed in chunks to bound the activation workspace; stats
/// report counts for a single chunk's ODE when everything fits in one chunk.
template <class T>
ImageBatch<T> sample(const Backbone<T>& net, const EdmConstants& consts,
                     const std::vector<int>& labels, const SamplerConfig& cfg, Rng& rng,
                     SampleStats* stats = nullptr, long chunk_size = 64) {
    cfg.validate();
    require(!labels.empty(), "sample: need at least one label");
    for (int label : labels)
        require(label >= 0 && label < net.config().num_classes, "sample: label out of range");
    const long p = net.config().patch_size;
    const std::vector<double> times = time_schedule(cfg);
    const auto total = static_cast<long>(labels.size());
    ImageBatch<T> out;
    BackboneDenoiser<T> denoiser(net, consts);

    long done = 0;
    bool first_chunk = true;
    while (done < total) {
        const long b = std::min(chunk_size, total - done);
        const std::vector<int> chunk_labels(labels.begin() + done, labels.begin() + done + b);
        ImageBatch<T> x = ImageBatch<T>::gaussian(b, net.channels(), net.grid_h() * p,
                                                  net.grid_w() * p, rng);
        x.data *= static_cast<T>(cfg.t_max);
        for (std::size_t i = 0; i + 1 < times.size(); ++i) {
            x = heun_step(x, times[i], times[i + 1], [&](const ImageBatch<T>& xi, double t) {
                return denoiser.denoise(xi, t, chunk_labels, cfg.guidance_scale, nullptr);
            });
        }
        if (first_chunk) {
            out = ImageBatch<T>(total, x.channels, x.height, x.width);
            if (stats) *stats = denoiser.stats();
            first_chunk = false;
        }
        out.data.middleRows(done, b) = x.data;
        done += b;
    }
    return out;
}

}  // namespace maskdit
