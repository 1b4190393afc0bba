// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>

#include "maskdit/common.hpp"
#include "maskdit/image.hpp"
#include "maskdit/rng.hpp"

namespace maskdit {

/// Noise scale sigma (identical to the time variable t of the process).
struct NoiseLevel {
    double sigma;

    explicit NoiseLevel(double s) : sigma(s) {
        require(std::isfinite(s) && s > 0.0, "sigma must be positive and finite");
    }
};

/// Preconditioning and training-noise constants.
struct EdmConstants {
    double sigma_data = 0.5;  // data is rescaled so per-channel std matches this
    double p_mean = -1.2;     // ln(sigma) ~ Normal(p_mean, p_std^2) during training
    double p_std = 1.2;

    void validate() const {
        require(sigma_data > 0.0, "sigma_data must be positive");
        require(p_std > 0.0, "p_std must be positive");
    }
};

/// sigma-dependent scalings wrapping the raw network F:
///   D(x, sigma) = c_skip * x + c_out * F(c_in * x, c_noise)
struct EdmCoeffs {
    double c_skip;
    double c_out;
    double c_in;
    double c_noise;
};

inline EdmCoeffs edm_coeffs(const NoiseLevel& sigma, const EdmConstants& consts) {
    const double s2 = sigma.sigma * sigma.sigma;
    const double d2 = consts.sigma_data * consts.sigma_data;
    EdmCoeffs c{};
    c.c_skip = d2 / (s2 + d2);
    c.c_out = sigma.sigma * consts.sigma_data / std::sqrt(s2 + d2);
    c.c_in = 1.0 / std::sqrt(s2 + d2);
    c.c_noise = 0.25 * std::log(sigma.sigma);
    return c;
}

/// x = x0 + sigma * eps, with eps drawn by the caller.
template <class T>
ImageBatch<T> add_noise(const ImageBatch<T>& x0, const NoiseLevel& sigma, const ImageBatch<T>& eps) {
    require_shape(x0.same_shape(eps), "add_noise: eps shape differs from x0");
    ImageBatch<T> out = x0;
    out.data += static_cast<T>(sigma.sigma) * eps.data;
    return out;
}

/// Wraps a raw backbone call in the skip/scale connection.
/// raw_output_fn receives (c_in * x, c_noise) and returns a tensor shaped like x.
template <class T, class RawFn>
ImageBatch<T> precondition(RawFn&& raw_output_fn, const ImageBatch<T>& x, const NoiseLevel& sigma,
                           const EdmConstants& consts) {
    const EdmCoeffs c = edm_coeffs(sigma, consts);
    ImageBatch<T> scaled = x;
    scaled.data *= static_cast<T>(c.c_in);
    ImageBatch<T> raw = raw_output_fn(scaled, c.c_noise);
    require_shape(raw.same_shape(x), "precondition: raw network output shape differs from x");
    ImageBatch<T> out = x;
    out.data = static_cast<T>(c.c_skip) * x.data + static_cast<T>(c.c_out) * raw.data;
    return out;
}

/// Score estimate (D(x, sigma) - x) / sigma^2.
template <class T>
ImageBatch<T> score_from_denoiser(const ImageBatch<T>& denoised, const ImageBatch<T>& x,
                                  const NoiseLevel& sigma) {
    require_shape(denoised.same_shape(x), "score_from_denoiser: shape mismatch");
    ImageBatch<T> out = denoised;
    out.data = (denoised.data - x.data) / static_cast<T>(sigma.sigma * sigma.sigma);
    return out;
}

/// Training noise level: ln(sigma) ~ Normal(p_mean, p_std^2).
inline NoiseLevel sample_training_sigma(Rng& rng, const EdmConstants& consts) {
    return NoiseLevel(std::exp(consts.p_mean + consts.p_std * rng.normal()));
}

/// Per-sample DSM weight (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2;
/// the reciprocal of c_out^2, so the weighted regression target has unit scale.
inline double loss_weight(const NoiseLevel& sigma, const EdmConstants& consts) {
    const double s2 = sigma.sigma * sigma.sigma;
    const double d2 = consts.sigma_data * consts.sigma_data;
    return (s2 + d2) / (s2 * d2);
}

}  // namespace maskdit
