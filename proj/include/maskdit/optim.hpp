// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "maskdit/common.hpp"

namespace maskdit {

/// Adam with decoupled weight decay. Moments live in the same precision as the
/// parameters (32-bit in training).
struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

template <class T>
struct AdamState {
    AlignedVec<T> m;
    AlignedVec<T> v;

    void reset(std::size_t n) {
        m.assign(n, T(0));
        v.assign(n, T(0));
    }
};

/// One update. `step` is the number of completed updates before this one
/// (bias correction uses step + 1).
template <class T>
void adamw_update(AlignedVec<T>& params, const AlignedVec<T>& grads, AdamState<T>& state,
                  const AdamConfig& cfg, std::uint64_t step) {
    require(params.size() == grads.size() && params.size() == state.m.size() &&
                params.size() == state.v.size(),
            "adamw: buffer sizes disagree");
    const auto t = static_cast<double>(step + 1);
    const T b1 = static_cast<T>(cfg.beta1);
    const T b2 = static_cast<T>(cfg.beta2);
    const T inv_bc1 = static_cast<T>(1.0 / (1.0 - std::pow(cfg.beta1, t)));
    const T inv_bc2 = static_cast<T>(1.0 / (1.0 - std::pow(cfg.beta2, t)));
    const T lr = static_cast<T>(cfg.lr);
    const T eps = static_cast<T>(cfg.eps);
    const T wd = static_cast<T>(cfg.weight_decay);
    const auto n = static_cast<long>(params.size());
#pragma omp parallel for schedule(static)
    for (long i = 0; i < n; ++i) {
        const T g = grads[i];
        state.m[i] = b1 * state.m[i] + (T(1) - b1) * g;
        state.v[i] = b2 * state.v[i] + (T(1) - b2) * g * g;
        const T mhat = state.m[i] * inv_bc1;
        const T vhat = state.v[i] * inv_bc2;
        params[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * params[i]);
    }
}

/// ema <- decay * ema + (1 - decay) * params.
template <class T>
void ema_update(AlignedVec<T>& ema, const AlignedVec<T>& params, double decay) {
    require(decay >= 0.0 && decay < 1.0, "ema: decay must lie in [0, 1)");
    require(ema.size() == params.size(), "ema: buffer sizes disagree");
    const T d = static_cast<T>(decay);
    const T one_minus = static_cast<T>(1.0 - decay);
    const auto n = static_cast<long>(ema.size());
#pragma omp parallel for schedule(static)
    for (long i = 0; i < n; ++i) ema[i] = d * ema[i] + one_minus * params[i];
}

/// Effective decay with the standard warmup cap min(decay, (1+step)/(10+step)).
/// Without it, a 0.9999 EMA over a few thousand desk-scale steps would still
/// be dominated by the initialization.
inline double ema_effective_decay(double decay, std::uint64_t step, bool warmup) {
    if (!warmup) return decay;
    const auto s = static_cast<double>(step);
    return std::min(decay, (1.0 + s) / (10.0 + s));
}

}  // namespace maskdit
