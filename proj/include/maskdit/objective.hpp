// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include "maskdit/common.hpp"
#include "maskdit/patches.hpp"

namespace maskdit {

enum class DsmMode {
    kUnmaskedOnly,  // default: score matching on visible tokens
    kFullTokens,    // ablation: score matching on every token
};

struct LossBreakdown {
    double dsm = 0.0;
    double mae = 0.0;
    double lambda = 0.0;
    double total = 0.0;
};

inline LossBreakdown total_loss(double dsm, double mae, double lambda) {
    require(lambda >= 0.0, "lambda must be non-negative");
    LossBreakdown out;
    out.dsm = dsm;
    out.mae = mae;
    out.lambda = lambda;
    out.total = dsm + lambda * mae;
    return out;
}

/// Weighted mean squared error between the denoised prediction and the clean
/// tokens, over unmasked tokens only (or every token in the full-token
/// ablation). `weight` is the per-sample loss_weight(sigma).
template <class T>
double dsm_loss(const Mat<T>& pred, const Mat<T>& x0_tokens, const MaskPattern& m, DsmMode mode,
                double weight) {
    require_shape(pred.rows() == x0_tokens.rows() && pred.cols() == x0_tokens.cols(),
                  "dsm_loss: pred/x0 shape mismatch");
    require_shape(pred.rows() == m.size(), "dsm_loss: mask length != token count");
    double sum = 0.0;
    long rows = 0;
    for (long i = 0; i < pred.rows(); ++i) {
        if (mode == DsmMode::kUnmaskedOnly && m.m[static_cast<std::size_t>(i)] != 0) continue;
        sum += static_cast<double>((pred.row(i) - x0_tokens.row(i)).squaredNorm());
        ++rows;
    }
    require(rows > 0, "dsm_loss: no contributing tokens (all masked)");
    return weight * sum / static_cast<double>(rows * pred.cols());
}

/// Mean squared error on masked tokens against the DIFFUSED input x0 + n.
/// Zero by definition when nothing is masked.
template <class T>
double mae_loss(const Mat<T>& pred, const Mat<T>& noisy_tokens, const MaskPattern& m) {
    require_shape(pred.rows() == noisy_tokens.rows() && pred.cols() == noisy_tokens.cols(),
                  "mae_loss: pred/noisy shape mismatch");
    require_shape(pred.rows() == m.size(), "mae_loss: mask length != token count");
    double sum = 0.0;
    long rows = 0;
    for (long i = 0; i < pred.rows(); ++i) {
        if (m.m[static_cast<std::size_t>(i)] == 0) continue;
        sum += static_cast<double>((pred.row(i) - noisy_tokens.row(i)).squaredNorm());
        ++rows;
    }
    if (rows == 0) return 0.0;
    return sum / static_cast<double>(rows * pred.cols());
}

/// Batched objective: per-sample losses averaged over the batch, plus the
/// gradient of the total with respect to the prediction when requested.
/// pred/x0/noisy are (batch*N, D) stacks; weights holds one loss_weight(sigma)
/// per image and multiplies the DSM term. mae_weights (optional) applies the
/// same kind of weighting to the MAE term; by default that term is unweighted.
template <class T>
LossBreakdown batch_objective(const Mat<T>& pred, const Mat<T>& x0_tokens,
                              const Mat<T>& noisy_tokens, const std::vector<MaskPattern>& masks,
                              const std::vector<double>& weights, DsmMode mode, double lambda,
                              Mat<T>* d_pred = nullptr,
                              const std::vector<double>* mae_weights = nullptr) {
    const auto batch = static_cast<long>(masks.size());
    require(batch > 0, "batch_objective: empty batch");
    require_shape(pred.rows() % batch == 0, "batch_objective: rows not divisible by batch");
    const long n = pred.rows() / batch;
    const long d = pred.cols();
    require_shape(static_cast<long>(weights.size()) == batch, "batch_objective: one weight per image");

    if (d_pred) d_pred->setZero(pred.rows(), d);

    double dsm_sum = 0.0, mae_sum = 0.0;
    for (long b = 0; b < batch; ++b) {
        const MaskPattern& m = masks[static_cast<std::size_t>(b)];
        require_shape(m.size() == n, "batch_objective: mask length != N");
        const long n_masked = m.masked_count();
        const long n_dsm = (mode == DsmMode::kUnmaskedOnly) ? n - n_masked : n;
        require(n_dsm > 0, "batch_objective: no DSM tokens (all masked)");
        const double w = weights[static_cast<std::size_t>(b)];
        const double wm = mae_weights ? (*mae_weights)[static_cast<std::size_t>(b)] : 1.0;

        double dsm_b = 0.0, mae_b = 0.0;
        for (long i = 0; i < n; ++i) {
            const long row = b * n + i;
            const bool masked = m.m[static_cast<std::size_t>(i)] != 0;
            if (!masked || mode == DsmMode::kFullTokens) {
                const auto diff = pred.row(row) - x0_tokens.row(row);
                dsm_b += static_cast<double>(diff.squaredNorm());
                if (d_pred) {
                    const T g = static_cast<T>(2.0 * w / static_cast<double>(batch * n_dsm * d));
                    d_pred->row(row) += g * diff;
                }
            }
            if (masked) {
                const auto diff = pred.row(row) - noisy_tokens.row(row);
                mae_b += static_cast<double>(diff.squaredNorm());
                if (d_pred && lambda > 0.0) {
                    const T g = static_cast<T>(2.0 * lambda * wm /
                                               static_cast<double>(batch * n_masked * d));
                    d_pred->row(row) += g * diff;
                }
            }
        }
        dsm_sum += w * dsm_b / static_cast<double>(n_dsm * d);
        if (n_masked > 0) mae_sum += wm * mae_b / static_cast<double>(n_masked * d);
    }
    return total_loss(dsm_sum / static_cast<double>(batch), mae_sum / static_cast<double>(batch),
                      lambda);
}

}  // namespace maskdit
