// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Eigenvalues>
#include <cmath>

#include "maskdit/common.hpp"
#include "maskdit/image.hpp"

namespace maskdit {

/// Frechet distance between Gaussian fits of two pixel-space sample sets:
///   ||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)).
/// The square root is taken on the symmetrized product, with negative
/// eigenvalues clamped to zero. Everything runs in float64.
inline double pixel_frechet(const MatD& set1, const MatD& set2) {
    require(set1.rows() >= 2 && set2.rows() >= 2, "pixel_frechet: need at least 2 samples per set");
    require_shape(set1.cols() == set2.cols(), "pixel_frechet: feature dims differ");

    const Eigen::VectorXd mu1 = set1.colwise().mean();
    const Eigen::VectorXd mu2 = set2.colwise().mean();
    const MatD c1 = set1.rowwise() - mu1.transpose();
    const MatD c2 = set2.rowwise() - mu2.transpose();
    const Eigen::MatrixXd s1 =
        (c1.transpose() * c1) / static_cast<double>(set1.rows() - 1);
    const Eigen::MatrixXd s2 =
        (c2.transpose() * c2) / static_cast<double>(set2.rows() - 1);

    const Eigen::MatrixXd prod = s1 * s2;
    const Eigen::MatrixXd sym = 0.5 * (prod + prod.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
    require(eig.info() == Eigen::Success, "pixel_frechet: eigendecomposition failed");
    double trace_sqrt = 0.0;
    for (long i = 0; i < eig.eigenvalues().size(); ++i)
        trace_sqrt += std::sqrt(std::max(0.0, eig.eigenvalues()(i)));

    const double mean_term = (mu1 - mu2).squaredNorm();
    return mean_term + s1.trace() + s2.trace() - 2.0 * trace_sqrt;
}

/// Convenience overload on image batches (each image is one sample vector).
template <class T>
double pixel_frechet(const ImageBatch<T>& set1, const ImageBatch<T>& set2) {
    require_shape(set1.channels == set2.channels && set1.height == set2.height &&
                      set1.width == set2.width,
                  "pixel_frechet: image geometry differs");
    return pixel_frechet(MatD(set1.data.template cast<double>()),
                         MatD(set2.data.template cast<double>()));
}

}  // namespace maskdit
