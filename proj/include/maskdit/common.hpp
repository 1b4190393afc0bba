// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace maskdit {

// Row-major everywhere: token matrices are (rows = batch*tokens, cols = feature dim)
// and row-major keeps one token contiguous in memory.
template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

// Flat parameter buffers are viewed through Eigen maps; SIMD reductions peel
// by pointer alignment, so buffers must sit at a fixed alignment or results
// drift between otherwise identical runs.
template <class T>
using AlignedVec = std::vector<T, Eigen::aligned_allocator<T>>;

using MatF = Mat<float>;
using MatD = Mat<double>;

struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& what) : Error("shape: " + what) {}
};

struct ValueError : Error {
    explicit ValueError(const std::string& what) : Error("value: " + what) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error("config: " + what) {}
};

struct CheckpointError : Error {
    explicit CheckpointError(const std::string& what) : Error("checkpoint: " + what) {}
};

struct TrainingError : Error {
    explicit TrainingError(const std::string& what) : Error("training: " + what) {}
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw ValueError(what);
}

inline void require_shape(bool cond, const std::string& what) {
    if (!cond) throw ShapeError(what);
}

}  // namespace maskdit
