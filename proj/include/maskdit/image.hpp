// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "maskdit/common.hpp"
#include "maskdit/rng.hpp"

namespace maskdit {

/// A batch of images in pixel space. Storage is one row per image, with
/// channel-major pixel order: element (c, y, x) lives at c*H*W + y*W + x.
template <class T>
struct ImageBatch {
    Mat<T> data;  // (batch, C*H*W)
    long batch = 0;
    long channels = 0;
    long height = 0;
    long width = 0;

    ImageBatch() = default;
    ImageBatch(long b, long c, long h, long w) : batch(b), channels(c), height(h), width(w) {
        data.setZero(b, c * h * w);
    }

    long pixels() const { return channels * height * width; }

    T& at(long b, long c, long y, long x) { return data(b, c * height * width + y * width + x); }
    T at(long b, long c, long y, long x) const { return data(b, c * height * width + y * width + x); }

    bool same_shape(const ImageBatch& other) const {
        return batch == other.batch && channels == other.channels && height == other.height &&
               width == other.width;
    }

    static ImageBatch zeros_like(const ImageBatch& other) {
        return ImageBatch(other.batch, other.channels, other.height, other.width);
    }

    /// Unit-gaussian batch with the given geometry, drawn row by row.
    static ImageBatch gaussian(long b, long c, long h, long w, Rng& rng) {
        ImageBatch out(b, c, h, w);
        for (long i = 0; i < b; ++i)
            for (long j = 0; j < out.pixels(); ++j) out.data(i, j) = static_cast<T>(rng.normal());
        return out;
    }
};

}  // namespace maskdit
