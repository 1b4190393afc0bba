// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "maskdit/common.hpp"
#include "maskdit/image.hpp"
#include "maskdit/rng.hpp"

namespace maskdit {

/// Patchified batch: one row per token, images stacked so image b owns rows
/// [b*tokens_per_image, (b+1)*tokens_per_image). Token i of an image is the
/// p x p x C block at grid position (i / grid_w, i % grid_w), flattened in
/// (py, px, c) order.
template <class T>
struct TokenGrid {
    Mat<T> tokens;  // (batch * N, p*p*C)
    long batch = 0;
    long grid_h = 0;
    long grid_w = 0;
    long patch_size = 0;
    long channels = 0;

    long tokens_per_image() const { return grid_h * grid_w; }
    long token_dim() const { return patch_size * patch_size * channels; }

    auto image_rows(long b) { return tokens.middleRows(b * tokens_per_image(), tokens_per_image()); }
    auto image_rows(long b) const {
        return tokens.middleRows(b * tokens_per_image(), tokens_per_image());
    }
};

/// Binary per-patch mask (1 = masked, hidden from the encoder).
struct MaskPattern {
    std::vector<std::uint8_t> m;
    double ratio = 0.0;

    long size() const { return static_cast<long>(m.size()); }
    long masked_count() const {
        long c = 0;
        for (auto v : m) c += v;
        return c;
    }
    long visible_count() const { return size() - masked_count(); }

    static MaskPattern none(long n) {
        MaskPattern p;
        p.m.assign(static_cast<std::size_t>(n), 0);
        p.ratio = 0.0;
        return p;
    }
};

/// floor(r*N) with a small epsilon so ratios like 0.3 (inexact in binary)
/// still mask the intended count.
inline long masked_token_count(long n, double r) {
    return static_cast<long>(std::floor(r * static_cast<double>(n) + 1e-9));
}

template <class T>
TokenGrid<T> patchify(const ImageBatch<T>& image, long p) {
    require(p > 0, "patch size must be positive");
    require_shape(image.height % p == 0 && image.width % p == 0,
                  "patchify: patch size must divide image height and width");
    TokenGrid<T> grid;
    grid.batch = image.batch;
    grid.grid_h = image.height / p;
    grid.grid_w = image.width / p;
    grid.patch_size = p;
    grid.channels = image.channels;
    const long n = grid.tokens_per_image();
    const long d = grid.token_dim();
    grid.tokens.resize(image.batch * n, d);
    for (long b = 0; b < image.batch; ++b) {
        for (long gy = 0; gy < grid.grid_h; ++gy) {
            for (long gx = 0; gx < grid.grid_w; ++gx) {
                const long row = b * n + gy * grid.grid_w + gx;
                long col = 0;
                for (long py = 0; py < p; ++py)
                    for (long px = 0; px < p; ++px)
                        for (long c = 0; c < image.channels; ++c)
                            grid.tokens(row, col++) = image.at(b, c, gy * p + py, gx * p + px);
            }
        }
    }
    return grid;
}

template <class T>
ImageBatch<T> unpatchify(const TokenGrid<T>& grid) {
    require_shape(grid.tokens.cols() == grid.token_dim(),
                  "unpatchify: token length does not match p*p*C");
    require_shape(grid.tokens.rows() == grid.batch * grid.tokens_per_image(),
                  "unpatchify: row count does not match batch * N");
    const long p = grid.patch_size;
    ImageBatch<T> image(grid.batch, grid.channels, grid.grid_h * p, grid.grid_w * p);
    const long n = grid.tokens_per_image();
    for (long b = 0; b < grid.batch; ++b) {
        for (long gy = 0; gy < grid.grid_h; ++gy) {
            for (long gx = 0; gx < grid.grid_w; ++gx) {
                const long row = b * n + gy * grid.grid_w + gx;
                long col = 0;
                for (long py = 0; py < p; ++py)
                    for (long px = 0; px < p; ++px)
                        for (long c = 0; c < grid.channels; ++c)
                            image.at(b, c, gy * p + py, gx * p + px) = grid.tokens(row, col++);
            }
        }
    }
    return image;
}

/// Uniform subset of exactly floor(r*N) positions, sampled without replacement.
inline MaskPattern sample_mask(long n, double r, Rng& rng) {
    require(n > 0, "sample_mask: token count must be positive");
    require(r >= 0.0 && r < 1.0, "sample_mask: ratio must lie in [0, 1)");
    MaskPattern pattern;
    pattern.ratio = r;
    pattern.m.assign(static_cast<std::size_t>(n), 0);
    const long k = masked_token_count(n, r);
    if (k > 0) {
        std::vector<std::int64_t> scratch;
        for (auto idx : rng.choose(n, k, scratch)) pattern.m[static_cast<std::size_t>(idx)] = 1;
    }
    return pattern;
}

/// Tokens at unmasked positions, original order preserved, plus their indices.
template <class T>
std::pair<Mat<T>, std::vector<long>> gather_unmasked(const Mat<T>& tokens, const MaskPattern& m) {
    require_shape(tokens.rows() == m.size(), "gather_unmasked: mask length != token count");
    std::vector<long> indices;
    indices.reserve(static_cast<std::size_t>(m.size()));
    for (long i = 0; i < m.size(); ++i)
        if (m.m[static_cast<std::size_t>(i)] == 0) indices.push_back(i);
    Mat<T> visible(static_cast<long>(indices.size()), tokens.cols());
    for (long i = 0; i < visible.rows(); ++i) visible.row(i) = tokens.row(indices[static_cast<std::size_t>(i)]);
    return {std::move(visible), std::move(indices)};
}

/// Rebuilds the full-length sequence: visible tokens return to their original
/// slots, every masked slot receives the single shared mask token.
template <class T>
Mat<T> scatter_with_mask_token(const Mat<T>& visible, const std::vector<long>& indices,
                               const MaskPattern& m, const RowVec<T>& mask_token) {
    require_shape(visible.rows() == static_cast<long>(indices.size()),
                  "scatter_with_mask_token: visible count != index count");
    require_shape(visible.rows() == m.size() - m.masked_count(),
                  "scatter_with_mask_token: visible count != N - sum(m)");
    require_shape(visible.cols() == mask_token.cols(),
                  "scatter_with_mask_token: mask token width mismatch");
    Mat<T> full = mask_token.replicate(m.size(), 1);
    for (long i = 0; i < visible.rows(); ++i) {
        const long idx = indices[static_cast<std::size_t>(i)];
        require_shape(idx >= 0 && idx < m.size(), "scatter_with_mask_token: index out of range");
        full.row(idx) = visible.row(i);
    }
    return full;
}

/// Unmasking-tuning ratio r = 0.5 * cos^4((pi/2) * i / n_tot).
inline double cosine_ratio(long i, long n_tot) {
    require(n_tot > 0, "cosine_ratio: total steps must be positive");
    require(i >= 0 && i <= n_tot, "cosine_ratio: step outside [0, n_tot]");
    if (i == n_tot) return 0.0;  // cos(pi/2) exactly
    const double c = std::cos(1.5707963267948966 * static_cast<double>(i) / static_cast<double>(n_tot));
    const double c2 = c * c;
    return 0.5 * c2 * c2;
}

}  // namespace maskdit
