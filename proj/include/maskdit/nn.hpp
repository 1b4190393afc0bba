// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <thread>
#include <vector>

#include "maskdit/common.hpp"
#include "maskdit/rng.hpp"

namespace maskdit {

/// Worker count for the row-chunked kernels below. Pinned per process so that
/// repeated runs partition work identically; Eigen's own threading is disabled
/// (EIGEN_DONT_PARALLELIZE) so this is the only source of parallelism.
inline int par_threads() {
    static const int n = [] {
        const unsigned hc = std::thread::hardware_concurrency();
        return static_cast<int>(std::clamp(hc, 1u, 8u));
    }();
    return n;
}

/// Runs f(lo, hi) over a fixed partition of [0, rows). Each range is written
/// by exactly one worker, so results are bitwise identical to a serial pass.
template <class F>
inline void parallel_rows(long rows, const F& f) {
    const int nt = par_threads();
    if (nt <= 1 || rows < 128) {
        f(0L, rows);
        return;
    }
#pragma omp parallel for schedule(static)
    for (int t = 0; t < nt; ++t) {
        const long lo = rows * t / nt;
        const long hi = rows * (t + 1) / nt;
        if (hi > lo) f(lo, hi);
    }
}

/// All learnable tensors of a model, flattened into one contiguous buffer with
/// a parallel gradient buffer. Registration order is the canonical parameter
/// order used by the optimizer, the EMA shadow, and the checkpoint payload.
template <class T>
class ParamStore {
public:
    struct Entry {
        std::string name;
        long rows;
        long cols;
        long offset;
    };

    long add(std::string name, long rows, long cols) {
        require(!frozen_, "ParamStore: cannot add after freeze");
        Entry e{std::move(name), rows, cols, total_};
        total_ += rows * cols;
        entries_.push_back(std::move(e));
        return static_cast<long>(entries_.size()) - 1;
    }

    void freeze() {
        data_.assign(static_cast<std::size_t>(total_), T(0));
        grad_.assign(static_cast<std::size_t>(total_), T(0));
        frozen_ = true;
    }

    using MapT = Eigen::Map<Mat<T>>;
    using ConstMapT = Eigen::Map<const Mat<T>>;

    MapT param(long idx) {
        const Entry& e = entries_[static_cast<std::size_t>(idx)];
        return MapT(data_.data() + e.offset, e.rows, e.cols);
    }
    ConstMapT param(long idx) const {
        const Entry& e = entries_[static_cast<std::size_t>(idx)];
        return ConstMapT(data_.data() + e.offset, e.rows, e.cols);
    }
    MapT grad(long idx) {
        const Entry& e = entries_[static_cast<std::size_t>(idx)];
        return MapT(grad_.data() + e.offset, e.rows, e.cols);
    }

    void zero_grad() { std::fill(grad_.begin(), grad_.end(), T(0)); }

    AlignedVec<T>& data() { return data_; }
    const AlignedVec<T>& data() const { return data_; }
    AlignedVec<T>& grad_data() { return grad_; }
    const std::vector<Entry>& entries() const { return entries_; }
    long size() const { return total_; }

    /// Sum of entry sizes over entries whose name starts with `prefix`.
    long size_with_prefix(const std::string& prefix) const {
        long n = 0;
        for (const auto& e : entries_)
            if (e.name.rfind(prefix, 0) == 0) n += e.rows * e.cols;
        return n;
    }

private:
    std::vector<Entry> entries_;
    AlignedVec<T> data_;
    AlignedVec<T> grad_;
    long total_ = 0;
    bool frozen_ = false;
};

// ---------------------------------------------------------------------------
// Elementwise activations
// ---------------------------------------------------------------------------

template <class T>
void gelu_forward(const Mat<T>& x, Mat<T>& y) {
    // tanh approximation
    const T a = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
    const T b = static_cast<T>(0.044715);
    y.resize(x.rows(), x.cols());
    parallel_rows(x.rows(), [&](long lo, long hi) {
        auto xa = x.middleRows(lo, hi - lo).array();
        y.middleRows(lo, hi - lo) =
            (T(0.5) * xa * (T(1) + ((a * (xa + b * xa.cube())).tanh()))).matrix();
    });
}

template <class T>
void gelu_backward(const Mat<T>& x, const Mat<T>& dy, Mat<T>& dx) {
    const T a = static_cast<T>(0.7978845608028654);
    const T b = static_cast<T>(0.044715);
    dx.resize(x.rows(), x.cols());
    parallel_rows(x.rows(), [&](long lo, long hi) {
        auto xa = x.middleRows(lo, hi - lo).array();
        auto t = (a * (xa + b * xa.cube())).tanh();
        auto dinner = a * (T(1) + T(3) * b * xa.square());
        dx.middleRows(lo, hi - lo) =
            (dy.middleRows(lo, hi - lo).array() *
             (T(0.5) * (T(1) + t) + T(0.5) * xa * (T(1) - t.square()) * dinner))
                .matrix();
    });
}

template <class T>
void silu_forward(const Mat<T>& x, Mat<T>& y) {
    y = (x.array() / (T(1) + (-x.array()).exp())).matrix();
}

template <class T>
void silu_backward(const Mat<T>& x, const Mat<T>& dy, Mat<T>& dx) {
    auto sig = T(1) / (T(1) + (-x.array()).exp());
    dx = (dy.array() * (sig * (T(1) + x.array() * (T(1) - sig)))).matrix();
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

template <class T>
struct Linear {
    ParamStore<T>* ps = nullptr;
    long w_idx = -1;
    long b_idx = -1;
    long in_dim = 0;
    long out_dim = 0;

    void init(ParamStore<T>& store, const std::string& name, long in, long out) {
        ps = &store;
        in_dim = in;
        out_dim = out;
        w_idx = store.add(name + ".weight", in, out);
        b_idx = store.add(name + ".bias", 1, out);
    }

    auto weight() { return ps->param(w_idx); }
    auto bias() { return ps->param(b_idx); }

    void init_xavier(Rng& rng) {
        auto w = weight();
        const double bound = std::sqrt(6.0 / static_cast<double>(in_dim + out_dim));
        for (long i = 0; i < w.rows(); ++i)
            for (long j = 0; j < w.cols(); ++j) w(i, j) = static_cast<T>(rng.uniform(-bound, bound));
        bias().setZero();
    }

    void init_normal(Rng& rng, double std_dev) {
        auto w = weight();
        for (long i = 0; i < w.rows(); ++i)
            for (long j = 0; j < w.cols(); ++j) w(i, j) = static_cast<T>(std_dev * rng.normal());
        bias().setZero();
    }

    void init_zero() {
        weight().setZero();
        bias().setZero();
    }

    void forward(const Mat<T>& x, Mat<T>& y) const {
        y.resize(x.rows(), out_dim);
        const auto w = ps->param(w_idx);
        const auto b = ps->param(b_idx);
        parallel_rows(x.rows(), [&](long lo, long hi) {
            y.middleRows(lo, hi - lo).noalias() = x.middleRows(lo, hi - lo) * w;
            y.middleRows(lo, hi - lo).rowwise() += b.row(0);
        });
    }

    /// Accumulates parameter gradients; writes dx when requested. The weight
    /// gradient reduces per-worker partials in worker order, so the split is
    /// deterministic for a fixed thread count.
    void backward(const Mat<T>& x, const Mat<T>& dy, Mat<T>* dx) {
        const int nt = par_threads();
        if (nt <= 1 || x.rows() < 128) {
            ps->grad(w_idx).noalias() += x.transpose() * dy;
            ps->grad(b_idx).row(0) += dy.colwise().sum();
        } else {
            scratch_w_.resize(static_cast<std::size_t>(nt));
            scratch_b_.resize(static_cast<std::size_t>(nt));
#pragma omp parallel for schedule(static)
            for (int t = 0; t < nt; ++t) {
                const long lo = x.rows() * t / nt;
                const long hi = x.rows() * (t + 1) / nt;
                auto& pw = scratch_w_[static_cast<std::size_t>(t)];
                auto& pb = scratch_b_[static_cast<std::size_t>(t)];
                pw.resize(in_dim, out_dim);
                pb.resize(out_dim);
                if (hi > lo) {
                    pw.noalias() =
                        x.middleRows(lo, hi - lo).transpose() * dy.middleRows(lo, hi - lo);
                    pb = dy.middleRows(lo, hi - lo).colwise().sum();
                } else {
                    pw.setZero();
                    pb.setZero();
                }
            }
            auto gw = ps->grad(w_idx);
            auto gb = ps->grad(b_idx);
            for (int t = 0; t < nt; ++t) {
                gw += scratch_w_[static_cast<std::size_t>(t)];
                gb.row(0) += scratch_b_[static_cast<std::size_t>(t)];
            }
        }
        if (dx) {
            dx->resize(dy.rows(), in_dim);
            const auto w = ps->param(w_idx);
            parallel_rows(dy.rows(), [&](long lo, long hi) {
                dx->middleRows(lo, hi - lo).noalias() =
                    dy.middleRows(lo, hi - lo) * w.transpose();
            });
        }
    }

    std::vector<Mat<T>> scratch_w_;
    std::vector<RowVec<T>> scratch_b_;
};

// ---------------------------------------------------------------------------
// LayerNorm (no learned affine; scale/shift come from adaLN modulation)
// ---------------------------------------------------------------------------

template <class T>
struct LayerNormCache {
    Mat<T> xhat;       // normalized output
    Vec<T> inv_std;    // per row
};

template <class T>
void layernorm_forward(const Mat<T>& x, T eps, LayerNormCache<T>& cache) {
    const auto d = static_cast<T>(x.cols());
    cache.xhat.resize(x.rows(), x.cols());
    cache.inv_std.resize(x.rows());
    parallel_rows(x.rows(), [&](long lo, long hi) {
        for (long i = lo; i < hi; ++i) {
            const T mean = x.row(i).mean();
            auto centered = x.row(i).array() - mean;
            const T var = centered.square().sum() / d;
            const T inv = T(1) / std::sqrt(var + eps);
            cache.inv_std(i) = inv;
            cache.xhat.row(i) = (centered * inv).matrix();
        }
    });
}

template <class T>
void layernorm_backward(const LayerNormCache<T>& cache, const Mat<T>& dy, Mat<T>& dx) {
    const auto d = static_cast<T>(dy.cols());
    dx.resize(dy.rows(), dy.cols());
    parallel_rows(dy.rows(), [&](long lo, long hi) {
        for (long i = lo; i < hi; ++i) {
            const T mean_dy = dy.row(i).mean();
            const T mean_dy_xhat = (dy.row(i).array() * cache.xhat.row(i).array()).sum() / d;
            dx.row(i) = (cache.inv_std(i) *
                         (dy.row(i).array() - mean_dy - cache.xhat.row(i).array() * mean_dy_xhat))
                            .matrix();
        }
    });
}

// ---------------------------------------------------------------------------
// adaLN-Zero transformer block (shared by encoder and decoder)
// ---------------------------------------------------------------------------

/// Records which token count each block consumed; fed to the efficiency
/// module's bookkeeping checks.
struct ForwardTrace {
    struct Rec {
        std::string stage;      // "encoder" | "decoder"
        long block;             // block index within the stage
        long tokens_per_image;  // sequence length the block ran on
    };
    std::vector<Rec> recs;
};

/// Pre-norm attention + MLP with per-image shift/scale/gate modulation
/// computed from the conditioning vector. Modulation projections are
/// zero-initialized so each block is the identity at initialization.
template <class T>
struct TransformerBlock {
    long dim = 0;
    long heads = 0;
    long mlp_hidden = 0;
    long cond_dim = 0;
    Linear<T> qkv, attn_proj, fc1, fc2, modulation;

    void init(ParamStore<T>& store, const std::string& prefix, long d, long h, long hidden, long cd) {
        dim = d;
        heads = h;
        mlp_hidden = hidden;
        cond_dim = cd;
        require(d % h == 0, "block width must be divisible by head count");
        qkv.init(store, prefix + ".qkv", d, 3 * d);
        attn_proj.init(store, prefix + ".attn_proj", d, d);
        fc1.init(store, prefix + ".mlp_fc1", d, hidden);
        fc2.init(store, prefix + ".mlp_fc2", hidden, d);
        modulation.init(store, prefix + ".modulation", cd, 6 * d);
    }

    void default_init(Rng& rng) {
        qkv.init_xavier(rng);
        attn_proj.init_xavier(rng);
        fc1.init_xavier(rng);
        fc2.init_xavier(rng);
        modulation.init_zero();
    }

    struct Cache {
        Mat<T> mod;           // (batch, 6*dim): shift1 scale1 gate1 shift2 scale2 gate2
        LayerNormCache<T> ln1, ln2;
        Mat<T> h1;            // modulated ln1 output = qkv input
        Mat<T> qkv_out;       // (rows, 3*dim)
        std::vector<Mat<T>> probs;  // batch*heads softmax matrices (n, n)
        Mat<T> attn_merged;   // heads re-merged, input to attn_proj
        Mat<T> attn_out;      // branch value before gating
        Mat<T> x_mid;         // after attention residual
        Mat<T> h2;            // modulated ln2 output = fc1 input
        Mat<T> fc1_out;       // pre-activation
        Mat<T> mlp_out;       // branch value before gating
        // scratch reused across calls; large per-call temporaries would
        // otherwise churn through mmap on every step
        Mat<T> act, d_branch, d_act, d_fc1_out, d_h2, d_xhat, d_x_mid, d_attn_merged, d_qkv,
            d_h1, d_x_in, d_mod, d_cond;
    };

    static constexpr T kLnEps = static_cast<T>(1e-6);

    /// x: (batch*n, dim), cond_act: (batch, cond_dim) already SiLU-activated.
    void forward(const Mat<T>& x, const Mat<T>& cond_act, long batch, Cache& c, Mat<T>& out) const {
        const long n = x.rows() / batch;
        const long dh = dim / heads;
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

        modulation.forward(cond_act, c.mod);

        layernorm_forward(x, kLnEps, c.ln1);
        c.h1.resize(x.rows(), dim);
#pragma omp parallel for schedule(static)
        for (long b = 0; b < batch; ++b) {
            auto shift = c.mod.row(b).segment(0, dim).array();
            auto sc = c.mod.row(b).segment(dim, dim).array();
            c.h1.middleRows(b * n, n) =
                ((c.ln1.xhat.middleRows(b * n, n).array().rowwise() * (T(1) + sc)).rowwise() + shift)
                    .matrix();
        }

        qkv.forward(c.h1, c.qkv_out);
        c.attn_merged.resize(x.rows(), dim);
        c.probs.resize(static_cast<std::size_t>(batch * heads));
#pragma omp parallel for schedule(static)
        for (long bh = 0; bh < batch * heads; ++bh) {
            const long b = bh / heads;
            const long h = bh % heads;
            auto q = c.qkv_out.block(b * n, h * dh, n, dh);
            auto k = c.qkv_out.block(b * n, dim + h * dh, n, dh);
            auto v = c.qkv_out.block(b * n, 2 * dim + h * dh, n, dh);
            Mat<T>& p = c.probs[static_cast<std::size_t>(bh)];
            p.noalias() = q * k.transpose();
            p *= scale;
            for (long i = 0; i < n; ++i) {
                const T row_max = p.row(i).maxCoeff();
                p.row(i) = (p.row(i).array() - row_max).exp();
                p.row(i) /= p.row(i).sum();
            }
            c.attn_merged.block(b * n, h * dh, n, dh).noalias() = p * v;
        }
        attn_proj.forward(c.attn_merged, c.attn_out);

        c.x_mid.resize(x.rows(), dim);
#pragma omp parallel for schedule(static)
        for (long b = 0; b < batch; ++b) {
            auto gate = c.mod.row(b).segment(2 * dim, dim).array();
            c.x_mid.middleRows(b * n, n) =
                x.middleRows(b * n, n) +
                (c.attn_out.middleRows(b * n, n).array().rowwise() * gate).matrix();
        }

        layernorm_forward(c.x_mid, kLnEps, c.ln2);
        c.h2.resize(x.rows(), dim);
#pragma omp parallel for schedule(static)
        for (long b = 0; b < batch; ++b) {
            auto shift = c.mod.row(b).segment(3 * dim, dim).array();
            auto sc = c.mod.row(b).segment(4 * dim, dim).array();
            c.h2.middleRows(b * n, n) =
                ((c.ln2.xhat.middleRows(b * n, n).array().rowwise() * (T(1) + sc)).rowwise() + shift)
                    .matrix();
        }

        fc1.forward(c.h2, c.fc1_out);
        gelu_forward(c.fc1_out, c.act);
        fc2.forward(c.act, c.mlp_out);

        out.resize(x.rows(), dim);
#pragma omp parallel for schedule(static)
        for (long b = 0; b < batch; ++b) {
            auto gate = c.mod.row(b).segment(5 * dim, dim).array();
            out.middleRows(b * n, n) =
                c.x_mid.middleRows(b * n, n) +
                (c.mlp_out.middleRows(b * n, n).array().rowwise() * gate).matrix();
        }
    }

    /// d_x holds d(out) on entry and d(x) on exit; d_cond_act accumulates.
    void backward(const Mat<T>& cond_act, long batch, Cache& c, Mat<T>& d_x,
                  Mat<T>& d_cond_act) {
        const long n = d_x.rows() / batch;
        const long dh = dim / heads;
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
        c.d_mod.setZero(batch, 6 * dim);

        // MLP gate: out = x_mid + gate2 .* mlp_out
        c.d_branch.resize(d_x.rows(), dim);
#pragma omp parallel for schedule(static)
        for (long b = 0; b < batch; ++b) {
            auto gate = c.mod.row(b).segment(5 * dim, dim).array();
            auto dy = d_x.middleRows(b * n, n);
            c.d_mod.row(b).segment(5 * dim, dim) +=
                (dy.array() * c.mlp_out.middleRows(b * n, n).array()).colwise().sum().matrix();
            c.d_branch.middleRows(b * n, n) = (dy.array().rowwise() * gate).matrix();
        }

        // c.act still holds gelu(fc1_out) from the forward pass
        fc2.backward(c.act, c.d_branch, &c.d_act);
        gelu_backward(c.fc1_out, c.d_act, c.d_fc1_out);
        fc1.backward(c.h2, c.d_fc1_out, &c.d_h2);

        // Modulated LN2: h2 = xhat2 .* (1+scale2) + shift2
        c.d_xhat.resize(d_x.rows(), dim);
#pragma omp parallel for schedule(static)
        for (long b = 0; b < batch; ++b) {
            auto sc = c.mod.row(b).segment(4 * dim, dim).array();
            auto dh2 = c.d_h2.middleRows(b * n, n);
            c.d_mod.row(b).segment(3 * dim, dim) += dh2.colwise().sum();
            c.d_mod.row(b).segment(4 * dim, dim) +=
                (dh2.array() * c.ln2.xhat.middleRows(b * n, n).array()).colwise().sum().matrix();
            c.d_xhat.middleRows(b * n, n) = (dh2.array().rowwise() * (T(1) + sc)).matrix();
        }
        layernorm_backward(c.ln2, c.d_xhat, c.d_x_mid);
        c.d_x_mid += d_x;  // residual

        // Attention gate: x_mid = x + gate1 .* attn_out
#pragma omp parallel for schedule(static)
        for (long b = 0; b < batch; ++b) {
            auto gate = c.mod.row(b).segment(2 * dim, dim).array();
            auto dy = c.d_x_mid.middleRows(b * n, n);
            c.d_mod.row(b).segment(2 * dim, dim) +=
                (dy.array() * c.attn_out.middleRows(b * n, n).array()).colwise().sum().matrix();
            c.d_branch.middleRows(b * n, n) = (dy.array().rowwise() * gate).matrix();
        }

        attn_proj.backward(c.attn_merged, c.d_branch, &c.d_attn_merged);

        c.d_qkv.resize(d_x.rows(), 3 * dim);
#pragma omp parallel for schedule(static)
        for (long bh = 0; bh < batch * heads; ++bh) {
            const long b = bh / heads;
            const long h = bh % heads;
            auto q = c.qkv_out.block(b * n, h * dh, n, dh);
            auto k = c.qkv_out.block(b * n, dim + h * dh, n, dh);
            auto v = c.qkv_out.block(b * n, 2 * dim + h * dh, n, dh);
            const Mat<T>& p = c.probs[static_cast<std::size_t>(bh)];
            auto d_o = c.d_attn_merged.block(b * n, h * dh, n, dh);

            Mat<T> d_p(n, n), d_s(n, n);
            d_p.noalias() = d_o * v.transpose();
            c.d_qkv.block(b * n, 2 * dim + h * dh, n, dh).noalias() = p.transpose() * d_o;
            for (long i = 0; i < n; ++i) {
                const T dot = (d_p.row(i).array() * p.row(i).array()).sum();
                d_s.row(i) = (p.row(i).array() * (d_p.row(i).array() - dot)).matrix();
            }
            d_s *= scale;
            c.d_qkv.block(b * n, h * dh, n, dh).noalias() = d_s * k;
            c.d_qkv.block(b * n, dim + h * dh, n, dh).noalias() = d_s.transpose() * q;
        }

        qkv.backward(c.h1, c.d_qkv, &c.d_h1);

        c.d_xhat.resize(d_x.rows(), dim);
#pragma omp parallel for schedule(static)
        for (long b = 0; b < batch; ++b) {
            auto sc = c.mod.row(b).segment(dim, dim).array();
            auto dh1 = c.d_h1.middleRows(b * n, n);
            c.d_mod.row(b).segment(0, dim) += dh1.colwise().sum();
            c.d_mod.row(b).segment(dim, dim) +=
                (dh1.array() * c.ln1.xhat.middleRows(b * n, n).array()).colwise().sum().matrix();
            c.d_xhat.middleRows(b * n, n) = (dh1.array().rowwise() * (T(1) + sc)).matrix();
        }
        layernorm_backward(c.ln1, c.d_xhat, c.d_x_in);

        modulation.backward(cond_act, c.d_mod, &c.d_cond);
        d_cond_act += c.d_cond;

        d_x = c.d_x_in + c.d_x_mid;
    }
};

}  // namespace maskdit
