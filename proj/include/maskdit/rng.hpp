// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <vector>

namespace maskdit {

/// Deterministic xoshiro256** generator with an explicitly serializable state.
/// std::mt19937 + std::normal_distribution would work, but their state dumps
/// are textual and the normal distribution caches a hidden spare value, which
/// makes bit-exact checkpoint/resume awkward. This keeps the whole state in
/// five words.
class Rng {
public:
    Rng() : Rng(0) {}

    explicit Rng(std::uint64_t seed) {
        // splitmix64 seeding, as recommended by the xoshiro authors.
        std::uint64_t x = seed;
        for (auto& word : s_) {
            x += 0x9e3779b97f4a7c15ULL;
            std::uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
            word = z ^ (z >> 31);
        }
        spare_valid_ = false;
        spare_ = 0.0;
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform double in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // Lemire-style rejection to avoid modulo bias.
        std::uint64_t x = next_u64();
        __uint128_t m = static_cast<__uint128_t>(x) * n;
        auto lo = static_cast<std::uint64_t>(m);
        if (lo < n) {
            const std::uint64_t t = (0 - n) % n;
            while (lo < t) {
                x = next_u64();
                m = static_cast<__uint128_t>(x) * n;
                lo = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

    /// Standard normal via Box-Muller; the spare value is part of the state.
    double normal() {
        if (spare_valid_) {
            spare_valid_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        spare_valid_ = true;
        return r * std::cos(theta);
    }

    /// First k elements of a Fisher-Yates pass over 0..n-1: a uniform
    /// k-subset in uniform order, without shuffling the whole range.
    std::vector<std::int64_t> choose(std::int64_t n, std::int64_t k, std::vector<std::int64_t>& scratch) {
        scratch.resize(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) scratch[static_cast<std::size_t>(i)] = i;
        std::vector<std::int64_t> out(static_cast<std::size_t>(k));
        for (std::int64_t i = 0; i < k; ++i) {
            const auto j = i + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(n - i)));
            std::swap(scratch[static_cast<std::size_t>(i)], scratch[static_cast<std::size_t>(j)]);
            out[static_cast<std::size_t>(i)] = scratch[static_cast<std::size_t>(i)];
        }
        return out;
    }

    /// 5*8-byte state dump. Word 4 packs the Box-Muller spare.
    std::array<std::uint64_t, 6> save() const {
        std::array<std::uint64_t, 6> out{};
        for (int i = 0; i < 4; ++i) out[static_cast<std::size_t>(i)] = s_[static_cast<std::size_t>(i)];
        std::uint64_t bits = 0;
        std::memcpy(&bits, &spare_, sizeof(bits));
        out[4] = bits;
        out[5] = spare_valid_ ? 1 : 0;
        return out;
    }

    void restore(const std::array<std::uint64_t, 6>& state) {
        for (int i = 0; i < 4; ++i) s_[static_cast<std::size_t>(i)] = state[static_cast<std::size_t>(i)];
        std::memcpy(&spare_, &state[4], sizeof(spare_));
        spare_valid_ = state[5] != 0;
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::array<std::uint64_t, 4> s_{};
    double spare_ = 0.0;
    bool spare_valid_ = false;
};

}  // namespace maskdit
