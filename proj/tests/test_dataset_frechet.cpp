// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "maskdit/dataset.hpp"
#include "maskdit/frechet.hpp"

using namespace maskdit;

TEST(Dataset, SameSeedSameBatch) {
    DatasetSpec spec;
    Rng r1(42), r2(42);
    auto [a, la] = make_batch<float>(spec, 8, r1);
    auto [b, lb] = make_batch<float>(spec, 8, r2);
    EXPECT_EQ(la, lb);
    EXPECT_EQ((a.data - b.data).cwiseAbs().maxCoeff(), 0.0f);
}

// Replays the documented draw order (label, jitter y, jitter x) to recover
// the jittered center, then checks the brightest pixel lands within 2 px.
TEST(Dataset, BrightestPixelTracksJitteredCenter) {
    DatasetSpec spec;
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        Rng replay = rng;  // copy of the state before the draw
        auto [img, labels] = make_batch<float>(spec, 1, rng);
        const auto label = static_cast<int>(replay.below(static_cast<std::uint64_t>(spec.num_classes)));
        ASSERT_EQ(label, labels[0]);
        const double cy = spec.centers[static_cast<std::size_t>(label)][0] +
                          replay.uniform(-spec.jitter, spec.jitter);
        const double cx = spec.centers[static_cast<std::size_t>(label)][1] +
                          replay.uniform(-spec.jitter, spec.jitter);
        long best_y = 0, best_x = 0;
        float best = -1e30f;
        for (long y = 0; y < spec.height; ++y)
            for (long x = 0; x < spec.width; ++x)
                if (img.at(0, 0, y, x) > best) {
                    best = img.at(0, 0, y, x);
                    best_y = y;
                    best_x = x;
                }
        const double dist = std::hypot(static_cast<double>(best_y) - cy,
                                       static_cast<double>(best_x) - cx);
        EXPECT_LT(dist, 2.0) << "trial " << trial;
    }
}

// Pinned normalization: per-channel std of a large normalized batch must sit
// near sigma_data = 0.5.
TEST(Dataset, NormalizedStdNearSigmaData) {
    DatasetSpec spec;
    Rng rng(3);
    auto [img, labels] = make_batch<float>(spec, 512, rng);
    const double mean = img.data.cast<double>().mean();
    const double var =
        (img.data.cast<double>().array() - mean).square().sum() /
        static_cast<double>(img.data.size());
    const double stddev = std::sqrt(var);
    EXPECT_GE(stddev, 0.4);
    EXPECT_LE(stddev, 0.6);
    EXPECT_NEAR(mean, 0.0, 0.05);
}

TEST(Dataset, ValidationCatchesMismatchedCenters) {
    DatasetSpec spec;
    spec.num_classes = 3;  // still only two centers
    EXPECT_THROW(spec.validate(), ValueError);
}

TEST(Frechet, IdenticalSetsScoreZero) {
    Rng rng(1);
    MatD set = MatD::Random(64, 8);
    EXPECT_NEAR(pixel_frechet(set, set), 0.0, 1e-8);
}

TEST(Frechet, MeanShiftOnly) {
    Rng rng(2);
    MatD set1(512, 4);
    for (long i = 0; i < set1.rows(); ++i)
        for (long j = 0; j < 4; ++j) set1(i, j) = rng.normal();
    Eigen::RowVector4d v(0.5, -1.0, 2.0, 0.0);
    MatD set2 = set1.rowwise() + v;
    EXPECT_NEAR(pixel_frechet(set1, set2), v.squaredNorm(), 1e-9);
}

// Seeded synthetic gaussians with known diagonal covariances; the estimate
// must land within 5% of the closed-form distance of the generators.
TEST(Frechet, MatchesClosedFormForKnownGaussians) {
    Rng rng(55);
    const long dim = 6, n = 20000;
    Eigen::VectorXd mu1(dim), mu2(dim), s1(dim), s2(dim);
    mu1 << 0, 1, -1, 0.5, 2, -0.3;
    mu2 << 0.4, 0.6, -1.5, 0.5, 1.0, 0.0;
    s1 << 1.0, 0.5, 2.0, 1.5, 0.8, 1.2;   // std devs
    s2 << 0.7, 1.1, 1.0, 0.9, 1.6, 0.4;
    MatD a(n, dim), b(n, dim);
    for (long i = 0; i < n; ++i)
        for (long j = 0; j < dim; ++j) {
            a(i, j) = mu1(j) + s1(j) * rng.normal();
            b(i, j) = mu2(j) + s2(j) * rng.normal();
        }
    double closed = (mu1 - mu2).squaredNorm();
    for (long j = 0; j < dim; ++j) {
        const double v1 = s1(j) * s1(j), v2 = s2(j) * s2(j);
        closed += v1 + v2 - 2.0 * std::sqrt(v1 * v2);
    }
    const double est = pixel_frechet(a, b);
    EXPECT_NEAR(est, closed, 0.05 * closed);
}

TEST(Frechet, DegenerateSetsRejected) {
    MatD one = MatD::Random(1, 4);
    MatD ok = MatD::Random(8, 4);
    EXPECT_THROW(pixel_frechet(one, ok), ValueError);
    MatD wrong_dim = MatD::Random(8, 5);
    EXPECT_THROW(pixel_frechet(ok, wrong_dim), ShapeError);
}
