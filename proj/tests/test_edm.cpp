// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "maskdit/edm.hpp"

using namespace maskdit;

namespace {

ImageBatch<double> constant_batch(long b, long c, long h, long w, double value) {
    ImageBatch<double> out(b, c, h, w);
    out.data.setConstant(value);
    return out;
}

}  // namespace

TEST(NoiseLevel, RejectsNonPositive) {
    EXPECT_THROW(NoiseLevel(0.0), ValueError);
    EXPECT_THROW(NoiseLevel(-1.0), ValueError);
    EXPECT_THROW(NoiseLevel(std::nan("")), ValueError);
    EXPECT_NO_THROW(NoiseLevel(1e-8));
}

TEST(AddNoise, ZeroNoiseIdentity) {
    Rng rng(3);
    auto x0 = ImageBatch<double>::gaussian(2, 1, 4, 4, rng);
    auto eps = constant_batch(2, 1, 4, 4, 0.0);
    auto noisy = add_noise(x0, NoiseLevel(0.7), eps);
    EXPECT_EQ((noisy.data - x0.data).cwiseAbs().maxCoeff(), 0.0);
}

TEST(AddNoise, PureNoiseAtUnitSigma) {
    Rng rng(4);
    auto x0 = constant_batch(1, 1, 4, 4, 0.0);
    auto eps = ImageBatch<double>::gaussian(1, 1, 4, 4, rng);
    auto noisy = add_noise(x0, NoiseLevel(1.0), eps);
    EXPECT_EQ((noisy.data - eps.data).cwiseAbs().maxCoeff(), 0.0);
}

TEST(AddNoise, ShapeMismatchError) {
    Rng rng(5);
    auto x0 = ImageBatch<double>::gaussian(1, 1, 4, 4, rng);
    auto eps = ImageBatch<double>::gaussian(1, 1, 2, 8, rng);
    EXPECT_THROW(add_noise(x0, NoiseLevel(1.0), eps), ShapeError);
}

// Monte-Carlo oracle: E[||x - x0||^2 / dim] == sigma^2.
TEST(AddNoise, VarianceMatchesSigmaSquared) {
    Rng rng(6);
    const double sigma = 0.8;
    const long dim = 16;
    auto x0 = ImageBatch<double>::gaussian(1, 1, 4, 4, rng);
    double acc = 0.0;
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) {
        auto eps = ImageBatch<double>::gaussian(1, 1, 4, 4, rng);
        auto noisy = add_noise(x0, NoiseLevel(sigma), eps);
        acc += (noisy.data - x0.data).squaredNorm() / static_cast<double>(dim);
    }
    const double mean = acc / draws;
    EXPECT_NEAR(mean, sigma * sigma, 0.02 * sigma * sigma);
}

TEST(AddNoise, AffineInEps) {
    Rng rng(7);
    const double sigma = 1.3;
    auto x0 = ImageBatch<double>::gaussian(2, 1, 4, 4, rng);
    auto e1 = ImageBatch<double>::gaussian(2, 1, 4, 4, rng);
    auto e2 = ImageBatch<double>::gaussian(2, 1, 4, 4, rng);
    ImageBatch<double> e12 = e1;
    e12.data += e2.data;
    auto lhs = add_noise(x0, NoiseLevel(sigma), e12);
    auto rhs = add_noise(x0, NoiseLevel(sigma), e1);
    rhs.data += sigma * e2.data;
    EXPECT_LT((lhs.data - rhs.data).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Precondition, CoefficientsAtSigmaData) {
    EdmConstants consts;
    const EdmCoeffs c = edm_coeffs(NoiseLevel(0.5), consts);
    EXPECT_DOUBLE_EQ(c.c_skip, 0.5);
    EXPECT_NEAR(c.c_in, 1.0 / std::sqrt(0.5), 1e-15);
    EXPECT_NEAR(c.c_out, 0.5 * 0.5 / std::sqrt(0.5), 1e-15);
    EXPECT_NEAR(c.c_noise, 0.25 * std::log(0.5), 1e-15);
}

TEST(Precondition, SmallSigmaLimit) {
    EdmConstants consts;
    const EdmCoeffs c = edm_coeffs(NoiseLevel(1e-9), consts);
    EXPECT_NEAR(c.c_skip, 1.0, 1e-12);
    EXPECT_NEAR(c.c_out, 0.0, 1e-8);
}

TEST(Precondition, ZeroNetworkGivesSkipTerm) {
    Rng rng(8);
    auto x = ImageBatch<double>::gaussian(2, 1, 4, 4, rng);
    const EdmConstants consts;
    const NoiseLevel sigma(1.7);
    auto denoised = precondition(
        [](const ImageBatch<double>& scaled, double) {
            return ImageBatch<double>::zeros_like(scaled);
        },
        x, sigma, consts);
    const EdmCoeffs c = edm_coeffs(sigma, consts);
    EXPECT_LT((denoised.data - c.c_skip * x.data).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Precondition, PassesScaledInputAndCnoise) {
    Rng rng(9);
    auto x = ImageBatch<double>::gaussian(1, 1, 4, 4, rng);
    const EdmConstants consts;
    const NoiseLevel sigma(0.9);
    const EdmCoeffs c = edm_coeffs(sigma, consts);
    double seen_cnoise = 0.0;
    ImageBatch<double> seen_input;
    precondition(
        [&](const ImageBatch<double>& scaled, double c_noise) {
            seen_cnoise = c_noise;
            seen_input = scaled;
            return ImageBatch<double>::zeros_like(scaled);
        },
        x, sigma, consts);
    EXPECT_DOUBLE_EQ(seen_cnoise, c.c_noise);
    EXPECT_LT((seen_input.data - c.c_in * x.data).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Precondition, SkipCoefficientMonotoneDecreasing) {
    EdmConstants consts;
    double prev = 2.0;
    for (double sigma : {0.01, 0.05, 0.2, 0.5, 1.0, 3.0, 10.0, 80.0}) {
        const EdmCoeffs c = edm_coeffs(NoiseLevel(sigma), consts);
        EXPECT_GT(c.c_skip, 0.0);
        EXPECT_LE(c.c_skip, 1.0);
        EXPECT_LT(c.c_skip, prev);
        prev = c.c_skip;
    }
}

TEST(Precondition, OutCoefficientIncreasesThenSaturates) {
    EdmConstants consts;
    double prev = 0.0;
    for (double sigma : {0.01, 0.05, 0.2, 0.5, 1.0, 3.0, 10.0, 80.0, 1e4}) {
        const EdmCoeffs c = edm_coeffs(NoiseLevel(sigma), consts);
        EXPECT_GT(c.c_out, prev);
        EXPECT_LE(c.c_out, consts.sigma_data + 1e-12);  // saturation bound
        prev = c.c_out;
    }
    EXPECT_NEAR(prev, consts.sigma_data, 1e-6);
}

TEST(Score, PerfectDenoiserGivesZero) {
    Rng rng(10);
    auto x = ImageBatch<double>::gaussian(1, 1, 4, 4, rng);
    auto score = score_from_denoiser(x, x, NoiseLevel(0.5));
    EXPECT_EQ(score.data.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Score, RecoversMinusNoiseOverSigmaSquared) {
    Rng rng(11);
    const double sigma = 0.6;
    auto x0 = ImageBatch<double>::gaussian(1, 1, 4, 4, rng);
    auto eps = ImageBatch<double>::gaussian(1, 1, 4, 4, rng);
    auto x = add_noise(x0, NoiseLevel(sigma), eps);
    auto score = score_from_denoiser(x0, x, NoiseLevel(sigma));
    MatD expected = -(sigma * eps.data) / (sigma * sigma);
    EXPECT_LT((score.data - expected).cwiseAbs().maxCoeff(), 1e-12);
}

// Dirac data at x*: the perfect denoiser returns x*, and the score must equal
// the analytic gaussian score grad log N(x; x*, sigma^2 I) to machine precision.
TEST(Score, MatchesAnalyticGaussianScoreForDiracData) {
    Rng rng(12);
    auto x_star = ImageBatch<double>::gaussian(1, 1, 4, 4, rng);
    auto x = ImageBatch<double>::gaussian(1, 1, 4, 4, rng);
    for (double sigma : {0.05, 0.5, 3.0}) {
        auto score = score_from_denoiser(x_star, x, NoiseLevel(sigma));
        MatD analytic = (x_star.data - x.data) / (sigma * sigma);
        EXPECT_LT((score.data - analytic).cwiseAbs().maxCoeff(), 1e-14);
    }
}

TEST(TrainingSigma, AlwaysPositive) {
    Rng rng(13);
    EdmConstants consts;
    for (int i = 0; i < 10000; ++i) EXPECT_GT(sample_training_sigma(rng, consts).sigma, 0.0);
}

// Monte-Carlo oracles for the log-normal: median ~= exp(p_mean), and the mean
// of ln(sigma) ~= p_mean.
TEST(TrainingSigma, LogNormalStatistics) {
    Rng rng(14);
    EdmConstants consts;
    const int draws = 100000;
    std::vector<double> sigmas(draws);
    double log_acc = 0.0;
    for (auto& s : sigmas) {
        s = sample_training_sigma(rng, consts).sigma;
        log_acc += std::log(s);
    }
    std::nth_element(sigmas.begin(), sigmas.begin() + draws / 2, sigmas.end());
    const double median = sigmas[draws / 2];
    const double expected_median = std::exp(-1.2);
    EXPECT_NEAR(median, expected_median, 0.02 * expected_median);
    EXPECT_NEAR(log_acc / draws, -1.2, 0.02);
}

TEST(LossWeight, PinnedValues) {
    EdmConstants consts;
    EXPECT_DOUBLE_EQ(loss_weight(NoiseLevel(0.5), consts), 8.0);
    // sigma -> infinity limit: 1 / sigma_data^2 = 4.
    EXPECT_NEAR(loss_weight(NoiseLevel(1e6), consts), 4.0, 1e-6);
}

TEST(LossWeight, InverseOfCoutSquared) {
    EdmConstants consts;
    for (double sigma : {0.01, 0.3, 0.5, 1.0, 7.0, 80.0}) {
        const EdmCoeffs c = edm_coeffs(NoiseLevel(sigma), consts);
        EXPECT_NEAR(loss_weight(NoiseLevel(sigma), consts) * c.c_out * c.c_out, 1.0, 1e-12);
    }
}
