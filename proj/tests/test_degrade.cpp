#include <gtest/gtest.h>

#include <cmath>

#include "iqvq/degrade.hpp"
#include "iqvq/quality.hpp"
#include "iqvq/rng.hpp"
#include "support/test_helpers.hpp"

using namespace iqvq;
using namespace iqvq::testing;

TEST(GaussianBlur, SigmaZeroIsIdentity) {
    Rng rng(50);
    Tensor img = random_tensor({8, 8, 1}, rng, 0.0, 1.0, false);
    EXPECT_TRUE(bit_identical(gaussian_blur(img, 0.0), img));
}

TEST(GaussianBlur, ConstantImageUnchanged) {
    Tensor img(Shape{12, 12, 1}, 0.37);
    Tensor out = gaussian_blur(img, 2.5);
    EXPECT_LE(max_abs_diff(out, img), 1e-12);
}

TEST(GaussianBlur, ImpulseGivesSampledGaussian) {
    Tensor img(Shape{16, 16, 1});
    img.at(8, 8, 0) = 1.0;
    Tensor out = gaussian_blur(img, 1.0);
    // Oracle: exp(-d^2/2) / Z over the 7x7 support, Z the support sum.
    double z = 0.0;
    for (int dy = -3; dy <= 3; ++dy)
        for (int dx = -3; dx <= 3; ++dx) z += std::exp(-(dy * dy + dx * dx) / 2.0);
    for (int dy = -3; dy <= 3; ++dy)
        for (int dx = -3; dx <= 3; ++dx)
            EXPECT_NEAR(out.at(8 + dy, 8 + dx, 0), std::exp(-(dy * dy + dx * dx) / 2.0) / z, 1e-12);
    EXPECT_NEAR(out.at(8, 4, 0), 0.0, 1e-12);  // outside the radius-3 support
}

TEST(Resample, IdentityAtFactorOne) {
    Rng rng(51);
    Tensor img = random_tensor({8, 8, 2}, rng, 0.0, 1.0, false);
    EXPECT_TRUE(bit_identical(resample_down(img, 1), img));
    EXPECT_TRUE(bit_identical(resample_up(img, 1), img));
}

TEST(Resample, ConstantPreserved) {
    Tensor img(Shape{8, 8, 1}, 0.61);
    EXPECT_LE(max_abs_diff(resample_up(resample_down(img, 4), 4), img), 1e-12);
}

TEST(Resample, TwoByTwoBlockAverage) {
    Tensor img(Shape{2, 2, 1}, std::vector<double>{0.0, 1.0, 1.0, 0.0});
    Tensor down = resample_down(img, 2);
    ASSERT_EQ(down.shape, (Shape{1, 1, 1}));
    EXPECT_DOUBLE_EQ(down.at(0, 0, 0), 0.5);
    Tensor up = resample_up(down, 2);
    ASSERT_EQ(up.shape, (Shape{2, 2, 1}));
    for (std::int64_t i = 0; i < up.size(); ++i) EXPECT_DOUBLE_EQ(up[i], 0.5);
}

TEST(Resample, RejectsNonDivisibleExtents) {
    Tensor img(Shape{6, 6, 1});
    EXPECT_THROW(resample_down(img, 4), std::invalid_argument);
}

TEST(AddNoise, ZeroDeltaIdentityAndDeterminism) {
    Rng rng(52);
    Tensor img = random_tensor({16, 16, 1}, rng, 0.0, 1.0, false);
    EXPECT_TRUE(bit_identical(add_noise(img, 0.0, 9), img));
    EXPECT_TRUE(bit_identical(add_noise(img, 12.0, 9), add_noise(img, 12.0, 9)));
    EXPECT_FALSE(bit_identical(add_noise(img, 12.0, 9), add_noise(img, 12.0, 10)));
}

TEST(AddNoise, EmpiricalStddevMatchesDelta) {
    Tensor img(Shape{64, 64, 1}, 0.5);
    Tensor out = add_noise(img, 20.0, 7);
    double mean = 0.0;
    for (std::int64_t i = 0; i < out.size(); ++i) mean += out[i] - 0.5;
    mean /= static_cast<double>(out.size());
    double var = 0.0;
    for (std::int64_t i = 0; i < out.size(); ++i) {
        const double d = out[i] - 0.5 - mean;
        var += d * d;
    }
    var /= static_cast<double>(out.size() - 1);
    const double target = 20.0 / 255.0;
    EXPECT_NEAR(std::sqrt(var), target, 0.15 * target);
}

TEST(Jpeg, QualityFiftyKeepsStandardTable) {
    const auto t = detail::scaled_quant_table(50);
    for (int i = 0; i < 64; ++i) EXPECT_EQ(t[static_cast<std::size_t>(i)], detail::kLuminanceTable[static_cast<std::size_t>(i)]);
}

TEST(Jpeg, ZeroImageRoundTripsToZero) {
    // At q=50 the DC step divides the shifted DC exactly, so black stays black.
    Tensor img(Shape{8, 8, 1}, 0.0);
    Tensor out = jpeg_roundtrip(img, 50);
    EXPECT_LE(max_abs_diff(out, img), 1e-12);
}

TEST(Jpeg, ConstantHalfAtHighQualityIsNearlyExact) {
    Tensor img(Shape{16, 16, 1}, 0.5);
    Tensor out = jpeg_roundtrip(img, 90);
    EXPECT_LE(max_abs_diff(out, img), 0.01);
}

TEST(Jpeg, RejectsBadExtentsAndQuality) {
    EXPECT_THROW(jpeg_roundtrip(Tensor(Shape{12, 12, 1}), 50), std::invalid_argument);
    EXPECT_THROW(jpeg_roundtrip(Tensor(Shape{8, 8, 1}), 0), std::invalid_argument);
}

TEST(Degrade, DeterministicAndShapePreserving) {
    Rng rng(53);
    Tensor img = random_tensor({32, 32, 1}, rng, 0.0, 1.0, false);
    DegradationParams p{2.0, 2, 10.0, 60};
    Tensor a = degrade(img, p, 123);
    Tensor b = degrade(img, p, 123);
    EXPECT_EQ(a.shape, img.shape);
    EXPECT_TRUE(bit_identical(a, b));
}

TEST(Degrade, MildestParamsStillBlur) {
    Rng rng(54);
    Tensor img = random_tensor({32, 32, 1}, rng, 0.0, 1.0, false);
    DegradationParams p{1.0, 1, 0.0, 90};
    Tensor out = degrade(img, p, 1);
    EXPECT_EQ(out.shape, img.shape);
    EXPECT_LT(proxy_scores(out)[0], proxy_scores(img)[0]);  // sigma=1 already softens
}

TEST(Degrade, SeverityMonotoneInSigma) {
    Rng rng(55);
    Tensor img = random_tensor({32, 32, 1}, rng, 0.0, 1.0, false);
    img = gaussian_blur(img, 0.7);  // give it natural structure first
    double prev = std::numeric_limits<double>::infinity();
    for (double sigma : {1.0, 2.0, 3.0, 4.0}) {
        DegradationParams p{sigma, 2, 5.0, 70};
        const double sharp = proxy_scores(degrade(img, p, 99))[0];
        EXPECT_LE(sharp, prev + 1e-12) << "sigma " << sigma;
        prev = sharp;
    }
}

TEST(Degrade, SampledParamsStayInRange) {
    Rng rng(56);
    for (int i = 0; i < 200; ++i) {
        DegradationParams p = sample_params(rng, 32);
        EXPECT_GE(p.sigma, 1.0);
        EXPECT_LE(p.sigma, 4.0);
        EXPECT_TRUE(p.r == 1 || p.r == 2 || p.r == 4);
        EXPECT_GE(p.delta, 0.0);
        EXPECT_LE(p.delta, 20.0);
        EXPECT_GE(p.q, 30);
        EXPECT_LE(p.q, 90);
        EXPECT_EQ(32 % (8 * p.r), 0);
    }
}
