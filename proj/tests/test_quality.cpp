#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "iqvq/quality.hpp"
#include "iqvq/rng.hpp"
#include "support/test_helpers.hpp"

using namespace iqvq;
using namespace iqvq::testing;

namespace {

Tensor checkerboard(int n) {
    Tensor img(Shape{n, n, 1});
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) img.at(y, x, 0) = ((x + y) % 2 == 0) ? 1.0 : 0.0;
    return img;
}

Tensor mirror_horizontal(const Tensor& img) {
    Tensor out(img.shape);
    const int h = img.shape[0], w = img.shape[1], c = img.shape[2];
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch) out.at(y, x, ch) = img.at(y, w - 1 - x, ch);
    return out;
}

// Direct evaluation of the proxy formulas with explicit pixel loops,
// independent of the tape kernels.
double oracle_p1(const Tensor& img) {
    const int h = img.shape[0], w = img.shape[1];
    double acc = 0.0;
    int count = 0;
    for (int y = 1; y < h - 1; ++y)
        for (int x = 1; x < w - 1; ++x) {
            double gx = 0.0, gy = 0.0;
            const double wx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    gx += wx[dy + 1][dx + 1] * img.at(y + dy, x + dx, 0);
                    gy += wx[dx + 1][dy + 1] * img.at(y + dy, x + dx, 0);
                }
            acc += std::sqrt(gx * gx + gy * gy + kMagnitudeDelta) - std::sqrt(kMagnitudeDelta);
            ++count;
        }
    return acc / count;
}

double oracle_p3(const Tensor& img) {
    const int h = img.shape[0], w = img.shape[1];
    double acc = 0.0;
    int count = 0;
    for (int y = 1; y < h - 1; ++y)
        for (int x = 1; x < w - 1; ++x) {
            const double lap = img.at(y - 1, x, 0) + img.at(y + 1, x, 0) + img.at(y, x - 1, 0) +
                               img.at(y, x + 1, 0) - 4.0 * img.at(y, x, 0);
            acc += std::sqrt(lap * lap + kMagnitudeDelta) - std::sqrt(kMagnitudeDelta);
            ++count;
        }
    return acc / count;
}

}  // namespace

TEST(Proxies, ConstantImageScoresZero) {
    Tensor img(Shape{8, 8, 1}, 0.42);
    auto s = proxy_scores(img);
    EXPECT_EQ(s[0], 0.0);
    EXPECT_NEAR(s[1], 0.0, 1e-12);  // mean subtraction leaves ~1e-16 rounding residue
    EXPECT_EQ(s[2], 0.0);
}

TEST(Proxies, ReflectionInvariant) {
    Rng rng(41);
    Tensor img = random_tensor({10, 12, 1}, rng, 0.0, 1.0, false);
    auto a = proxy_scores(img);
    auto b = proxy_scores(mirror_horizontal(img));
    for (int i = 0; i < kNumProxies; ++i) EXPECT_NEAR(a[i], b[i], 1e-12) << "proxy " << i;
    EXPECT_NEAR(judge_score(img), judge_score(mirror_horizontal(img)), 1e-12);
}

TEST(Proxies, ChannelPermutationInvariant) {
    Rng rng(42);
    Tensor img = random_tensor({9, 9, 2}, rng, 0.0, 1.0, false);
    Tensor swapped(img.shape);
    for (int y = 0; y < 9; ++y)
        for (int x = 0; x < 9; ++x) {
            swapped.at(y, x, 0) = img.at(y, x, 1);
            swapped.at(y, x, 1) = img.at(y, x, 0);
        }
    auto a = proxy_scores(img);
    auto b = proxy_scores(swapped);
    for (int i = 0; i < kNumProxies; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Proxies, CheckerboardMatchesOracles) {
    Tensor img = checkerboard(8);
    auto s = proxy_scores(img);
    EXPECT_DOUBLE_EQ(s[1], 0.5);  // exact: half zeros, half ones
    EXPECT_NEAR(s[0], oracle_p1(img), 1e-12);
    EXPECT_NEAR(s[2], oracle_p3(img), 1e-12);
}

TEST(Proxies, RandomImageMatchesOracles) {
    Rng rng(43);
    Tensor img = random_tensor({11, 9, 1}, rng, 0.0, 1.0, false);
    auto s = proxy_scores(img);
    EXPECT_NEAR(s[0], oracle_p1(img), 1e-12);
    EXPECT_NEAR(s[2], oracle_p3(img), 1e-12);
}

TEST(Proxies, GradientCheck) {
    Rng rng(44);
    std::vector<Tensor> params = {random_tensor({8, 8, 1}, rng, 0.05, 0.95)};
    const double err = builder_check(
        [](Tape& t, const std::vector<Var>& v) {
            ProxyVars p = proxy_graph(t, v[0]);
            return t.add(t.add(p.p1, p.p2), p.p3);
        },
        params, 1e-5);
    EXPECT_LE(err, 1e-4);
}

TEST(Proxies, NormalizedEnsembleGradientCheck) {
    Rng rng(45);
    Tensor img = random_tensor({8, 8, 1}, rng, 0.05, 0.95);
    // Wide normalizer so the clamp stays inactive and the graph is smooth.
    CorpusNormalizer n = CorpusNormalizer::from_entries(
        {{{-1.0, 4.0}, {-1.0, 4.0}, {-1.0, 4.0}, {-1.0, 4.0}}});
    const double err = builder_check(
        [&n](Tape& t, const std::vector<Var>& v) { return ensemble_graph(t, v[0], n); },
        {img}, 1e-5);
    EXPECT_LE(err, 1e-4);
}

TEST(Normalizer, AppendixFormula) {
    CorpusNormalizer n = CorpusNormalizer::fit({{{2, 2, 2, 2}}, {{4, 4, 4, 4}}, {{6, 6, 6, 6}}});
    EXPECT_NEAR(n.normalize(0, 4.0), 2.0 / 4.00001, 1e-12);
    EXPECT_EQ(n.normalize(0, 2.0), 0.0);        // s_min maps to exactly 0
    EXPECT_LT(n.normalize(0, 6.0), 1.0);        // s_max stays below 1
    EXPECT_LT(n.normalize(0, 100.0), 1.0);      // out-of-corpus clamps into [0,1)
    EXPECT_GE(n.normalize(0, -100.0), 0.0);
}

TEST(Normalizer, DegenerateCorpusMapsToZero) {
    CorpusNormalizer n = CorpusNormalizer::fit({{{3, 3, 3, 3}}, {{3, 3, 3, 3}}});
    EXPECT_EQ(n.normalize(0, 3.0), 0.0);
}

TEST(Normalizer, OrderPreservingOverCorpus) {
    Rng rng(46);
    std::vector<std::array<double, 4>> rows;
    for (int i = 0; i < 50; ++i) {
        const double v = rng.uniform(0.0, 10.0);
        rows.push_back({v, v, v, v});
    }
    CorpusNormalizer n = CorpusNormalizer::fit(rows);
    std::vector<double> raws;
    for (const auto& r : rows) raws.push_back(r[0]);
    std::sort(raws.begin(), raws.end());
    for (std::size_t i = 1; i < raws.size(); ++i)
        EXPECT_LE(n.normalize(0, raws[i - 1]), n.normalize(0, raws[i]));
}

TEST(Ensemble, MeanAndEdgeCases) {
    EXPECT_DOUBLE_EQ(ensemble({0.2, 0.4, 0.6}), 0.4);
    EXPECT_DOUBLE_EQ(ensemble({0.31, 0.31, 0.31}), 0.31);
    EXPECT_DOUBLE_EQ(ensemble({0.73}), 0.73);
    EXPECT_THROW(ensemble({}), std::invalid_argument);
}

TEST(BinScore, BoundariesAndMonotonicity) {
    EXPECT_EQ(bin_score(0.93), 9);
    EXPECT_EQ(bin_score(0.0), 0);
    EXPECT_EQ(bin_score(1.0), 9);  // floor gives 10, clamped
    EXPECT_THROW(bin_score(-0.1), std::invalid_argument);
    int prev = 0;
    for (double s = 0.0; s < 1.0; s += 0.001) {
        const int b = bin_score(s);
        EXPECT_GE(b, prev);
        prev = b;
    }
    // Surjective onto {0..9} over [0,1).
    for (int b = 0; b < 10; ++b) EXPECT_EQ(bin_score(0.1 * b + 0.05), b);
}

TEST(Judge, RespondsToMidFrequencyStructure) {
    // Smooth ramp has little band-pass energy; a period-4 grating has a lot;
    // a pixel-rate checkerboard is nearly invisible to the DoG.
    Tensor ramp(Shape{16, 16, 1});
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) ramp.at(y, x, 0) = x / 15.0;
    Tensor grating(Shape{16, 16, 1});
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) grating.at(y, x, 0) = (x / 2) % 2 == 0 ? 1.0 : 0.0;
    const double j_ramp = judge_score(ramp);
    const double j_grating = judge_score(grating);
    const double j_board = judge_score(checkerboard(16));
    EXPECT_GT(j_grating, 5.0 * j_ramp);
    EXPECT_GT(j_grating, 5.0 * j_board);
}
