#include <gtest/gtest.h>

#include <cmath>

#include "iqvq/gradcheck.hpp"
#include "iqvq/rng.hpp"
#include "iqvq/tape.hpp"
#include "iqvq/tensor.hpp"
#include "support/test_helpers.hpp"

using namespace iqvq;
using namespace iqvq::testing;

namespace {

constexpr double kGradTol = 1e-4;
constexpr double kEps = 1e-5;

}  // namespace

TEST(Tensor, ShapeDataInvariant) {
    Tensor t(Shape{2, 3}, 0.5);
    EXPECT_EQ(t.size(), 6);
    EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<double>(5, 0.0)), std::invalid_argument);
    EXPECT_THROW(Tensor(Shape{0, 3}), std::invalid_argument);
    EXPECT_TRUE(t.all_finite());
    t.at(1, 2) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_FALSE(t.all_finite());
}

TEST(Conv2d, IdentityKernel) {
    Rng rng(3);
    Tensor x = random_tensor({5, 4, 3}, rng, 0.0, 1.0);
    Tensor k(Shape{1, 1, 3, 3});
    for (int c = 0; c < 3; ++c) k.at(0, 0, c, c) = 1.0;
    Tape tape;
    Var y = tape.conv2d(tape.leaf(x), tape.leaf(k), 1, 0);
    EXPECT_TRUE(bit_identical(tape.value(y), x));
}

TEST(Conv2d, ZeroKernelAnnihilates) {
    Rng rng(4);
    Tensor x = random_tensor({6, 6, 2}, rng);
    Tensor k(Shape{3, 3, 2, 4});
    Tape tape;
    Var y = tape.conv2d(tape.leaf(x), tape.leaf(k), 1, 1);
    for (std::int64_t i = 0; i < tape.value(y).size(); ++i) EXPECT_EQ(tape.value(y)[i], 0.0);
}

TEST(Conv2d, AveragingKernelOnConstantImage) {
    // 3x3 kernel of 1/9 on a constant 0.5 image with zero padding: interior
    // stays 0.5, corners see 4 taps, edges see 6.
    Tensor x(Shape{5, 5, 1}, 0.5);
    Tensor k(Shape{3, 3, 1, 1}, 1.0 / 9.0);
    Tape tape;
    Var y = tape.conv2d(tape.leaf(x), tape.leaf(k), 1, 1);
    const Tensor& out = tape.value(y);
    EXPECT_EQ(out.shape, (Shape{5, 5, 1}));
    EXPECT_NEAR(out.at(2, 2, 0), 0.5, 1e-15);
    EXPECT_NEAR(out.at(0, 0, 0), 0.5 * 4.0 / 9.0, 1e-15);
    EXPECT_NEAR(out.at(0, 2, 0), 0.5 * 6.0 / 9.0, 1e-15);
    Tensor oracle = conv2d_oracle(x, k, 1, 1);
    EXPECT_LE(max_abs_diff(out, oracle), 1e-15);
}

TEST(Conv2d, MatchesOracleOnRandomInstances) {
    Rng rng(11);
    for (int trial = 0; trial < 8; ++trial) {
        const int stride = 1 + (trial % 2);
        const int pad = trial % 3;
        Tensor x = random_tensor({7, 6, 3}, rng);
        Tensor k = random_tensor({3, 3, 3, 4}, rng);
        Tape tape;
        Var y = tape.conv2d(tape.leaf(x), tape.leaf(k), stride, pad);
        EXPECT_LE(max_abs_diff(tape.value(y), conv2d_oracle(x, k, stride, pad)), 1e-12);
    }
}

TEST(Conv2d, RejectsChannelMismatch) {
    Tape tape;
    Var x = tape.constant(Tensor(Shape{4, 4, 2}));
    Var k = tape.constant(Tensor(Shape{3, 3, 3, 1}));
    EXPECT_THROW(tape.conv2d(x, k, 1, 1), std::invalid_argument);
}

TEST(Conv2d, Linearity) {
    Rng rng(5);
    Tensor x = random_tensor({6, 6, 2}, rng);
    Tensor y = random_tensor({6, 6, 2}, rng);
    Tensor k = random_tensor({3, 3, 2, 3}, rng);
    const double a = 1.7, b = -0.4;
    Tensor mix(x.shape);
    for (std::int64_t i = 0; i < x.size(); ++i) mix[i] = a * x[i] + b * y[i];
    Tape tape;
    Var kv = tape.leaf(k);
    Var cx = tape.conv2d(tape.leaf(x), kv, 1, 1);
    Var cy = tape.conv2d(tape.leaf(y), kv, 1, 1);
    Var cmix = tape.conv2d(tape.leaf(mix), kv, 1, 1);
    Var lin = tape.add(tape.mul_scalar(cx, a), tape.mul_scalar(cy, b));
    EXPECT_LE(max_abs_diff(tape.value(cmix), tape.value(lin)), 1e-12);
}

TEST(SoftmaxCE, UniformLogitsGiveLogK) {
    Tape tape;
    Var logits = tape.leaf(Tensor(Shape{2, 4}, 0.7));
    Var loss = tape.softmax_cross_entropy(logits, {1, 3});
    EXPECT_NEAR(tape.scalar(loss), std::log(4.0), 1e-12);
}

TEST(SoftmaxCE, SaturatedCorrectLogitsGiveZero) {
    Tensor logits(Shape{1, 5});
    logits.at(0, 2) = 1000.0;
    Tape tape;
    Var loss = tape.softmax_cross_entropy(tape.leaf(logits), {2});
    EXPECT_NEAR(tape.scalar(loss), 0.0, 1e-9);
}

TEST(SoftmaxCE, HandEvaluatedExample) {
    // -log(e^1 / (e^1 + e^2 + e^3)) = 2.40760596...
    Tensor logits(Shape{1, 3}, std::vector<double>{1.0, 2.0, 3.0});
    Tape tape;
    Var loss = tape.softmax_cross_entropy(tape.leaf(logits), {0});
    EXPECT_NEAR(tape.scalar(loss), 2.4076059644443806, 1e-12);
}

TEST(SoftmaxCE, RejectsOutOfRangeTarget) {
    Tape tape;
    Var logits = tape.constant(Tensor(Shape{1, 3}));
    EXPECT_THROW(tape.softmax_cross_entropy(logits, {3}), std::out_of_range);
}

TEST(Softmax, RowsSumToOne) {
    Rng rng(9);
    Tensor x = random_tensor({5, 7}, rng, -4.0, 4.0);
    Tape tape;
    Var y = tape.softmax_rows(tape.leaf(x));
    for (int i = 0; i < 5; ++i) {
        double s = 0.0;
        for (int j = 0; j < 7; ++j) s += tape.value(y).at(i, j);
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(CheckGradients, QuadraticAndLinearExamples) {
    DiffFn square;
    square.value = [](const std::vector<Tensor>& p) { return p[0][0] * p[0][0]; };
    square.gradient = [](const std::vector<Tensor>& p) {
        return std::vector<Tensor>{Tensor(Shape{1}, std::vector<double>{2.0 * p[0][0]})};
    };
    EXPECT_LE(check_gradients(square, {Tensor(Shape{1}, std::vector<double>{3.0})}, 1e-5), 1e-9);

    DiffFn total;
    total.value = [](const std::vector<Tensor>& p) {
        double s = 0.0;
        for (std::int64_t i = 0; i < p[0].size(); ++i) s += p[0][i];
        return s;
    };
    total.gradient = [](const std::vector<Tensor>& p) {
        return std::vector<Tensor>{Tensor(p[0].shape, 1.0)};
    };
    Rng rng(2);
    EXPECT_LE(check_gradients(total, {random_tensor({3, 2}, rng)}, 1e-5), 1e-10);
    EXPECT_THROW(check_gradients(total, {Tensor(Shape{1})}, 1e-2), std::invalid_argument);
}

TEST(CheckGradients, ReportsNonFiniteParameter) {
    DiffFn bad;
    bad.value = [](const std::vector<Tensor>& p) { return std::log(p[0][0]); };
    bad.gradient = [](const std::vector<Tensor>& p) {
        return std::vector<Tensor>{Tensor(Shape{1}, std::vector<double>{1.0 / p[0][0]})};
    };
    // log(-eps) is NaN once perturbed below zero.
    EXPECT_THROW(check_gradients(bad, {Tensor(Shape{1}, std::vector<double>{0.0})}, 1e-5),
                 std::runtime_error);
}

TEST(Gradients, ElementwiseKernels) {
    Rng rng(21);
    struct Case {
        const char* name;
        GraphBuilder build;
        double lo, hi;
    };
    const std::vector<Case> cases = {
        {"add", [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, t.add(v[0], v[1])); }, -1, 1},
        {"sub", [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, t.sub(v[0], v[1])); }, -1, 1},
        {"mul", [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, t.mul(v[0], v[1])); }, -1, 1},
        {"silu", [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, t.silu(v[0])); }, -2, 2},
        {"sigmoid", [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, t.sigmoid(v[0])); }, -3, 3},
        {"tanh", [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, t.tanh_(v[0])); }, -2, 2},
        {"exp", [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, t.exp_(v[0])); }, -1, 1},
        {"log", [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, t.log_(v[0])); }, 0.3, 2},
        {"sqrt", [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, t.sqrt_(v[0])); }, 0.3, 2},
        {"sqrt_shift",
         [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, t.sqrt_shift(v[0], 1e-4)); }, 0.01, 2},
        {"abs", [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, t.abs_(v[0])); }, 0.2, 1},
        {"log_sigmoid",
         [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, t.log_sigmoid(v[0])); }, -3, 3},
        {"add_scalar",
         [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, t.add_scalar(v[0], 0.37)); }, -1, 1},
        {"mul_scalar",
         [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, t.mul_scalar(v[0], -1.8)); }, -1, 1},
        {"clamp_interior",
         [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, t.clamp(v[0], -5.0, 5.0)); }, -1, 1},
    };
    for (const Case& c : cases) {
        std::vector<Tensor> params = {random_tensor({3, 4}, rng, c.lo, c.hi),
                                      random_tensor({3, 4}, rng, c.lo, c.hi)};
        const double err = builder_check(c.build, params, kEps);
        EXPECT_LE(err, kGradTol) << c.name;
    }
}

TEST(Gradients, AddSMulBroadcast) {
    Rng rng(22);
    std::vector<Tensor> params = {random_tensor({3, 4}, rng), random_tensor({1}, rng)};
    const double err = builder_check(
        [](Tape& t, const std::vector<Var>& v) {
            return weighted_sum(t, t.add_smul(v[0], v[1], -0.7));
        },
        params, kEps);
    EXPECT_LE(err, kGradTol);
}

TEST(Gradients, MatMulAllTransposeCombos) {
    Rng rng(23);
    for (int ta = 0; ta < 2; ++ta)
        for (int tb = 0; tb < 2; ++tb) {
            Shape sa = ta ? Shape{5, 3} : Shape{3, 5};
            Shape sb = tb ? Shape{4, 5} : Shape{5, 4};
            std::vector<Tensor> params = {random_tensor(sa, rng), random_tensor(sb, rng)};
            const double err = builder_check(
                [ta, tb](Tape& t, const std::vector<Var>& v) {
                    return weighted_sum(t, t.matmul(v[0], v[1], ta != 0, tb != 0));
                },
                params, kEps);
            EXPECT_LE(err, kGradTol) << "ta=" << ta << " tb=" << tb;
        }
}

TEST(Gradients, LinearConvPoolNormReduce) {
    Rng rng(24);
    {
        std::vector<Tensor> params = {random_tensor({4, 3}, rng), random_tensor({3, 5}, rng),
                                      random_tensor({5}, rng)};
        EXPECT_LE(builder_check(
                      [](Tape& t, const std::vector<Var>& v) {
                          return weighted_sum(t, t.linear(v[0], v[1], v[2]));
                      },
                      params, kEps),
                  kGradTol)
            << "linear";
    }
    {
        std::vector<Tensor> params = {random_tensor({6, 5, 2}, rng), random_tensor({3, 3, 2, 3}, rng),
                                      random_tensor({3}, rng)};
        EXPECT_LE(builder_check(
                      [](Tape& t, const std::vector<Var>& v) {
                          return weighted_sum(t, t.conv2d(v[0], v[1], 2, 1, v[2]));
                      },
                      params, kEps),
                  kGradTol)
            << "conv2d stride 2 with bias";
    }
    {
        std::vector<Tensor> params = {random_tensor({6, 6, 3}, rng)};
        EXPECT_LE(builder_check(
                      [](Tape& t, const std::vector<Var>& v) {
                          return weighted_sum(t, t.avg_down(v[0], 2));
                      },
                      params, kEps),
                  kGradTol)
            << "avg_down";
        EXPECT_LE(builder_check(
                      [](Tape& t, const std::vector<Var>& v) {
                          return weighted_sum(t, t.up_nearest(v[0], 2));
                      },
                      params, kEps),
                  kGradTol)
            << "up_nearest";
    }
    {
        std::vector<Tensor> params = {random_tensor({4, 6}, rng, -2.0, 2.0)};
        EXPECT_LE(builder_check(
                      [](Tape& t, const std::vector<Var>& v) {
                          return weighted_sum(t, t.softmax_rows(v[0]));
                      },
                      params, kEps),
                  kGradTol)
            << "softmax";
    }
    {
        std::vector<Tensor> params = {random_tensor({4, 6}, rng), random_tensor({6}, rng, 0.5, 1.5),
                                      random_tensor({6}, rng)};
        EXPECT_LE(builder_check(
                      [](Tape& t, const std::vector<Var>& v) {
                          return weighted_sum(t, t.layer_norm_rows(v[0], v[1], v[2]));
                      },
                      params, kEps),
                  kGradTol)
            << "layer_norm";
    }
    {
        std::vector<Tensor> params = {random_tensor({3, 5}, rng)};
        EXPECT_LE(builder_check(
                      [](Tape& t, const std::vector<Var>& v) { return t.sum(v[0]); }, params, kEps),
                  kGradTol)
            << "sum";
        EXPECT_LE(builder_check(
                      [](Tape& t, const std::vector<Var>& v) { return t.mean(v[0]); }, params, kEps),
                  kGradTol)
            << "mean";
    }
    {
        std::vector<Tensor> params = {random_tensor({4, 7}, rng, -2.0, 2.0)};
        EXPECT_LE(builder_check(
                      [](Tape& t, const std::vector<Var>& v) {
                          return t.softmax_cross_entropy(v[0], {1, 0, 6, 3});
                      },
                      params, kEps),
                  kGradTol)
            << "softmax_ce";
    }
    {
        std::vector<Tensor> params = {random_tensor({5, 3}, rng)};
        EXPECT_LE(builder_check(
                      [](Tape& t, const std::vector<Var>& v) {
                          return weighted_sum(t, t.gather_rows(v[0], {4, 0, 0, 2}));
                      },
                      params, kEps),
                  kGradTol)
            << "gather_rows";
        EXPECT_LE(builder_check(
                      [](Tape& t, const std::vector<Var>& v) {
                          return weighted_sum(t, t.reshape(v[0], Shape{3, 5}));
                      },
                      params, kEps),
                  kGradTol)
            << "reshape";
    }
}

TEST(Tape, ForwardDeterminism) {
    auto run = [](std::vector<double>* out) {
        Rng rng(77);
        Tensor x = random_tensor({6, 6, 2}, rng);
        Tensor k = random_tensor({3, 3, 2, 4}, rng);
        Tape tape;
        Var y = tape.conv2d(tape.leaf(x), tape.leaf(k), 1, 1);
        Var z = tape.mean(tape.silu(y));
        *out = {tape.scalar(z)};
        const Tensor& t = tape.value(y);
        out->insert(out->end(), t.data.begin(), t.data.end());
    };
    std::vector<double> a, b;
    run(&a);
    run(&b);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Tape, BackwardDeterminism) {
    auto run = [](Tensor* gx) {
        Rng rng(78);
        Tensor x = random_tensor({5, 5, 2}, rng);
        Tensor k = random_tensor({3, 3, 2, 2}, rng);
        Tape tape;
        Var xv = tape.leaf(x);
        Var y = tape.conv2d(xv, tape.leaf(k), 1, 1);
        tape.backward(tape.mean(tape.mul(y, y)));
        *gx = tape.grad(xv);
    };
    Tensor g1, g2;
    run(&g1);
    run(&g2);
    EXPECT_TRUE(bit_identical(g1, g2));
}

TEST(Tape, StopGradBlocksFlow) {
    Rng rng(31);
    Tensor x = random_tensor({2, 3}, rng);
    Tape tape;
    Var xv = tape.leaf(x);
    Var loss = tape.sum(tape.mul(tape.stop_grad(xv), xv));
    tape.backward(loss);
    // d/dx sum(sg(x) * x) = sg(x) = x, not 2x.
    const Tensor& g = tape.grad(xv);
    for (std::int64_t i = 0; i < x.size(); ++i) EXPECT_NEAR(g[i], x[i], 1e-14);
}

TEST(Tape, ReplayFreezesStopGrad) {
    // f(x) = sum(x + sg(c - x)) replayed after perturbing x must move with
    // identity slope, which is exactly what backward() reports.
    Rng rng(32);
    Tensor x = random_tensor({4}, rng);
    Tensor c = random_tensor({4}, rng);
    Tape tape;
    Var xv = tape.leaf(x);
    Var st = tape.straight_through(xv, tape.constant(c));
    Var loss = tape.sum(st);
    EXPECT_LE(tape_fd_max_rel_error(tape, loss, {xv}, 1e-6), 1e-9);
    // Forward value of straight-through equals zq.
    EXPECT_TRUE(bit_identical(tape.value(st), c));
}

TEST(Tape, StraightThroughBackwardIsIdentity) {
    Rng rng(33);
    Tensor zh = random_tensor({3, 2}, rng);
    Tensor zq = random_tensor({3, 2}, rng, -1.0, 1.0, false);
    Tape tape;
    Var zhv = tape.leaf(zh);
    Var zqv = tape.leaf(zq);
    Var loss = tape.sum(tape.straight_through(zhv, zqv));
    tape.backward(loss);
    const Tensor& g = tape.grad(zhv);
    for (std::int64_t i = 0; i < g.size(); ++i) EXPECT_EQ(g[i], 1.0);
    EXPECT_FALSE(tape.has_grad(zqv));
}
