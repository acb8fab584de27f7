#include <gtest/gtest.h>

#include <cmath>

#include "iqvq/gradcheck.hpp"
#include "iqvq/rng.hpp"
#include "iqvq/vq.hpp"
#include "support/test_helpers.hpp"

using namespace iqvq;
using namespace iqvq::testing;

namespace {

// Exhaustive-search oracle, written against the raw arrays.
int nearest_oracle(const double* z, const Tensor& entries, int c) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int k = 0; k < entries.shape[0]; ++k) {
        double d = 0.0;
        for (int j = 0; j < c; ++j) {
            const double diff = z[j] - entries.at(k, j);
            d += diff * diff;
        }
        if (d < best_d) {
            best_d = d;
            best = k;
        }
    }
    return best;
}

}  // namespace

TEST(Quantize, ExactMemberMapsToItself) {
    Rng rng(60);
    Codebook cb = Codebook::init_random(8, 4, CodebookRole::Common, rng);
    Tensor z(Shape{1, 1, 4});
    for (int j = 0; j < 4; ++j) z.at(0, 0, j) = cb.entries.at(2, j);
    auto [zq, codes] = quantize(z, cb);
    EXPECT_EQ(codes.indices[0], 2);
    EXPECT_TRUE(bit_identical(zq, z));
}

TEST(Quantize, TieBreaksToLowerIndex) {
    Codebook cb;
    cb.entries = Tensor(Shape{3, 2}, std::vector<double>{1.0, 0.0, -1.0, 0.0, 1.0, 0.0});
    Tensor z(Shape{1, 1, 2});  // equidistant from entries 0 and 2 (identical) and 1
    auto [zq, codes] = quantize(z, cb);
    EXPECT_EQ(codes.indices[0], 0);
}

TEST(Quantize, MatchesExhaustiveSearchOnSeededQueries) {
    Rng rng(61);
    Codebook cb = Codebook::init_random(8, 4, CodebookRole::Common, rng);
    Tensor z = random_tensor({1, 5, 4}, rng, -0.05, 0.05, false);
    auto [zq, codes] = quantize(z, cb);
    for (int i = 0; i < 5; ++i)
        EXPECT_EQ(codes.indices[static_cast<std::size_t>(i)],
                  nearest_oracle(&z.data[static_cast<std::size_t>(i) * 4], cb.entries, 4));
}

TEST(Quantize, Idempotent) {
    Rng rng(62);
    Codebook cb = Codebook::init_random(16, 6, CodebookRole::Common, rng);
    Tensor z = random_tensor({3, 3, 6}, rng, -0.2, 0.2, false);
    auto [zq, codes] = quantize(z, cb);
    auto [zq2, codes2] = quantize(zq, cb);
    EXPECT_EQ(codes.indices, codes2.indices);
    EXPECT_TRUE(bit_identical(zq, zq2));
}

TEST(Quantize, RejectsDimensionMismatch) {
    Rng rng(63);
    Codebook cb = Codebook::init_random(4, 5, CodebookRole::Common, rng);
    EXPECT_THROW(quantize(Tensor(Shape{2, 2, 4}), cb), std::invalid_argument);
}

TEST(Fuse, RoutesOnThreshold) {
    Rng rng(64);
    Tensor a = random_tensor({2, 2, 3}, rng, -1.0, 1.0, false);
    Tensor b = random_tensor({2, 2, 3}, rng, -1.0, 1.0, false);
    Tape tape;
    Var av = tape.constant(a), bv = tape.constant(b);
    // S above threshold: zq1 + alpha*zq2 with the appendix values.
    Var hi = fuse(tape, av, bv, 0.95, 0.90, 1.0);
    for (std::int64_t i = 0; i < a.size(); ++i) EXPECT_DOUBLE_EQ(tape.value(hi)[i], a[i] + b[i]);
    // S equal to threshold takes the S <= S_thr branch.
    Var eq = fuse(tape, av, bv, 0.90, 0.90, 1.0);
    EXPECT_TRUE(bit_identical(tape.value(eq), a));
    // Zero weight reduces to zq1.
    Var z = fuse(tape, av, bv, 0.99, 0.90, 0.0);
    EXPECT_TRUE(bit_identical(tape.value(z), a));
    // Stage II always adds.
    Var always = fuse(tape, av, bv, 0.1, 0.90, 0.5, true);
    for (std::int64_t i = 0; i < a.size(); ++i)
        EXPECT_DOUBLE_EQ(tape.value(always)[i], a[i] + 0.5 * b[i]);
    // Perturbing S across the threshold flips between the two closed forms.
    Var below = fuse(tape, av, bv, 0.90 - 1e-9, 0.90, 1.0);
    Var above = fuse(tape, av, bv, 0.90 + 1e-9, 0.90, 1.0);
    EXPECT_TRUE(bit_identical(tape.value(below), a));
    EXPECT_GT(max_abs_diff(tape.value(above), a), 0.0);
}

TEST(CodebookLoss, HandEvaluatedValues) {
    Tape tape;
    {
        Tensor zh(Shape{1, 1, 2}, std::vector<double>{0.3, -0.4});
        Var v = tape.constant(zh);
        EXPECT_DOUBLE_EQ(tape.scalar(codebook_loss(tape, v, v, 0.25)), 0.0);
    }
    {
        Tensor zh(Shape{1, 1, 2}, std::vector<double>{1.0, 0.0});
        Tensor zq(Shape{1, 1, 2}, std::vector<double>{0.0, 0.0});
        Var loss = codebook_loss(tape, tape.constant(zh), tape.constant(zq), 0.25);
        EXPECT_DOUBLE_EQ(tape.scalar(loss), 1.25);  // 1 + 0.25 * 1
    }
}

TEST(CodebookLoss, StopGradientSplitsGradients) {
    Rng rng(65);
    Tensor zh = random_tensor({2, 2, 3}, rng);
    Tensor zq = random_tensor({2, 2, 3}, rng);
    const double beta = 0.25;
    Tape tape;
    Var zhv = tape.leaf(zh), zqv = tape.leaf(zq);
    tape.backward(codebook_loss(tape, zhv, zqv, beta));
    const Tensor& gh = tape.grad(zhv);
    const Tensor& gq = tape.grad(zqv);
    for (std::int64_t i = 0; i < zh.size(); ++i) {
        EXPECT_NEAR(gq[i], 2.0 * (zq[i] - zh[i]), 1e-12);        // first term only
        EXPECT_NEAR(gh[i], 2.0 * beta * (zh[i] - zq[i]), 1e-12); // second term only
    }
}

TEST(CodebookLoss, ReplayFiniteDifferencesMatch) {
    Rng rng(66);
    Tensor zh = random_tensor({2, 2, 3}, rng);
    Tensor zq = random_tensor({2, 2, 3}, rng);
    Tape tape;
    Var zhv = tape.leaf(zh), zqv = tape.leaf(zq);
    Var loss = codebook_loss(tape, zhv, zqv, 0.25);
    EXPECT_LE(tape_fd_max_rel_error(tape, loss, {zhv, zqv}, 1e-5), 1e-6);
}

TEST(StraightThrough, DecoderGradientMatchesIdentitySubstitution) {
    // Gradient at the encoder computed with straight-through equals the
    // gradient of the same downstream loss with zq replaced by zh.
    Rng rng(67);
    Tensor zh = random_tensor({2, 2, 3}, rng);
    Tensor zq = random_tensor({2, 2, 3}, rng, -1.0, 1.0, false);
    Tensor w = random_tensor({2, 2, 3}, rng, -1.0, 1.0, false);

    Tape t1;
    Var zh1 = t1.leaf(zh);
    Var st = t1.straight_through(zh1, t1.constant(zq));
    t1.backward(t1.sum(t1.mul(t1.silu(st), t1.constant(w))));

    Tape t2;
    Var zh2 = t2.leaf(zh);
    Var direct = t2.add(zh2, t2.constant([&] {
        Tensor d(zq.shape);
        for (std::int64_t i = 0; i < d.size(); ++i) d[i] = zq[i] - zh[i];
        return d;
    }()));
    t2.backward(t2.sum(t2.mul(t2.silu(direct), t2.constant(w))));

    EXPECT_LE(max_abs_diff(t1.grad(zh1), t2.grad(zh2)), 1e-12);
}

TEST(LookupCodes, GradientFlowsToSelectedRows) {
    Rng rng(68);
    Tensor entries = random_tensor({5, 3}, rng);
    CodeSequence codes{{4, 0, 0, 2}};
    Tape tape;
    Var cb = tape.leaf(entries);
    Var zq = lookup_codes(tape, cb, codes, 2, 2);
    EXPECT_EQ(tape.value(zq).shape, (Shape{2, 2, 3}));
    tape.backward(tape.sum(zq));
    const Tensor& g = tape.grad(cb);
    EXPECT_DOUBLE_EQ(g.at(0, 0), 2.0);  // row 0 selected twice
    EXPECT_DOUBLE_EQ(g.at(4, 0), 1.0);
    EXPECT_DOUBLE_EQ(g.at(2, 0), 1.0);
    EXPECT_DOUBLE_EQ(g.at(1, 0), 0.0);
    EXPECT_DOUBLE_EQ(g.at(3, 0), 0.0);
}

TEST(Utilization, CountsDistinctEntries) {
    std::vector<CodeSequence> seqs = {{{0, 1, 1}}, {{3, 0, 0}}};
    EXPECT_DOUBLE_EQ(utilization(seqs, 8), 3.0 / 8.0);
}
