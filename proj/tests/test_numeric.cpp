#include <gtest/gtest.h>

#include "placediff/gradcheck.hpp"
#include "placediff/params.hpp"
#include "placediff/rng.hpp"
#include "placediff/tape.hpp"
#include "placediff/tensor.hpp"

using namespace placediff;

namespace {

Tensor from(std::initializer_list<std::initializer_list<double>> rows) {
    const int r = static_cast<int>(rows.size());
    const int c = static_cast<int>(rows.begin()->size());
    Tensor t = Tensor::matrix(r, c);
    int i = 0;
    for (const auto& row : rows) {
        for (double v : row) t.data[i++] = v;
    }
    return t;
}

}  // namespace

TEST(Matmul, IdentityCase) {
    Tape tp;
    Ref I = tp.leaf(from({{1, 0}, {0, 1}}));
    Ref A = tp.leaf(from({{3, -1}, {2, 5}}));
    Ref C = tp.matmul(I, A);
    EXPECT_EQ(tp.val(C).data, tp.val(A).data);
}

TEST(Matmul, ZeroCaseWithGrad) {
    Tape tp;
    Ref A = tp.leaf(from({{1, 2}, {3, 4}}));
    Ref Z = tp.leaf(Tensor::matrix(2, 2, 0.0));
    Ref C = tp.matmul(A, Z);
    for (double v : tp.val(C).data) EXPECT_EQ(v, 0.0);
    Ref loss = tp.sum_all(C);
    tp.backward(loss);
    for (double g : tp.grad(A).data) EXPECT_EQ(g, 0.0);
}

TEST(Matmul, ByHandExpansion) {
    Tape tp;
    Ref A = tp.leaf(from({{1, 2}, {3, 4}}));
    Ref B = tp.leaf(from({{5}, {6}}));
    Ref C = tp.matmul(A, B);
    EXPECT_DOUBLE_EQ(tp.val(C).data[0], 17.0);
    EXPECT_DOUBLE_EQ(tp.val(C).data[1], 39.0);
}

TEST(Matmul, ShapeMismatchThrows) {
    Tape tp;
    Ref A = tp.leaf(Tensor::matrix(2, 3, 1.0));
    Ref B = tp.leaf(Tensor::matrix(2, 2, 1.0));
    EXPECT_THROW(tp.matmul(A, B), std::invalid_argument);
}

TEST(Softmax, EqualValuesUniform) {
    Tape tp;
    Ref x = tp.leaf(from({{2.5, 2.5, 2.5, 2.5}}));
    Ref y = tp.softmax_rows(x, 7.0);
    for (double v : tp.val(y).data) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(Softmax, SingleColumnAllOnes) {
    Tape tp;
    Ref x = tp.leaf(from({{-3.0}, {11.0}, {0.0}}));
    Ref y = tp.softmax_rows(x, 1.0);
    for (double v : tp.val(y).data) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(Softmax, ClosedForm) {
    Tape tp;
    Ref x = tp.leaf(from({{0.0, std::log(3.0)}}));
    Ref y = tp.softmax_rows(x, 1.0);
    EXPECT_NEAR(tp.val(y).data[0], 0.25, 1e-14);
    EXPECT_NEAR(tp.val(y).data[1], 0.75, 1e-14);
}

TEST(Softmax, RowsSumToOneUnderLargeMagnitudes) {
    Rng rng(42);
    for (int trial = 0; trial < 50; ++trial) {
        Tape tp;
        Ref x = tp.leaf(rng.uniform_tensor({4, 6}, -1e3, 1e3));
        Ref y = tp.softmax_rows(x, 1.0);
        const Tensor& yv = tp.val(y);
        for (int i = 0; i < 4; ++i) {
            double s = 0.0;
            for (int j = 0; j < 6; ++j) s += yv.at(i, j);
            EXPECT_NEAR(s, 1.0, 1e-12);
            for (int j = 0; j < 6; ++j) EXPECT_GE(yv.at(i, j), 0.0);
        }
    }
}

TEST(Tape, NonFiniteIsHardError) {
    Tape tp;
    Ref x = tp.leaf(from({{700.0, 800.0}}));
    EXPECT_THROW(tp.exp_(x), std::runtime_error);
}

// Every differentiable op against central finite differences on randomized
// small shapes, 20+ seeds.
TEST(Tape, OpGradientsMatchFiniteDifferences) {
    for (int seed = 0; seed < 22; ++seed) {
        Rng shape_rng(1000 + seed);
        const int r = 2 + static_cast<int>(shape_rng.below(3));
        const int c = 2 + static_cast<int>(shape_rng.below(3));
        ParamStore ps;
        {
            Rng init(seed);
            ps.add("a", init.uniform_tensor({r, c}, -1.2, 1.2));
            ps.add("b", init.uniform_tensor({r, c}, -1.2, 1.2));
            ps.add("w", init.uniform_tensor({c, r}, -1.2, 1.2));
            ps.add("col", init.uniform_tensor({r, 1}, 0.2, 1.5));
            ps.add("row", init.uniform_tensor({1, c}, -1.0, 1.0));
        }
        auto f = [&](ParamStore& p, bool with_grad) {
            Tape tp;
            Binding bind(tp, p);
            Ref a = bind("a"), b = bind("b"), w = bind("w");
            Ref col = bind("col"), row = bind("row");
            Ref y = tp.mul(tp.add(a, b), tp.sub(a, tp.scale(b, 0.7)));
            y = tp.matmul(y, w);                         // [r x r]
            y = tp.matmul_nt(y, y);                      // [r x r]
            y = tp.softmax_rows(y, 0.5);
            y = tp.pow_(tp.add_scalar(y, 0.1), 1.7);
            y = tp.tanh_(y);
            y = tp.matmul_nt(y, w);                      // back to [r x c]
            Ref z = tp.bcast_row_add(tp.bcast_col_mul(a, col), row);
            z = tp.log_(tp.add_scalar(tp.exp_(tp.scale(z, 0.3)), 0.5));
            Ref parts = tp.concat_rows({y, z});
            parts = tp.slice_rows(parts, 1, r);
            std::vector<std::size_t> perm(static_cast<std::size_t>(r) * c);
            for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = perm.size() - 1 - i;
            Ref rx = tp.reindex(parts, {r, c}, perm);
            Ref loss = tp.add(tp.mean_all(rx), tp.mean_all(tp.mul(tp.row_mean(z), tp.row_sum(z))));
            loss = tp.add(loss, tp.mean_all(normalize_rows(tp, a)));
            if (with_grad) {
                tp.backward(loss);
                bind.harvest();
            }
            return tp.val(loss).data[0];
        };
        Rng coord_rng(77 + seed);
        auto rep = grad_check(f, ps, 1e-5, 1e-4, coord_rng, 6);
        EXPECT_TRUE(rep.pass) << "seed " << seed << " max rel err " << rep.max_rel_err;
    }
}

TEST(GradCheck, PolynomialExact) {
    ParamStore ps;
    ps.add("w", Tensor::scalar(3.0));
    auto f = [](ParamStore& p, bool with_grad) {
        Tape tp;
        Binding bind(tp, p);
        Ref w = bind("w");
        Ref y = tp.mul(w, w);
        if (with_grad) {
            tp.backward(y);
            bind.harvest();
        }
        return tp.val(y).data[0];
    };
    ps.zero_grad();
    f(ps, true);
    EXPECT_NEAR(ps.grad("w").data[0], 6.0, 1e-12);
    Rng rng(1);
    auto rep = grad_check(f, ps, 1e-5, 1e-8, rng, -1);
    EXPECT_TRUE(rep.pass) << rep.max_rel_err;
}

TEST(GradCheck, NonDeterministicFunctionRejected) {
    ParamStore ps;
    ps.add("w", Tensor::scalar(1.0));
    int calls = 0;
    auto f = [&calls](ParamStore& p, bool) {
        ++calls;
        return p.value("w").data[0] + 0.001 * calls;
    };
    Rng rng(1);
    EXPECT_THROW(grad_check(f, ps, 1e-5, 1e-4, rng), std::runtime_error);
}

TEST(GradCheck, EpsOutOfRangeRejected) {
    ParamStore ps;
    ps.add("w", Tensor::scalar(1.0));
    auto f = [](ParamStore& p, bool) { return p.value("w").data[0]; };
    Rng rng(1);
    EXPECT_THROW(grad_check(f, ps, 1e-2, 1e-4, rng), std::invalid_argument);
}

TEST(AdamW, ZeroGradientNoDecayLeavesParamsUnchanged) {
    ParamStore ps;
    ps.add("w", Tensor::matrix(2, 2, 0.5));
    adamw_step(ps, 0.1, 0.0, {}, 1);
    for (double v : ps.value("w").data) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(AdamW, FrozenEntryBitwiseUnchanged) {
    ParamStore ps;
    Rng rng(3);
    ps.add("frozen.w", rng.uniform_tensor({3, 3}, -1, 1), /*frozen=*/true);
    const Tensor before = ps.value("frozen.w");
    for (auto& g : ps.grad("frozen.w").data) g = 10.0;
    for (int s = 1; s <= 5; ++s) adamw_step(ps, 0.1, 0.01, {}, s);
    EXPECT_EQ(before.data, ps.value("frozen.w").data);
}

TEST(AdamW, SingleScalarFirstStep) {
    // bias-corrected first step moves w by ~lr regardless of gradient scale
    ParamStore ps;
    ps.add("w", Tensor::scalar(1.0));
    ps.grad("w").data[0] = 1.0;
    adamw_step(ps, 0.1, 0.0, {}, 1);
    EXPECT_NEAR(ps.value("w").data[0], 0.9, 1e-6);
}

TEST(AdamW, StepOverflowThrows) {
    ParamStore ps;
    ps.add("w", Tensor::scalar(1.0));
    EXPECT_THROW(adamw_step(ps, 0.1, 0.0, {}, 0), std::invalid_argument);
    EXPECT_THROW(adamw_step(ps, 0.1, 0.0, {}, std::int64_t(1) << 51), std::invalid_argument);
}

TEST(ParamStore, DuplicateNameRejected) {
    ParamStore ps;
    ps.add("w", Tensor::scalar(1.0));
    EXPECT_THROW(ps.add("w", Tensor::scalar(2.0)), std::invalid_argument);
}

TEST(ParamStore, FrozenReceivesNoHarvestedGradient) {
    ParamStore ps;
    ps.add("a", Tensor::scalar(2.0));
    ps.add("b", Tensor::scalar(3.0), /*frozen=*/true);
    Tape tp;
    Binding bind(tp, ps);
    Ref loss = tp.mul(bind("a"), bind("b"));
    tp.backward(loss);
    bind.harvest();
    EXPECT_DOUBLE_EQ(ps.grad("a").data[0], 3.0);
    EXPECT_DOUBLE_EQ(ps.grad("b").data[0], 0.0);
}

TEST(Rng, DeterministicStreams) {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
    Rng c(123), d(124);
    EXPECT_NE(c.next_u64(), d.next_u64());
}

TEST(Rng, NormalMoments) {
    Rng rng(7);
    double sum = 0.0, sum2 = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        sum += x;
        sum2 += x * x;
    }
    EXPECT_NEAR(sum / n, 0.0, 0.01);
    EXPECT_NEAR(sum2 / n, 1.0, 0.02);
}
