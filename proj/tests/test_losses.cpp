#include <gtest/gtest.h>

#include "sflow/losses.hpp"
#include "test_support.hpp"

using namespace sflow;
using sflow::testing::numeric_gradient;
using sflow::testing::random_matrix;
using sflow::testing::random_points;
using sflow::testing::relative_error;
using sflow::testing::rows_to_points;

namespace {

MaskLogits logits_of(const Matrix& m) { return MaskLogits{m}; }

/// Logits whose argmax is `labels[i]` with a clear margin, plus noise.
MaskLogits labelled_logits(const Labels& labels, int channels, std::uint64_t seed) {
    Matrix m = random_matrix(static_cast<Eigen::Index>(labels.size()), channels, seed, 0.5);
    for (std::size_t i = 0; i < labels.size(); ++i) m(static_cast<Eigen::Index>(i), labels[i]) += 3.0;
    return logits_of(m);
}

Points add(const Points& a, const Points& b) {
    Points out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Chamfer
// ---------------------------------------------------------------------------

TEST(Chamfer, IdenticalCloudsAreZero) {
    const Points p = random_points(40, 1);
    const LossValue v = chamfer_loss(p, p);
    EXPECT_EQ(v.value, 0.0);
    EXPECT_EQ(v.grad.norm(), 0.0);
}

TEST(Chamfer, SinglePointPair) {
    const LossValue v = chamfer_loss({Vec3(0, 0, 0)}, {Vec3(1, 0, 0)});
    EXPECT_DOUBLE_EQ(v.value, 1.0);
    EXPECT_DOUBLE_EQ(v.grad.row(0).norm(), 2.0);
    EXPECT_LT(v.grad(0, 0), 0.0);  // descent moves the point toward the target
}

TEST(Chamfer, QuadraticInScale) {
    const Points a = random_points(30, 2), b = random_points(25, 3);
    Points a2 = a, b2 = b;
    for (auto& p : a2) p *= 2.0;
    for (auto& p : b2) p *= 2.0;
    EXPECT_NEAR(chamfer_loss(a2, b2).value, 4.0 * chamfer_loss(a, b).value, 1e-12);
}

TEST(Chamfer, EmptyCloud) {
    EXPECT_THROW(chamfer_loss({}, {Vec3::Zero()}), Error);
}

// ---------------------------------------------------------------------------
// Balanced focal
// ---------------------------------------------------------------------------

TEST(BalancedFocal, HalfProbabilityExample) {
    LossWeights w;
    w.beta = 1.0;
    const LossValue v = bf_loss(logits_of(Matrix::Zero(1, 3)), {1}, w);
    EXPECT_NEAR(v.value, -0.25 * std::log(0.5), 1e-15);
    EXPECT_NEAR(v.value, 0.1733, 5e-5);
}

TEST(BalancedFocal, NegativeIgnoredWhenBetaIsOne) {
    LossWeights w;
    w.beta = 1.0;
    for (double l : {-5.0, 0.0, 7.0}) {
        Matrix m = Matrix::Zero(1, 2);
        m(0, 0) = l;
        EXPECT_EQ(bf_loss(logits_of(m), {0}, w).value, 0.0);
    }
}

TEST(BalancedFocal, ConfidentCorrectIsNearZero) {
    Matrix m = Matrix::Zero(2, 2);
    m(0, 0) = -40.0;  // p_fg -> 1, y = 1
    m(1, 0) = 40.0;   // p_bg -> 1, y = 0
    EXPECT_LT(bf_loss(logits_of(m), {1, 0}, LossWeights{}).value, 1e-30);
}

TEST(BalancedFocal, DirectionInBackgroundLogit) {
    const LossWeights w;
    double prev_neg = std::numeric_limits<double>::infinity(), prev_pos = -1.0;
    for (double l = -6.0; l <= 6.0; l += 0.5) {
        Matrix m = Matrix::Zero(1, 2);
        m(0, 0) = l;
        const double neg = bf_loss(logits_of(m), {0}, w).value;
        const double pos = bf_loss(logits_of(m), {1}, w).value;
        EXPECT_LT(neg, prev_neg);
        EXPECT_GT(pos, prev_pos);
        prev_neg = neg;
        prev_pos = pos;
    }
}

TEST(BalancedFocal, GradientOnlyOnBackgroundChannel) {
    const MaskLogits l = logits_of(random_matrix(8, 4, 4));
    const LossValue v = bf_loss(l, {0, 1, 2, 0, 0, 3, 1, 0}, LossWeights{});
    EXPECT_GT(v.grad.col(0).norm(), 0.0);
    EXPECT_EQ(v.grad.rightCols(3).norm(), 0.0);
}

// ---------------------------------------------------------------------------
// Rigid
// ---------------------------------------------------------------------------

TEST(Rigid, ExactRigidFlowIsZero) {
    const Points pts = random_points(12, 5);
    const Labels labels = {1, 1, 1, 1, 2, 2, 2, 2, 0, 0, 0, 0};
    const RigidTransform A = RigidTransform::from_yaw(0.3, Vec3(1, 0, 0));
    const RigidTransform B = RigidTransform::from_yaw(-0.2, Vec3(0, 2, 0.5));
    Points flow(12, Vec3(0.7, -0.1, 0.0));  // background flow is unconstrained
    for (std::size_t i = 0; i < 8; ++i) flow[i] = (i < 4 ? A : B).apply(pts[i]) - pts[i];
    const LossValue v = rigid_loss(pts, labelled_logits(labels, 3, 6), flow);
    EXPECT_LT(v.value, 1e-12);
}

TEST(Rigid, PerturbedMemberDominatesGradient) {
    const Points pts = random_points(10, 7);
    const Labels labels(10, 1);
    Points flow(10, Vec3(1, 0, 0));
    flow[3] = Vec3(1, 0, 0.1);
    const LossValue v = rigid_loss(pts, labelled_logits(labels, 2, 8), flow);
    EXPECT_GT(v.value, 0.0);
    // the refit spreads a little residual over the others; the moved point carries the most
    for (Eigen::Index i = 0; i < 10; ++i)
        if (i != 3) EXPECT_GT(v.grad.row(3).norm(), v.grad.row(i).norm());
}

TEST(Rigid, NoForegroundIsZero) {
    const Points pts = random_points(9, 9);
    const LossValue v = rigid_loss(pts, labelled_logits(Labels(9, 0), 4, 10), random_points(9, 11));
    EXPECT_EQ(v.value, 0.0);
    EXPECT_EQ(v.grad.norm(), 0.0);
}

TEST(Rigid, SmallChannelsSkipped) {
    const Points pts = random_points(6, 12);
    const LossValue v = rigid_loss(pts, labelled_logits({1, 1, 0, 0, 2, 2}, 3, 13), random_points(6, 14));
    EXPECT_EQ(v.value, 0.0);
}

TEST(Rigid, InvariantUnderGlobalMotion) {
    const Points pts = random_points(15, 15);
    const Points flow = random_points(15, 16, -0.3, 0.3);
    const MaskLogits l = labelled_logits({1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 3, 3, 3, 3, 0}, 4, 17);
    const RigidTransform G = RigidTransform::from_yaw(1.1, Vec3(3, -2, 1));
    const Points warped = add(pts, flow);
    const Points moved = G.apply(pts);
    const Points moved_warped = G.apply(warped);
    Points moved_flow(15);
    for (std::size_t i = 0; i < 15; ++i) moved_flow[i] = moved_warped[i] - moved[i];
    EXPECT_NEAR(rigid_loss(pts, l, flow).value, rigid_loss(moved, l, moved_flow).value, 1e-12);
}

// ---------------------------------------------------------------------------
// Spatial mask consistency
// ---------------------------------------------------------------------------

TEST(Smc, IdenticalLogitsAreZero) {
    Matrix m(20, 4);
    for (Eigen::Index i = 0; i < 20; ++i) m.row(i) << 0.3, -1.0, 2.0, 0.5;
    EXPECT_EQ(smc_loss(random_points(20, 18), logits_of(m), LossWeights{}).value, 0.0);
}

TEST(Smc, IsolatedPointsAreZero) {
    const Points pts = {Vec3(0, 0, 0), Vec3(100, 0, 0)};
    const LossValue v = smc_loss(pts, logits_of(random_matrix(2, 3, 19)), LossWeights{});
    EXPECT_EQ(v.value, 0.0);
    EXPECT_EQ(v.grad.norm(), 0.0);
}

TEST(Smc, ThreePointChainMatchesDirectSum) {
    const Points pts = {Vec3(0, 0, 0), Vec3(0.3, 0, 0), Vec3(0.6, 0, 0)};
    Matrix m = Matrix::Zero(3, 3);
    m.row(2) << 2.0, -1.0, 0.5;  // divergent row
    LossWeights w;
    w.neighbors.k = 2;
    w.neighbors.radius = 0.5;
    const LossValue v = smc_loss(pts, logits_of(m), w);

    const Matrix s = softmax_rows(m);
    auto d2 = [&](int i, int j) { return (s.row(i) - s.row(j)).squaredNorm(); };
    // knn (k = 2) of each point is the other two; ball r = 0.5 holds the chain neighbours only
    const double knn_sum = 2.0 * (d2(0, 1) + d2(0, 2) + d2(1, 2));
    const double ball_sum = 2.0 * (d2(0, 1) + d2(1, 2));
    const double expected = (w.w_knn * knn_sum + w.w_ball * ball_sum) / 3.0;
    EXPECT_NEAR(v.value, expected, 1e-15);

    Matrix mm = m;
    auto f = [&]() { return smc_loss(pts, logits_of(mm), w).value; };
    EXPECT_LT(relative_error(v.grad, numeric_gradient(mm, f)), 1e-4);
}

// ---------------------------------------------------------------------------
// Dynamic object mask
// ---------------------------------------------------------------------------

TEST(Dom, NoDistantForegroundPairsGivesMinimum) {
    const LossWeights w;
    const Points pts = {Vec3(0, 0, 0), Vec3(0.5, 0, 0), Vec3(10, 0, 0)};
    const LossValue v = dom_loss(pts, labelled_logits({1, 1, 0}, 3, 20), w);
    EXPECT_EQ(v.value, 1.0);
    EXPECT_EQ(v.value, w.l_min);
    EXPECT_EQ(v.grad.norm(), 0.0);
}

TEST(Dom, OrthogonalAndParallelRows) {
    const Points pts = {Vec3(0, 0, 0), Vec3(10, 0, 0)};
    Matrix orth(2, 4);
    orth << -60, 60, -60, -60, -60, -60, 60, -60;
    EXPECT_NEAR(dom_loss(pts, logits_of(orth), LossWeights{}).value, 0.0, 1e-12);
    Matrix same(2, 4);
    same << 0.1, 2.0, 0.3, -1.0, 0.1, 2.0, 0.3, -1.0;
    EXPECT_NEAR(dom_loss(pts, logits_of(same), LossWeights{}).value, 1.0, 1e-12);
}

TEST(Dom, PairSubsamplingIsDeterministicAndBounded) {
    const Points pts = random_points(60, 21, -10.0, 10.0);
    const Labels labels(60, 1);
    const auto all = distant_foreground_pairs(pts, labels, 2.0, 1 << 30);
    const auto some = distant_foreground_pairs(pts, labels, 2.0, 100);
    EXPECT_EQ(some.size(), 100u);
    EXPECT_EQ(some, distant_foreground_pairs(pts, labels, 2.0, 100));
    EXPECT_EQ(some.front(), all.front());
    for (const auto& pr : some) EXPECT_TRUE(std::find(all.begin(), all.end(), pr) != all.end());
}

// ---------------------------------------------------------------------------
// Finite-difference checks on every loss
// ---------------------------------------------------------------------------

class LossGradients : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(LossGradients, ChamferFlow) {
    const std::uint64_t s = GetParam();
    Matrix w = random_matrix(12, 3, s, 1.0);
    const Points target = random_points(14, s + 1);
    auto f = [&]() { return chamfer_loss(sflow::testing::rows_to_points(w), target).value; };
    const LossValue v = chamfer_loss(rows_to_points(w), target);
    EXPECT_LT(relative_error(v.grad, numeric_gradient(w, f)), 1e-4);
}

TEST_P(LossGradients, BalancedFocalLogits) {
    const std::uint64_t s = GetParam();
    Matrix m = random_matrix(12, 4, s, 3.0);
    Labels y(12);
    for (std::size_t i = 0; i < 12; ++i) y[i] = static_cast<int>((i * 7 + s) % 3);
    LossWeights lw;
    auto f = [&]() { return bf_loss(logits_of(m), y, lw).value; };
    const LossValue v = bf_loss(logits_of(m), y, lw);
    EXPECT_LT(relative_error(v.grad, numeric_gradient(m, f)), 1e-4);
}

TEST_P(LossGradients, RigidFlow) {
    const std::uint64_t s = GetParam();
    const Points pts = random_points(14, s);
    Labels y(14);
    for (std::size_t i = 0; i < 14; ++i) y[i] = static_cast<int>(i % 4);
    const MaskLogits l = labelled_logits(y, 4, s + 1);
    Matrix flow = random_matrix(14, 3, s + 2, 0.5);
    auto f = [&]() { return rigid_loss(pts, l, rows_to_points(flow)).value; };
    const LossValue v = rigid_loss(pts, l, rows_to_points(flow));
    EXPECT_GT(v.value, 0.0);
    EXPECT_LT(relative_error(v.grad, numeric_gradient(flow, f)), 1e-4);
}

TEST_P(LossGradients, SmcLogits) {
    const std::uint64_t s = GetParam();
    const Points pts = random_points(16, s, -0.6, 0.6);
    Matrix m = random_matrix(16, 4, s + 3, 2.0);
    const LossWeights lw;
    auto f = [&]() { return smc_loss(pts, logits_of(m), lw).value; };
    const LossValue v = smc_loss(pts, logits_of(m), lw);
    EXPECT_GT(v.value, 0.0);
    EXPECT_LT(relative_error(v.grad, numeric_gradient(m, f)), 1e-4);
}

TEST_P(LossGradients, DomLogits) {
    const std::uint64_t s = GetParam();
    const Points pts = random_points(16, s, -4.0, 4.0);
    Labels y(16);
    for (std::size_t i = 0; i < 16; ++i) y[i] = static_cast<int>(i % 4);
    Matrix m = labelled_logits(y, 4, s + 4).values;
    LossWeights lw;
    lw.max_pairs = 20;
    auto f = [&]() { return dom_loss(pts, logits_of(m), lw).value; };
    const LossValue v = dom_loss(pts, logits_of(m), lw);
    ASSERT_NE(v.value, lw.l_min);
    EXPECT_LT(relative_error(v.grad, numeric_gradient(m, f)), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Seeds, LossGradients, ::testing::Values(1, 2, 3, 4, 5));

// ---------------------------------------------------------------------------
// Weighted total
// ---------------------------------------------------------------------------

namespace {

struct TotalFixture {
    Points src, tgt, ego, res;
    MaskLogits logits;
    Labels pseudo;

    LossInputs inputs() const { return {&src, &tgt, &ego, &res, &logits, &pseudo, nullptr}; }
};

TotalFixture total_fixture(std::uint64_t s) {
    TotalFixture f;
    f.src = random_points(16, s, -3.0, 3.0);
    f.tgt = random_points(16, s + 1, -3.0, 3.0);
    f.ego = random_points(16, s + 2, -0.2, 0.2);
    f.res = random_points(16, s + 3, -0.2, 0.2);
    Labels y(16);
    for (std::size_t i = 0; i < 16; ++i) y[i] = static_cast<int>(i % 4);
    f.logits = labelled_logits(y, 4, s + 4);
    f.pseudo = Labels(16, 0);
    for (std::size_t i = 0; i < 16; i += 3) f.pseudo[i] = 1;
    return f;
}

}  // namespace

TEST(TotalLoss, AllWeightsZero) {
    const TotalFixture f = total_fixture(1);
    LossWeights w;
    w.lambda_cd = w.lambda_bf = w.lambda_rigid = w.lambda_smc = w.lambda_dom = 0.0;
    const LossBreakdown b = total_loss(f.inputs(), w);
    EXPECT_EQ(b.total, 0.0);
    EXPECT_EQ(b.grad_residual.norm(), 0.0);
    EXPECT_EQ(b.grad_logits.norm(), 0.0);
}

TEST(TotalLoss, ChamferOnly) {
    const TotalFixture f = total_fixture(2);
    LossWeights w;
    w.lambda_bf = w.lambda_rigid = w.lambda_smc = w.lambda_dom = 0.0;
    const LossBreakdown b = total_loss(f.inputs(), w);
    const LossValue cd = chamfer_loss(add(f.src, add(f.ego, f.res)), f.tgt);
    EXPECT_EQ(b.total, cd.value);
    EXPECT_EQ(b.grad_residual, cd.grad);
}

TEST(TotalLoss, SumOfParts) {
    const TotalFixture f = total_fixture(3);
    LossWeights w;
    w.lambda_cd = 1.5;
    w.lambda_bf = 0.7;
    w.lambda_rigid = 2.0;
    w.lambda_smc = 0.3;
    w.lambda_dom = 0.2;
    const LossBreakdown b = total_loss(f.inputs(), w);
    const Points flow = add(f.ego, f.res);
    const double cd = chamfer_loss(add(f.src, flow), f.tgt).value;
    const double bf = bf_loss(f.logits, f.pseudo, w).value;
    const double rigid = rigid_loss(f.src, f.logits, flow).value;
    const double smc = smc_loss(f.src, f.logits, w).value;
    const double dom = dom_loss(f.src, f.logits, w).value;
    EXPECT_NEAR(b.total, 1.5 * cd + 0.7 * bf + 2.0 * rigid + 0.3 * smc + 0.2 * dom, 1e-12);
    EXPECT_EQ(b.cd, cd);
    EXPECT_EQ(b.bf, bf);
    EXPECT_EQ(b.rigid, rigid);
    EXPECT_EQ(b.smc, smc);
    EXPECT_EQ(b.dom, dom);
}

TEST(TotalLoss, LengthMismatch) {
    TotalFixture f = total_fixture(4);
    f.res.pop_back();
    EXPECT_THROW(total_loss(f.inputs(), LossWeights{}), Error);
}

TEST(Weights, Validation) {
    LossWeights w;
    EXPECT_NO_THROW(w.validate());
    w.beta = 1.5;
    EXPECT_THROW(w.validate(), Error);
    w = LossWeights{};
    w.delta = 0.0;
    EXPECT_THROW(w.validate(), Error);
    w = LossWeights{};
    w.lambda_smc = -1.0;
    EXPECT_THROW(w.validate(), Error);
}
