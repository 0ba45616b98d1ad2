#include <gtest/gtest.h>

#include <filesystem>

#include "sflow/network.hpp"
#include "test_support.hpp"

using namespace sflow;
using sflow::testing::numeric_gradient;
using sflow::testing::random_matrix;
using sflow::testing::random_points;
using sflow::testing::relative_error;

namespace {

NetworkConfig small_config(int k = 2) {
    NetworkConfig c;
    c.hidden = 8;
    c.iterations = k;
    c.channels = 4;
    c.voxel_size = 0.5;
    return c;
}

struct Fixture {
    Points pts;
    Matrix inputs;
    VoxelGrid grid;
};

Fixture make_fixture(std::size_t n, std::uint64_t seed, double cell) {
    Points pts = random_points(n, seed, -1.0, 1.0);
    Matrix x = random_matrix(static_cast<Eigen::Index>(n), 7, seed + 1);
    VoxelGrid grid(pts, cell);
    return {std::move(pts), std::move(x), std::move(grid)};
}

Matrix flow_matrix(const FlowField& f) {
    Matrix m(static_cast<Eigen::Index>(f.size()), 3);
    for (std::size_t i = 0; i < f.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = f.vectors[i].transpose();
    return m;
}

}  // namespace

TEST(Forward, ZeroParamsGiveZeroOutputs) {
    const Fixture fx = make_fixture(10, 1, 0.5);
    const ModelParams p = ModelParams::zeros(small_config());
    const ForwardOutput out = forward(p, fx.inputs, fx.grid);
    EXPECT_EQ(flow_matrix(out.residual).norm(), 0.0);
    EXPECT_EQ(out.logits.values.norm(), 0.0);
    EXPECT_EQ(out.logits.channels(), 4);
    EXPECT_EQ(out.residual.kind, FlowKind::Residual);
}

TEST(Forward, SinglePointNoIterations) {
    const Fixture fx = make_fixture(1, 2, 0.5);
    const ModelParams p = ModelParams::initialize(small_config(0), 3);
    const ForwardOutput out = forward(p, fx.inputs, fx.grid);
    const Matrix& f0 = out.trace.features.front();
    Matrix fused(1, 16);
    fused << f0, f0;
    const Matrix expected = ((fused * p.fuse_w.transpose()).row(0) + p.fuse_b.row(0)).array().tanh().matrix();
    EXPECT_LT((out.trace.shared - expected).norm(), 1e-15);
}

TEST(Forward, VoxelLayoutIrrelevantWhenVoxelGruIsZero) {
    const Points pts = {Vec3(0.05, 0.05, 0.05), Vec3(0.1, 0.1, 0.1)};
    const Matrix x = random_matrix(2, 7, 4);
    ModelParams p = ModelParams::initialize(small_config(), 5);
    GruWeights::visit(p.gru_v, "", [](const std::string&, Matrix& m) { m.setZero(); });
    NetworkConfig coarse = p.config, fine = p.config;
    coarse.voxel_size = 1.0;
    fine.voxel_size = 0.01;
    ModelParams pc = p, pf = p;
    pc.config = coarse;
    pf.config = fine;
    const VoxelGrid gc(pts, 1.0), gf(pts, 0.01);
    ASSERT_EQ(gc.cell_count(), 1u);
    ASSERT_EQ(gf.cell_count(), 2u);
    const ForwardOutput a = forward(pc, x, gc), b = forward(pf, x, gf);
    EXPECT_EQ(a.trace.voxels.voxel_count(), 1);
    EXPECT_EQ(b.trace.voxels.voxel_count(), 2);
    EXPECT_EQ(flow_matrix(a.residual), flow_matrix(b.residual));
    EXPECT_EQ(a.logits.values, b.logits.values);
}

TEST(Forward, PermutationEquivariant) {
    const Fixture fx = make_fixture(14, 6, 0.5);
    const ModelParams p = ModelParams::initialize(small_config(), 7);
    std::vector<Eigen::Index> perm = {3, 0, 13, 7, 1, 12, 2, 9, 11, 4, 6, 10, 5, 8};
    Points pts(14);
    Matrix x(14, 7);
    for (Eigen::Index i = 0; i < 14; ++i) {
        pts[static_cast<std::size_t>(i)] = fx.pts[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
        x.row(i) = fx.inputs.row(perm[static_cast<std::size_t>(i)]);
    }
    const ForwardOutput a = forward(p, fx.inputs, fx.grid);
    const ForwardOutput b = forward(p, x, VoxelGrid(pts, 0.5));
    for (Eigen::Index i = 0; i < 14; ++i) {
        const auto j = perm[static_cast<std::size_t>(i)];
        EXPECT_LT((b.logits.values.row(i) - a.logits.values.row(j)).norm(), 1e-12);
        EXPECT_LT((b.residual.vectors[static_cast<std::size_t>(i)] - a.residual.vectors[static_cast<std::size_t>(j)]).norm(),
                  1e-12);
    }
}

TEST(Forward, Deterministic) {
    const Fixture fx = make_fixture(16, 8, 0.4);
    NetworkConfig c = small_config();
    c.voxel_size = 0.4;
    const ModelParams p = ModelParams::initialize(c, 9);
    const ForwardOutput a = forward(p, fx.inputs, fx.grid), b = forward(p, fx.inputs, fx.grid);
    EXPECT_EQ(a.logits.values, b.logits.values);
    EXPECT_EQ(flow_matrix(a.residual), flow_matrix(b.residual));
}

TEST(Forward, ShapeErrors) {
    const Fixture fx = make_fixture(5, 1, 0.5);
    const ModelParams p = ModelParams::initialize(small_config(), 1);
    EXPECT_THROW(forward(p, random_matrix(5, 6, 1), fx.grid), Error);
    EXPECT_THROW(forward(p, random_matrix(4, 7, 1), fx.grid), Error);
    EXPECT_THROW(forward(p, fx.inputs, VoxelGrid(fx.pts, 0.3)), Error);
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
    const Fixture fx = make_fixture(10, 1, 0.5);
    const ModelParams p = ModelParams::initialize(small_config(), 2);
    const ForwardOutput out = forward(p, fx.inputs, fx.grid);
    const ParamGradients g = backward(p, out.trace, Matrix::Zero(10, 3), Matrix::Zero(10, 4));
    g.for_each([](const std::string& name, const Matrix& m) { EXPECT_EQ(m.norm(), 0.0) << name; });
}

TEST(Backward, LinearHeadIsOuterProduct) {
    const Fixture fx = make_fixture(10, 3, 0.5);
    const ModelParams p = ModelParams::initialize(small_config(), 4);
    const ForwardOutput out = forward(p, fx.inputs, fx.grid);
    const Matrix gf = random_matrix(10, 3, 5), gl = random_matrix(10, 4, 6);
    const ParamGradients g = backward(p, out.trace, gf, gl);
    EXPECT_LT((g.flow_w - gf.transpose() * out.trace.shared).norm(), 1e-14);
    EXPECT_LT((g.seg_w - gl.transpose() * out.trace.shared).norm(), 1e-14);
}

TEST(Backward, TraceMismatch) {
    const Fixture fx = make_fixture(10, 1, 0.5);
    const ModelParams p = ModelParams::initialize(small_config(), 2);
    const ForwardOutput out = forward(p, fx.inputs, fx.grid);
    const ModelParams other = ModelParams::initialize(small_config(1), 2);
    try {
        backward(other, out.trace, Matrix::Zero(10, 3), Matrix::Zero(10, 4));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::TraceMismatch);
    }
    EXPECT_THROW(backward(p, out.trace, Matrix::Zero(9, 3), Matrix::Zero(10, 4)), Error);
}

class BackwardFiniteDifference : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(BackwardFiniteDifference, EveryParameterMatches) {
    const std::uint64_t seed = GetParam();
    const Fixture fx = make_fixture(12, seed, 0.5);
    ModelParams p = ModelParams::initialize(small_config(2), seed + 100);
    const Matrix gf = random_matrix(12, 3, seed + 200), gl = random_matrix(12, 4, seed + 300);
    auto objective = [&]() {
        const ForwardOutput out = forward(p, fx.inputs, fx.grid);
        return (flow_matrix(out.residual).array() * gf.array()).sum() + (out.logits.values.array() * gl.array()).sum();
    };
    const ForwardOutput out = forward(p, fx.inputs, fx.grid);
    const ParamGradients analytic = backward(p, out.trace, gf, gl);
    std::vector<Matrix> grads;
    analytic.for_each([&](const std::string&, const Matrix& m) { grads.push_back(m); });
    std::size_t k = 0;
    p.for_each([&](const std::string& name, Matrix& m) {
        const Matrix numeric = numeric_gradient(m, objective);
        EXPECT_LT(relative_error(grads[k], numeric), 1e-4) << name << " seed " << seed;
        ++k;
    });
}

INSTANTIATE_TEST_SUITE_P(Seeds, BackwardFiniteDifference, ::testing::Values(1, 2, 3, 4, 5));

TEST(PredictLabels, ArgmaxWithLowIndexTies) {
    MaskLogits l;
    l.values.resize(3, 3);
    l.values << 2, 1, 0, 0, 0, 0, -1, 3, 2;
    EXPECT_EQ(predict_labels(l), (Labels{0, 0, 1}));
}

TEST(Checkpoint, RoundTripIsExact) {
    const ModelParams p = ModelParams::initialize(small_config(), 11);
    const auto bytes = encode_checkpoint(p);
    const ModelParams q = decode_checkpoint(bytes);
    EXPECT_TRUE(q.config == p.config);
    std::vector<Matrix> a, b;
    p.for_each([&](const std::string&, const Matrix& m) { a.push_back(m); });
    q.for_each([&](const std::string&, const Matrix& m) { b.push_back(m); });
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
    EXPECT_EQ(encode_checkpoint(q), bytes);

    const auto path = std::filesystem::temp_directory_path() / "sflow_ckpt_test.sfck";
    write_checkpoint(p, path);
    EXPECT_EQ(encode_checkpoint(read_checkpoint(path)), bytes);
}

TEST(Checkpoint, Corruption) {
    auto bytes = encode_checkpoint(ModelParams::initialize(small_config(), 1));
    auto bad = bytes;
    bad[0] = 'X';
    try {
        decode_checkpoint(bad);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::BadMagic);
    }
    bytes.resize(bytes.size() - 5);
    try {
        decode_checkpoint(bytes);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::TruncatedFile);
    }
}

TEST(Initialize, SeededAndBounded) {
    const ModelParams a = ModelParams::initialize(small_config(), 3), b = ModelParams::initialize(small_config(), 3);
    EXPECT_EQ(encode_checkpoint(a), encode_checkpoint(b));
    EXPECT_NE(encode_checkpoint(a), encode_checkpoint(ModelParams::initialize(small_config(), 4)));
    EXPECT_LE(a.enc_w1.cwiseAbs().maxCoeff(), 1.0 / std::sqrt(7.0));
    EXPECT_LE(a.fuse_w.cwiseAbs().maxCoeff(), 1.0 / std::sqrt(16.0));
}

TEST(NetworkInputs, Layout) {
    const Points pts = {Vec3(10, -20, 5), Vec3(1, 2, 3)};
    const Points cue = {Vec3(0.1, 0.2, 0.3), Vec3(-1, 0, 0)};
    const Matrix x = make_network_inputs(pts, cue, 10.0, {1, 0});
    ASSERT_EQ(x.cols(), 7);
    EXPECT_EQ(x.row(0), (Eigen::RowVectorXd(7) << 1, -2, 0.5, 0.1, 0.2, 0.3, 1).finished());
    EXPECT_EQ(x(1, 6), 0.0);
    EXPECT_THROW(make_network_inputs(pts, {Vec3::Zero()}, 10.0), Error);
}
