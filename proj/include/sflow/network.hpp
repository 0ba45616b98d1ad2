#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "sflow/error.hpp"
#include "sflow/geometry.hpp"
#include "sflow/scene_data.hpp"
#include "sflow/spatial_index.hpp"

namespace sflow {

using Matrix = Eigen::MatrixXd;

struct NetworkConfig {
    int input_dim = 7;   // scaled position (3) + motion cue (3) + coarse dynamic flag (1)
    int hidden = 64;     // d
    int iterations = 4;  // K
    int channels = 32;   // C, channel 0 = background
    double voxel_size = 0.3;
    double position_scale = 10.0;

    bool operator==(const NetworkConfig&) const = default;
};

/// z = sig(x Wz' + h Uz' + bz), r = sig(x Wr' + h Ur' + br),
/// n = tanh(x Wn' + bn + r * (h Un' + bhn)), h' = (1 - z) * n + z * h
struct GruWeights {
    Matrix wz, uz, bz;
    Matrix wr, ur, br;
    Matrix wn, un, bn, bhn;

    template <class Self, class Fn>
    static void visit(Self& self, const std::string& prefix, Fn&& fn) {
        fn(prefix + ".wz", self.wz);
        fn(prefix + ".uz", self.uz);
        fn(prefix + ".bz", self.bz);
        fn(prefix + ".wr", self.wr);
        fn(prefix + ".ur", self.ur);
        fn(prefix + ".br", self.br);
        fn(prefix + ".wn", self.wn);
        fn(prefix + ".un", self.un);
        fn(prefix + ".bn", self.bn);
        fn(prefix + ".bhn", self.bhn);
    }
};

/// All learnable tensors. Weights are (out x in); biases are (1 x out).
/// The same struct doubles as the gradient container.
struct ModelParams {
    NetworkConfig config;
    Matrix enc_w1, enc_b1, enc_w2, enc_b2;
    GruWeights gru_v, gru_p;
    Matrix fuse_w, fuse_b;
    Matrix flow_w, flow_b;
    Matrix seg_w, seg_b;

    template <class Fn>
    void for_each(Fn&& fn) {
        visit_all(*this, fn);
    }
    template <class Fn>
    void for_each(Fn&& fn) const {
        visit_all(*this, fn);
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for_each([&](const std::string&, const Matrix& m) { n += static_cast<std::size_t>(m.size()); });
        return n;
    }

    static ModelParams zeros(const NetworkConfig& cfg) {
        ModelParams p;
        p.config = cfg;
        const Eigen::Index d = cfg.hidden, in = cfg.input_dim, c = cfg.channels;
        p.enc_w1 = Matrix::Zero(d, in);
        p.enc_b1 = Matrix::Zero(1, d);
        p.enc_w2 = Matrix::Zero(d, d);
        p.enc_b2 = Matrix::Zero(1, d);
        for (GruWeights* g : {&p.gru_v, &p.gru_p}) {
            for (Matrix* w : {&g->wz, &g->uz, &g->wr, &g->ur, &g->wn, &g->un}) *w = Matrix::Zero(d, d);
            for (Matrix* b : {&g->bz, &g->br, &g->bn, &g->bhn}) *b = Matrix::Zero(1, d);
        }
        p.fuse_w = Matrix::Zero(d, 2 * d);
        p.fuse_b = Matrix::Zero(1, d);
        p.flow_w = Matrix::Zero(3, d);
        p.flow_b = Matrix::Zero(1, 3);
        p.seg_w = Matrix::Zero(c, d);
        p.seg_b = Matrix::Zero(1, c);
        return p;
    }

    /// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]; biases use their layer's fan-in.
    static ModelParams initialize(const NetworkConfig& cfg, std::uint64_t seed) {
        if (cfg.hidden < 1 || cfg.input_dim < 1 || cfg.channels < 2 || cfg.iterations < 0 || !(cfg.voxel_size > 0.0))
            throw Error(ErrorCode::InvalidArgument, "invalid network configuration");
        ModelParams p = zeros(cfg);
        std::mt19937_64 rng(seed);
        auto unit = [&rng]() { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
        auto fill = [&](Matrix& m, double fan_in) {
            const double bound = 1.0 / std::sqrt(fan_in);
            for (Eigen::Index j = 0; j < m.cols(); ++j)
                for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = (2.0 * unit() - 1.0) * bound;
        };
        const double d = cfg.hidden;
        fill(p.enc_w1, cfg.input_dim);
        fill(p.enc_b1, cfg.input_dim);
        fill(p.enc_w2, d);
        fill(p.enc_b2, d);
        for (GruWeights* g : {&p.gru_v, &p.gru_p})
            GruWeights::visit(*g, "", [&](const std::string&, Matrix& m) { fill(m, d); });
        fill(p.fuse_w, 2 * d);
        fill(p.fuse_b, 2 * d);
        fill(p.flow_w, d);
        fill(p.flow_b, d);
        fill(p.seg_w, d);
        fill(p.seg_b, d);
        return p;
    }

private:
    template <class Self, class Fn>
    static void visit_all(Self& self, Fn& fn) {
        fn(std::string("encoder.w1"), self.enc_w1);
        fn(std::string("encoder.b1"), self.enc_b1);
        fn(std::string("encoder.w2"), self.enc_w2);
        fn(std::string("encoder.b2"), self.enc_b2);
        GruWeights::visit(self.gru_v, "gru_v", fn);
        GruWeights::visit(self.gru_p, "gru_p", fn);
        fn(std::string("fuse.w"), self.fuse_w);
        fn(std::string("fuse.b"), self.fuse_b);
        fn(std::string("head_flow.w"), self.flow_w);
        fn(std::string("head_flow.b"), self.flow_b);
        fn(std::string("head_seg.w"), self.seg_w);
        fn(std::string("head_seg.b"), self.seg_b);
    }
};

using ParamGradients = ModelParams;

/// Per-point encoder input: position / position_scale, the motion cue, and
/// the coarse dynamic flag (1 dynamic, 0 static). `dynamic` may be empty,
/// which means all static.
inline Matrix make_network_inputs(const Points& points, const Points& motion_cue, double position_scale,
                                  const std::vector<char>& dynamic = {}) {
    if (motion_cue.size() != points.size()) throw Error(ErrorCode::ShapeMismatch, "motion cue length differs");
    if (!dynamic.empty() && dynamic.size() != points.size())
        throw Error(ErrorCode::ShapeMismatch, "dynamic flag length differs");
    Matrix x(static_cast<Eigen::Index>(points.size()), 7);
    for (std::size_t i = 0; i < points.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        x.block<1, 3>(r, 0) = (points[i] / position_scale).transpose();
        x.block<1, 3>(r, 3) = motion_cue[i].transpose();
        x(r, 6) = !dynamic.empty() && dynamic[i] ? 1.0 : 0.0;
    }
    return x;
}

/// Dense voxel ids (first-appearance order) for every point of a grid.
struct VoxelMembership {
    std::vector<int> voxel_of_point;
    std::vector<int> counts;

    int voxel_count() const { return static_cast<int>(counts.size()); }

    static VoxelMembership from_grid(const VoxelGrid& grid) {
        VoxelMembership m;
        std::unordered_map<VoxelKey, int, VoxelKeyHash> ids;
        m.voxel_of_point.resize(grid.size());
        for (std::size_t i = 0; i < grid.size(); ++i) {
            auto [it, inserted] = ids.try_emplace(grid.cell_of(static_cast<int>(i)), static_cast<int>(m.counts.size()));
            if (inserted) m.counts.push_back(0);
            m.voxel_of_point[i] = it->second;
            ++m.counts[static_cast<std::size_t>(it->second)];
        }
        return m;
    }
};

struct GruCache {
    Matrix x, h, z, r, n, hn;
};

struct ForwardTrace {
    NetworkConfig config;
    Matrix inputs;
    VoxelMembership voxels;
    Matrix enc_hidden;            // tanh(x W1' + b1)
    std::vector<Matrix> features;  // f^(0) .. f^(K)
    std::vector<Matrix> voxel_states;  // h^(0) .. h^(K)
    std::vector<GruCache> gru_v, gru_p;
    Matrix fused_input;  // [f^(0), f^(K)]
    Matrix shared;       // f_shared
};

struct ForwardOutput {
    FlowField residual;
    MaskLogits logits;
    ForwardTrace trace;
};

namespace detail {

inline void add_bias(Matrix& m, const Matrix& b) { m.rowwise() += b.row(0); }

inline Matrix sigmoid(const Matrix& a) {
    return a.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

inline Matrix gru_forward(const GruWeights& g, const Matrix& h, const Matrix& x, GruCache& cache) {
    Matrix az = x * g.wz.transpose() + h * g.uz.transpose();
    add_bias(az, g.bz);
    Matrix ar = x * g.wr.transpose() + h * g.ur.transpose();
    add_bias(ar, g.br);
    cache.z = sigmoid(az);
    cache.r = sigmoid(ar);
    cache.hn = h * g.un.transpose();
    add_bias(cache.hn, g.bhn);
    Matrix an = x * g.wn.transpose();
    add_bias(an, g.bn);
    an.array() += cache.r.array() * cache.hn.array();
    cache.n = an.array().tanh().matrix();
    cache.x = x;
    cache.h = h;
    Matrix out = ((1.0 - cache.z.array()) * cache.n.array() + cache.z.array() * h.array()).matrix();
    return out;
}

/// Accumulates weight gradients into `grad`; returns (dh, dx).
inline std::pair<Matrix, Matrix> gru_backward(const GruWeights& g, const GruCache& c, const Matrix& dout,
                                              GruWeights& grad) {
    const auto z = c.z.array(), r = c.r.array(), n = c.n.array();
    Matrix dz = (dout.array() * (c.h.array() - n)).matrix();
    Matrix dn = (dout.array() * (1.0 - z)).matrix();
    Matrix dh = (dout.array() * z).matrix();

    Matrix dan = (dn.array() * (1.0 - n * n)).matrix();
    Matrix dr = (dan.array() * c.hn.array()).matrix();
    Matrix dhn = (dan.array() * r).matrix();
    Matrix daz = (dz.array() * z * (1.0 - z)).matrix();
    Matrix dar = (dr.array() * r * (1.0 - r)).matrix();

    grad.wz.noalias() += daz.transpose() * c.x;
    grad.uz.noalias() += daz.transpose() * c.h;
    grad.bz += daz.colwise().sum();
    grad.wr.noalias() += dar.transpose() * c.x;
    grad.ur.noalias() += dar.transpose() * c.h;
    grad.br += dar.colwise().sum();
    grad.wn.noalias() += dan.transpose() * c.x;
    grad.bn += dan.colwise().sum();
    grad.un.noalias() += dhn.transpose() * c.h;
    grad.bhn += dhn.colwise().sum();

    Matrix dx = daz * g.wz + dar * g.wr + dan * g.wn;
    dh.noalias() += daz * g.uz + dar * g.ur + dhn * g.un;
    return {std::move(dh), std::move(dx)};
}

}  // namespace detail

/// f0 = MLP(x); h_v^0 = 0; for k < K: h_v^{k+1} = GRU_v(h_v^k, mean_{i in v} f_i^k),
/// f_i^{k+1} = GRU_p(f_i^k, h_{v(i)}^{k+1}); f_shared = tanh(W [f0; fK] + b);
/// residual flow and raw logits are linear heads on f_shared.
inline ForwardOutput forward(const ModelParams& params, const Matrix& inputs, const VoxelGrid& grid) {
    const NetworkConfig& cfg = params.config;
    if (inputs.cols() != cfg.input_dim)
        throw Error(ErrorCode::ShapeMismatch, "inputs have " + std::to_string(inputs.cols()) + " columns, model expects " +
                                                  std::to_string(cfg.input_dim));
    if (static_cast<std::size_t>(inputs.rows()) != grid.size() || inputs.rows() == 0)
        throw Error(ErrorCode::ShapeMismatch, "grid and inputs disagree on the point count");
    if (grid.cell_size() != cfg.voxel_size)
        throw Error(ErrorCode::ShapeMismatch, "grid cell size differs from the model voxel size");

    ForwardOutput out;
    ForwardTrace& tr = out.trace;
    tr.config = cfg;
    tr.inputs = inputs;
    tr.voxels = VoxelMembership::from_grid(grid);
    const Eigen::Index n = inputs.rows();
    const Eigen::Index d = cfg.hidden;
    const int V = tr.voxels.voxel_count();

    Matrix a1 = inputs * params.enc_w1.transpose();
    detail::add_bias(a1, params.enc_b1);
    tr.enc_hidden = a1.array().tanh().matrix();
    Matrix f0 = tr.enc_hidden * params.enc_w2.transpose();
    detail::add_bias(f0, params.enc_b2);
    tr.features.push_back(std::move(f0));
    tr.voxel_states.push_back(Matrix::Zero(V, d));

    for (int k = 0; k < cfg.iterations; ++k) {
        const Matrix& fk = tr.features.back();
        Matrix pooled = Matrix::Zero(V, d);
        for (Eigen::Index i = 0; i < n; ++i) pooled.row(tr.voxels.voxel_of_point[static_cast<std::size_t>(i)]) += fk.row(i);
        for (int v = 0; v < V; ++v) pooled.row(v) /= static_cast<double>(tr.voxels.counts[static_cast<std::size_t>(v)]);

        tr.gru_v.emplace_back();
        Matrix hv = detail::gru_forward(params.gru_v, tr.voxel_states.back(), pooled, tr.gru_v.back());

        Matrix gathered(n, d);
        for (Eigen::Index i = 0; i < n; ++i) gathered.row(i) = hv.row(tr.voxels.voxel_of_point[static_cast<std::size_t>(i)]);
        tr.voxel_states.push_back(std::move(hv));

        tr.gru_p.emplace_back();
        Matrix next = detail::gru_forward(params.gru_p, fk, gathered, tr.gru_p.back());
        tr.features.push_back(std::move(next));
    }

    tr.fused_input.resize(n, 2 * d);
    tr.fused_input.leftCols(d) = tr.features.front();
    tr.fused_input.rightCols(d) = tr.features.back();
    Matrix pre = tr.fused_input * params.fuse_w.transpose();
    detail::add_bias(pre, params.fuse_b);
    tr.shared = pre.array().tanh().matrix();

    Matrix flow = tr.shared * params.flow_w.transpose();
    detail::add_bias(flow, params.flow_b);
    out.logits.values = tr.shared * params.seg_w.transpose();
    detail::add_bias(out.logits.values, params.seg_b);

    out.residual.kind = FlowKind::Residual;
    out.residual.vectors.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) out.residual.vectors[static_cast<std::size_t>(i)] = flow.row(i).transpose();
    return out;
}

/// Exact reverse-mode gradient of the forward map for upstream gradients on
/// the residual flow (N x 3) and the logits (N x C).
inline ParamGradients backward(const ModelParams& params, const ForwardTrace& tr, const Matrix& grad_flow,
                               const Matrix& grad_logits) {
    const NetworkConfig& cfg = params.config;
    const Eigen::Index n = tr.inputs.rows();
    const Eigen::Index d = cfg.hidden;
    if (!(tr.config == cfg) || tr.features.size() != static_cast<std::size_t>(cfg.iterations) + 1)
        throw Error(ErrorCode::TraceMismatch, "trace was produced by a different model configuration");
    if (grad_flow.rows() != n || grad_flow.cols() != 3 || grad_logits.rows() != n || grad_logits.cols() != cfg.channels)
        throw Error(ErrorCode::TraceMismatch, "upstream gradient shapes do not match the trace");

    ParamGradients g = ModelParams::zeros(cfg);

    g.flow_w.noalias() = grad_flow.transpose() * tr.shared;
    g.flow_b = grad_flow.colwise().sum();
    g.seg_w.noalias() = grad_logits.transpose() * tr.shared;
    g.seg_b = grad_logits.colwise().sum();
    Matrix d_shared = grad_flow * params.flow_w + grad_logits * params.seg_w;

    Matrix d_pre = (d_shared.array() * (1.0 - tr.shared.array().square())).matrix();
    g.fuse_w.noalias() = d_pre.transpose() * tr.fused_input;
    g.fuse_b = d_pre.colwise().sum();
    Matrix d_fused = d_pre * params.fuse_w;

    Matrix d_f = d_fused.rightCols(d);  // gradient w.r.t. f^(k), starting at k = K
    const int V = tr.voxels.voxel_count();
    Matrix d_hv = Matrix::Zero(V, d);
    for (int k = cfg.iterations - 1; k >= 0; --k) {
        auto [d_fk, d_gathered] = detail::gru_backward(params.gru_p, tr.gru_p[static_cast<std::size_t>(k)], d_f, g.gru_p);
        for (Eigen::Index i = 0; i < n; ++i) d_hv.row(tr.voxels.voxel_of_point[static_cast<std::size_t>(i)]) += d_gathered.row(i);

        auto [d_hv_prev, d_pooled] = detail::gru_backward(params.gru_v, tr.gru_v[static_cast<std::size_t>(k)], d_hv, g.gru_v);
        for (Eigen::Index i = 0; i < n; ++i) {
            const int v = tr.voxels.voxel_of_point[static_cast<std::size_t>(i)];
            d_fk.row(i) += d_pooled.row(v) / static_cast<double>(tr.voxels.counts[static_cast<std::size_t>(v)]);
        }
        d_f = std::move(d_fk);
        d_hv = std::move(d_hv_prev);
    }
    d_f += d_fused.leftCols(d);

    g.enc_w2.noalias() = d_f.transpose() * tr.enc_hidden;
    g.enc_b2 = d_f.colwise().sum();
    Matrix d_a1 = ((d_f * params.enc_w2).array() * (1.0 - tr.enc_hidden.array().square())).matrix();
    g.enc_w1.noalias() = d_a1.transpose() * tr.inputs;
    g.enc_b1 = d_a1.colwise().sum();
    return g;
}

/// Row-wise argmax; ties go to the lower channel.
inline Labels predict_labels(const MaskLogits& logits) {
    Labels out(static_cast<std::size_t>(logits.rows()));
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index c = 1; c < logits.channels(); ++c)
            if (logits.values(i, c) > logits.values(i, best)) best = c;
        out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return out;
}

// ---------------------------------------------------------------------------
// SFCK checkpoint:
//   "SFCK" | u32 version=1 | u32 tensor_count | tensors...
//   tensor: u32 name_len | name bytes (UTF-8) | u32 rank | rank * u32 dims
//           | prod(dims) f64 values, row-major
// The first tensor is "config" = [input_dim, hidden, iterations, channels,
// voxel_size, position_scale].
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 4> kCheckpointMagic = {'S', 'F', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params) {
    detail::ByteWriter w;
    w.raw(kCheckpointMagic.data(), kCheckpointMagic.size());
    w.put<std::uint32_t>(kCheckpointVersion);
    std::vector<std::pair<std::string, Matrix>> tensors;
    const NetworkConfig& c = params.config;
    Matrix cfg(1, 6);
    cfg << c.input_dim, c.hidden, c.iterations, c.channels, c.voxel_size, c.position_scale;
    tensors.emplace_back("config", cfg);
    params.for_each([&](const std::string& name, const Matrix& m) { tensors.emplace_back(name, m); });
    w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, m] : tensors) {
        w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
        w.raw(name.data(), name.size());
        w.put<std::uint32_t>(2);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(m.rows()));
        w.put<std::uint32_t>(static_cast<std::uint32_t>(m.cols()));
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) w.put<double>(m(i, j));
    }
    return std::move(w.bytes());
}

inline ModelParams decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    detail::ByteReader r(bytes);
    std::array<char, 4> magic{};
    if (bytes.size() < magic.size() || (r.raw(magic.data(), magic.size()), magic != kCheckpointMagic))
        throw Error(ErrorCode::BadMagic, "expected \"SFCK\" at offset 0");
    if (r.get<std::uint32_t>() != kCheckpointVersion) throw Error(ErrorCode::BadMagic, "unsupported checkpoint version");
    const auto count = r.get<std::uint32_t>();
    std::map<std::string, Matrix> tensors;
    for (std::uint32_t t = 0; t < count; ++t) {
        const auto len = r.get<std::uint32_t>();
        std::string name(len, '\0');
        r.raw(name.data(), len);
        const auto rank = r.get<std::uint32_t>();
        std::vector<std::uint32_t> dims(rank);
        for (auto& dim : dims) dim = r.get<std::uint32_t>();
        const Eigen::Index rows = rank >= 1 ? dims[0] : 1;
        Eigen::Index cols = 1;
        for (std::uint32_t a = 1; a < rank; ++a) cols *= dims[a];
        Matrix m(rows, cols);
        for (Eigen::Index i = 0; i < rows; ++i)
            for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = r.get<double>();
        tensors[name] = std::move(m);
    }
    auto cfg_it = tensors.find("config");
    if (cfg_it == tensors.end() || cfg_it->second.size() != 6)
        throw Error(ErrorCode::ShapeMismatch, "checkpoint lacks a config tensor");
    const Matrix& cm = cfg_it->second;
    NetworkConfig cfg;
    cfg.input_dim = static_cast<int>(cm(0, 0));
    cfg.hidden = static_cast<int>(cm(0, 1));
    cfg.iterations = static_cast<int>(cm(0, 2));
    cfg.channels = static_cast<int>(cm(0, 3));
    cfg.voxel_size = cm(0, 4);
    cfg.position_scale = cm(0, 5);
    ModelParams p = ModelParams::zeros(cfg);
    p.for_each([&](const std::string& name, Matrix& m) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw Error(ErrorCode::ShapeMismatch, "checkpoint lacks tensor " + name);
        if (it->second.rows() != m.rows() || it->second.cols() != m.cols())
            throw Error(ErrorCode::ShapeMismatch, "tensor " + name + " has the wrong shape");
        m = it->second;
    });
    return p;
}

inline void write_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
    detail::write_file_bytes(path, encode_checkpoint(params));
}

inline ModelParams read_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(detail::read_file_bytes(path));
}

}  // namespace sflow
