#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sflow/coarse_labeler.hpp"
#include "sflow/error.hpp"
#include "sflow/geometry.hpp"
#include "sflow/losses.hpp"
#include "sflow/metrics.hpp"
#include "sflow/network.hpp"
#include "sflow/rigid_kinematics.hpp"
#include "sflow/scene_data.hpp"
#include "sflow/spatial_index.hpp"

namespace sflow {

inline constexpr double kDivergenceLimit = 1e6;

struct TrainConfig {
    int epochs = 20;
    double learning_rate = 0.05;
    LossWeights weights;
    NetworkConfig model;
    LabelerConfig labeler;
    std::uint64_t seed = 0;
    bool shuffle = false;  // seeded per-epoch permutation of the pair order

    void validate() const {
        if (epochs < 1) throw Error(ErrorCode::InvalidArgument, "epochs must be >= 1");
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
            throw Error(ErrorCode::InvalidArgument, "learning_rate must be finite and >= 0");
        weights.validate();
        if (model.hidden < 1 || model.channels < 2 || model.iterations < 0 || !(model.voxel_size > 0.0) ||
            !(model.position_scale > 0.0) || model.input_dim != 7)
            throw Error(ErrorCode::InvalidArgument, "invalid model dimensions");
        if (!(labeler.occupancy_cell > 0.0) || !(labeler.eps > 0.0) || labeler.min_pts < 1 ||
            !(labeler.match_radius > 0.0) || !(labeler.ratio_threshold >= 0.0))
            throw Error(ErrorCode::InvalidArgument, "invalid labeler parameters");
    }
};

// ---------------------------------------------------------------------------
// Per-pair precomputation (done once, before the epoch loop)
// ---------------------------------------------------------------------------

struct CoarseResult {
    RigidTransform ego;  // refined on the static set
    DynamicMask mask;
    ClusterSet clusters;
    PseudoLabels pseudo;
};

/// Ray-cast split, clustering, and static-set ICP. Without a pose hint a
/// full-cloud ICP supplies the alignment the ray cast needs. `refined`
/// replaces the clustering when the caller already ran a temporal pass.
inline CoarseResult coarse_stage(const FramePair& pair, const LabelerConfig& cfg,
                                 const ClusterSet* refined = nullptr) {
    pair.source.validate();
    pair.target.validate();
    CoarseResult out;
    FramePair hinted = pair;
    if (!hinted.ego_pose_hint) {
        if (pair.source.size() >= 10 && pair.target.size() >= 10)
            hinted.ego_pose_hint = icp_ego_motion(pair.source.points, pair.target.points).transform;
        else
            hinted.ego_pose_hint = RigidTransform::identity();
    }
    out.mask = raycast_dynamic_mask(hinted, cfg.occupancy_cell, cfg.ratio_threshold);
    if (refined) {
        if (refined->size() != pair.source.size())
            throw Error(ErrorCode::LengthMismatch, "refined clusters do not match the source cloud");
        out.clusters = *refined;
    } else {
        out.clusters = cluster_dynamic(pair.source.points, out.mask, cfg.eps, cfg.min_pts);
    }
    out.pseudo = assemble_pseudo_labels(out.mask, out.clusters, pair.source.frame_index);

    Points static_pts;
    for (std::size_t i = 0; i < pair.source.size(); ++i)
        if (out.pseudo.labels[i] == 0) static_pts.push_back(pair.source.points[i]);
    out.ego = *hinted.ego_pose_hint;
    if (static_pts.size() >= 10 && pair.target.size() >= 10)
        out.ego = icp_ego_motion(static_pts, pair.target.points, IcpOptions{}, out.ego).transform;
    return out;
}

/// Per-point motion cue fed to the network, in target coordinates:
///  - static points: offset from the ego-compensated point to its nearest
///    target point (about zero for well-aligned static structure);
///  - dynamic points: offset to the nearest target point that the reverse
///    ray cast also calls dynamic;
///  - members of a coarse instance: the displacement given by registering
///    the instance onto the nearest dynamic cluster of the target.
inline Points motion_cue(const Points& source, const Points& target, const RigidTransform& ego,
                         const CoarseResult* coarse = nullptr, const DynamicMask* target_mask = nullptr,
                         const LabelerConfig& cfg = {}) {
    const VoxelGrid index(target, 1.0);
    Points cue(source.size());
    Points moved(source.size());
    for (std::size_t i = 0; i < source.size(); ++i) {
        moved[i] = ego.apply(source[i]);
        cue[i] = target[static_cast<std::size_t>(nearest(index, moved[i]).index)] - moved[i];
    }
    if (!coarse || !target_mask) return cue;

    Points dynamic_targets;
    for (std::size_t j = 0; j < target.size(); ++j)
        if (target_mask->flags[j]) dynamic_targets.push_back(target[j]);
    if (dynamic_targets.empty()) return cue;
    const VoxelGrid dynamic_index(dynamic_targets, 1.0);
    for (std::size_t i = 0; i < source.size(); ++i)
        if (coarse->mask.flags[i])
            cue[i] = dynamic_targets[static_cast<std::size_t>(nearest(dynamic_index, moved[i]).index)] - moved[i];

    const ClusterSet target_clusters = dbscan(dynamic_targets, cfg.eps, cfg.min_pts);
    const int kt = target_clusters.cluster_count();
    std::vector<Points> target_members(static_cast<std::size_t>(kt));
    for (std::size_t j = 0; j < dynamic_targets.size(); ++j)
        if (target_clusters.assignments[j] >= 1)
            target_members[static_cast<std::size_t>(target_clusters.assignments[j] - 1)].push_back(dynamic_targets[j]);
    std::vector<Vec3> target_centroids;
    for (const auto& m : target_members) {
        Vec3 c = Vec3::Zero();
        for (const auto& v : m) c += v;
        target_centroids.push_back(c / static_cast<double>(m.size()));
    }

    const int ks = coarse->clusters.cluster_count();
    for (int c = 1; c <= ks; ++c) {
        std::vector<std::size_t> idx;
        Points q;
        Vec3 centroid = Vec3::Zero();
        for (std::size_t i = 0; i < source.size(); ++i) {
            if (coarse->pseudo.labels[i] != c) continue;
            idx.push_back(i);
            q.push_back(moved[i]);
            centroid += moved[i];
        }
        if (q.size() < 10) continue;
        centroid /= static_cast<double>(q.size());
        int best = -1;
        double best_d = std::numeric_limits<double>::infinity();
        for (int t = 0; t < kt; ++t) {
            const double d = (target_centroids[static_cast<std::size_t>(t)] - centroid).norm();
            if (d < best_d && target_members[static_cast<std::size_t>(t)].size() >= 10) {
                best_d = d;
                best = t;
            }
        }
        if (best < 0) continue;
        RigidTransform init = RigidTransform::identity();
        init.translation = target_centroids[static_cast<std::size_t>(best)] - centroid;
        const RigidTransform T =
            icp_ego_motion(q, target_members[static_cast<std::size_t>(best)], IcpOptions{}, init).transform;
        for (std::size_t m = 0; m < idx.size(); ++m) cue[idx[m]] = T.apply(q[m]) - q[m];
    }
    return cue;
}

struct PreparedPair {
    Points source, target;
    CoarseResult coarse;
    Points ego_flow;
    DynamicMask target_mask;  // reverse ray cast, target against source
    Matrix inputs;
    std::optional<VoxelGrid> grid;
    NeighborLists neighbors;
};

inline PreparedPair prepare_pair(const FramePair& pair, const TrainConfig& cfg, const ClusterSet* refined = nullptr) {
    PreparedPair p;
    p.source = pair.source.points;
    p.target = pair.target.points;
    p.coarse = coarse_stage(pair, cfg.labeler, refined);
    p.ego_flow = ego_flow(p.source, p.coarse.ego).vectors;
    FramePair reverse;
    reverse.source = pair.target;
    reverse.target = pair.source;
    reverse.ego_pose_hint = p.coarse.ego.inverse();
    p.target_mask = raycast_dynamic_mask(reverse, cfg.labeler.occupancy_cell, cfg.labeler.ratio_threshold);
    const Points cue = motion_cue(p.source, p.target, p.coarse.ego, &p.coarse, &p.target_mask, cfg.labeler);
    p.inputs = make_network_inputs(p.source, cue, cfg.model.position_scale, p.coarse.mask.flags);
    p.grid.emplace(p.source, cfg.model.voxel_size);
    p.neighbors = NeighborLists::build(p.source, cfg.weights.neighbors, cfg.weights.delta);
    return p;
}

// ---------------------------------------------------------------------------
// Frame sequences
// ---------------------------------------------------------------------------

/// Frames f_0 .. f_{n-1} give pairs (f_t, f_{t+1}); frame indices are
/// renumbered 0..n-1 so every pair validates.
inline std::vector<FramePair> pairs_of_sequence(std::vector<PointCloud> frames) {
    std::vector<FramePair> pairs;
    for (std::size_t t = 0; t < frames.size(); ++t) frames[t].frame_index = static_cast<std::int64_t>(t);
    for (std::size_t t = 0; t + 1 < frames.size(); ++t) {
        FramePair p;
        p.source = frames[t];
        p.target = frames[t + 1];
        pairs.push_back(std::move(p));
    }
    return pairs;
}

/// Coarse clusters for every pair of a sequence, refined against the
/// clusters of the neighbouring pairs expressed in the current frame. A
/// pair with no neighbour keeps its raw clusters.
inline std::vector<CoarseResult> label_sequence(const std::vector<FramePair>& pairs, const LabelerConfig& cfg) {
    std::vector<CoarseResult> raw;
    raw.reserve(pairs.size());
    for (const auto& p : pairs) raw.push_back(coarse_stage(p, cfg));
    if (pairs.size() < 2) return raw;

    std::vector<CoarseResult> out;
    out.reserve(pairs.size());
    for (std::size_t t = 0; t < pairs.size(); ++t) {
        Points prev_pts, next_pts;
        ClusteredFrame prev, next;
        if (t > 0) {
            // frame t-1 carried into frame t by the ego motion of pair t-1
            prev_pts = raw[t - 1].ego.apply(pairs[t - 1].source.points);
            prev = {prev_pts, &raw[t - 1].clusters};
        }
        if (t + 1 < pairs.size()) {
            next_pts = raw[t].ego.inverse().apply(pairs[t + 1].source.points);
            next = {next_pts, &raw[t + 1].clusters};
        }
        const ClusteredFrame curr{pairs[t].source.points, &raw[t].clusters};
        const ClusterSet refined =
            temporal_refine(t > 0 ? &prev : nullptr, curr, t + 1 < pairs.size() ? &next : nullptr, cfg.match_radius);
        out.push_back(coarse_stage(pairs[t], cfg, &refined));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct EpochLoss {
    int epoch = 0;
    double total = 0.0, cd = 0.0, bf = 0.0, rigid = 0.0, smc = 0.0, dom = 0.0;
};

struct TrainResult {
    ModelParams params;
    std::vector<EpochLoss> curve;
};

inline void gradient_step(ModelParams& params, const ParamGradients& grad, double lr) {
    std::vector<const Matrix*> g;
    grad.for_each([&](const std::string&, const Matrix& m) { g.push_back(&m); });
    std::size_t k = 0;
    params.for_each([&](const std::string&, Matrix& m) { m -= lr * *g[k++]; });
}

inline LossBreakdown evaluate_loss(const PreparedPair& p, const ForwardOutput& fwd, const LossWeights& w) {
    LossInputs in;
    in.source = &p.source;
    in.target = &p.target;
    in.ego_flow = &p.ego_flow;
    in.residual = &fwd.residual.vectors;
    in.logits = &fwd.logits;
    in.pseudo = &p.coarse.pseudo.labels;
    in.neighbors = &p.neighbors;
    return total_loss(in, w);
}

/// Plain gradient descent, one update per pair, pairs in dataset order
/// unless cfg.shuffle. The curve holds the per-epoch mean of the losses
/// seen before each update.
inline TrainResult train_prepared(const std::vector<PreparedPair>& pairs, const TrainConfig& cfg,
                                  std::optional<ModelParams> init = std::nullopt) {
    cfg.validate();
    if (pairs.empty()) throw Error(ErrorCode::InvalidArgument, "training needs at least one pair");
    TrainResult out;
    out.params = init ? std::move(*init) : ModelParams::initialize(cfg.model, cfg.seed);
    if (!(out.params.config == cfg.model))
        throw Error(ErrorCode::ShapeMismatch, "initial parameters do not match the configured model");

    std::vector<std::size_t> order(pairs.size());
    std::mt19937_64 shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        if (cfg.shuffle) {
            for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng() % i]);
        }
        EpochLoss e;
        e.epoch = epoch;
        for (std::size_t idx : order) {
            const PreparedPair& p = pairs[idx];
            const ForwardOutput fwd = forward(out.params, p.inputs, *p.grid);
            const LossBreakdown lb = evaluate_loss(p, fwd, cfg.weights);
            if (!std::isfinite(lb.total) || lb.total > kDivergenceLimit)
                throw Error(ErrorCode::DivergenceDetected,
                            "loss " + std::to_string(lb.total) + " at epoch " + std::to_string(epoch));
            e.total += lb.total;
            e.cd += lb.cd;
            e.bf += lb.bf;
            e.rigid += lb.rigid;
            e.smc += lb.smc;
            e.dom += lb.dom;
            if (cfg.learning_rate == 0.0) continue;
            const ParamGradients g = backward(out.params, fwd.trace, lb.grad_residual, lb.grad_logits);
            gradient_step(out.params, g, cfg.learning_rate);
        }
        const double k = static_cast<double>(pairs.size());
        for (double* v : {&e.total, &e.cd, &e.bf, &e.rigid, &e.smc, &e.dom}) *v /= k;
        out.curve.push_back(e);
    }
    return out;
}

inline TrainResult train(const std::vector<FramePair>& pairs, const TrainConfig& cfg) {
    cfg.validate();
    if (pairs.empty()) throw Error(ErrorCode::InvalidArgument, "training needs at least one pair");
    std::vector<PreparedPair> prepared;
    prepared.reserve(pairs.size());
    for (const auto& pr : pairs) prepared.push_back(prepare_pair(pr, cfg));
    return train_prepared(prepared, cfg);
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

struct Inference {
    RigidTransform ego_transform;
    FlowField ego, residual, total;
    MaskLogits logits;
    Labels labels;  // argmax of the logits
    PseudoLabels pseudo;
};

inline Inference infer_prepared(const ModelParams& params, const PreparedPair& p) {
    Inference out;
    out.ego_transform = p.coarse.ego;
    out.ego = FlowField{p.ego_flow, FlowKind::Ego};
    ForwardOutput fwd = forward(params, p.inputs, *p.grid);
    out.residual = std::move(fwd.residual);
    out.total = compose_flow(out.ego, out.residual);
    out.logits = std::move(fwd.logits);
    out.labels = predict_labels(out.logits);
    out.pseudo = p.coarse.pseudo;
    return out;
}

inline Inference infer(const ModelParams& params, const FramePair& pair, const LabelerConfig& labeler = {},
                       const LossWeights& weights = {}) {
    TrainConfig cfg;
    cfg.model = params.config;
    cfg.labeler = labeler;
    cfg.weights = weights;
    return infer_prepared(params, prepare_pair(pair, cfg));
}

// ---------------------------------------------------------------------------
// Evaluation and the loss-toggle grid
// ---------------------------------------------------------------------------

struct EvalSummary {
    EpeReport epe;   // pooled over all points of all pairs
    SegReport seg;   // mean over pairs
};

/// Pairs must carry gt_flow and gt_labels on the source frame. With
/// `ego_only` the residual is ignored, giving the F_ego baseline.
inline EvalSummary evaluate(const ModelParams& params, const std::vector<PreparedPair>& prepared,
                            const std::vector<FramePair>& pairs, bool ego_only = false) {
    if (prepared.size() != pairs.size()) throw Error(ErrorCode::LengthMismatch, "prepared and raw pair counts differ");
    EpeAccumulator acc;
    std::vector<SegReport> segs;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const PointCloud& src = pairs[i].source;
        if (!src.gt_flow || !src.gt_labels) throw Error(ErrorCode::InvalidArgument, "evaluation pair lacks ground truth");
        const Inference inf = infer_prepared(params, prepared[i]);
        const Points& pred = ego_only ? inf.ego.vectors : inf.total.vectors;
        acc.add(epe_accumulate(src.points, pred, *src.gt_flow, *src.gt_labels));
        segs.push_back(seg_metrics(inf.labels, *src.gt_labels));
    }
    return {acc.report(), mean_seg(segs)};
}

struct AblationRow {
    int id = 0;
    bool cd = false, bf = false, rigid = false, smc = false, dom = false;
    EvalSummary eval;
    double final_loss = 0.0;
};

/// Rows 1..5: Chamfer alone, then BF, Rigid, SMC, DOM enabled cumulatively
/// at the weights of `base`.
inline std::vector<std::pair<AblationRow, LossWeights>> ablation_grid(const LossWeights& base) {
    std::vector<std::pair<AblationRow, LossWeights>> rows;
    for (int id = 1; id <= 5; ++id) {
        AblationRow r;
        r.id = id;
        r.cd = true;
        r.bf = id >= 2;
        r.rigid = id >= 3;
        r.smc = id >= 4;
        r.dom = id >= 5;
        LossWeights w = base;
        if (!r.bf) w.lambda_bf = 0.0;
        if (!r.rigid) w.lambda_rigid = 0.0;
        if (!r.smc) w.lambda_smc = 0.0;
        if (!r.dom) w.lambda_dom = 0.0;
        rows.emplace_back(r, w);
    }
    return rows;
}

inline std::vector<AblationRow> run_ablation(const std::vector<PreparedPair>& train_set,
                                             const std::vector<PreparedPair>& heldout_prepared,
                                             const std::vector<FramePair>& heldout, const TrainConfig& cfg) {
    std::vector<AblationRow> out;
    for (auto [row, w] : ablation_grid(cfg.weights)) {
        TrainConfig c = cfg;
        c.weights = w;
        const TrainResult tr = train_prepared(train_set, c);
        row.eval = evaluate(tr.params, heldout_prepared, heldout);
        row.final_loss = tr.curve.back().total;
        out.push_back(row);
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const NetworkConfig& c) {
    j = {{"input_dim", c.input_dim},   {"hidden", c.hidden},         {"iterations", c.iterations},
         {"channels", c.channels},     {"voxel_size", c.voxel_size}, {"position_scale", c.position_scale}};
}

inline void from_json(const nlohmann::json& j, NetworkConfig& c) {
    const NetworkConfig d;
    c.input_dim = j.value("input_dim", d.input_dim);
    c.hidden = j.value("hidden", d.hidden);
    c.iterations = j.value("iterations", d.iterations);
    c.channels = j.value("channels", d.channels);
    c.voxel_size = j.value("voxel_size", d.voxel_size);
    c.position_scale = j.value("position_scale", d.position_scale);
}

inline void to_json(nlohmann::json& j, const LabelerConfig& c) {
    j = {{"occupancy_cell", c.occupancy_cell}, {"ratio_threshold", c.ratio_threshold}, {"eps", c.eps},
         {"min_pts", c.min_pts},               {"match_radius", c.match_radius}};
}

inline void from_json(const nlohmann::json& j, LabelerConfig& c) {
    const LabelerConfig d;
    c.occupancy_cell = j.value("occupancy_cell", d.occupancy_cell);
    c.ratio_threshold = j.value("ratio_threshold", d.ratio_threshold);
    c.eps = j.value("eps", d.eps);
    c.min_pts = j.value("min_pts", d.min_pts);
    c.match_radius = j.value("match_radius", d.match_radius);
}

inline void to_json(nlohmann::json& j, const LossWeights& w) {
    j = {{"lambda_cd", w.lambda_cd},
         {"lambda_bf", w.lambda_bf},
         {"lambda_rigid", w.lambda_rigid},
         {"lambda_smc", w.lambda_smc},
         {"lambda_dom", w.lambda_dom},
         {"alpha", w.alpha},
         {"gamma", w.gamma},
         {"beta", w.beta},
         {"w_knn", w.w_knn},
         {"w_ball", w.w_ball},
         {"knn_k", w.neighbors.k},
         {"ball_radius", w.neighbors.radius},
         {"delta", w.delta},
         {"l_min", w.l_min},
         {"max_pairs", w.max_pairs}};
}

inline void from_json(const nlohmann::json& j, LossWeights& w) {
    const LossWeights d;
    w.lambda_cd = j.value("lambda_cd", d.lambda_cd);
    w.lambda_bf = j.value("lambda_bf", d.lambda_bf);
    w.lambda_rigid = j.value("lambda_rigid", d.lambda_rigid);
    w.lambda_smc = j.value("lambda_smc", d.lambda_smc);
    w.lambda_dom = j.value("lambda_dom", d.lambda_dom);
    w.alpha = j.value("alpha", d.alpha);
    w.gamma = j.value("gamma", d.gamma);
    w.beta = j.value("beta", d.beta);
    w.w_knn = j.value("w_knn", d.w_knn);
    w.w_ball = j.value("w_ball", d.w_ball);
    w.neighbors.k = j.value("knn_k", d.neighbors.k);
    w.neighbors.radius = j.value("ball_radius", d.neighbors.radius);
    w.delta = j.value("delta", d.delta);
    w.l_min = j.value("l_min", d.l_min);
    w.max_pairs = j.value("max_pairs", d.max_pairs);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"epochs", c.epochs}, {"learning_rate", c.learning_rate}, {"seed", c.seed},
         {"shuffle", c.shuffle}, {"weights", c.weights},           {"model", c.model},
         {"labeler", c.labeler}};
}

/// Missing keys keep their defaults; unknown keys are rejected so typos
/// do not silently fall back.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    if (!j.is_object()) throw Error(ErrorCode::InvalidArgument, "train config must be a JSON object");
    static const char* known[] = {"epochs", "learning_rate", "seed", "shuffle", "weights", "model", "labeler"};
    for (const auto& [key, value] : j.items()) {
        if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return key == k; }) ==
            std::end(known))
            throw Error(ErrorCode::InvalidArgument, "unknown train config key \"" + key + "\"");
    }
    const TrainConfig d;
    c.epochs = j.value("epochs", d.epochs);
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.seed = j.value("seed", d.seed);
    c.shuffle = j.value("shuffle", d.shuffle);
    c.weights = j.value("weights", d.weights);
    c.model = j.value("model", d.model);
    c.labeler = j.value("labeler", d.labeler);
}

}  // namespace sflow
