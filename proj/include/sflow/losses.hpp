#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "sflow/error.hpp"
#include "sflow/geometry.hpp"
#include "sflow/network.hpp"
#include "sflow/rigid_kinematics.hpp"
#include "sflow/scene_data.hpp"
#include "sflow/spatial_index.hpp"

namespace sflow {

struct LossWeights {
    double lambda_cd = 1.0;
    double lambda_bf = 1.0;
    double lambda_rigid = 1.0;
    double lambda_smc = 0.1;
    double lambda_dom = 0.1;

    // balanced focal loss
    double alpha = 1.0;
    double gamma = 2.0;
    double beta = 0.6;

    // spatial mask consistency
    double w_knn = 0.5;
    double w_ball = 0.5;
    NeighborQueryConfig neighbors{8, 0.5};

    // dynamic object mask
    double delta = 2.0;
    double l_min = 1.0;
    int max_pairs = 4096;

    void validate() const {
        for (double l : {lambda_cd, lambda_bf, lambda_rigid, lambda_smc, lambda_dom, alpha, w_knn, w_ball})
            if (!(l >= 0.0) || !std::isfinite(l)) throw Error(ErrorCode::InvalidArgument, "loss weights must be finite and >= 0");
        if (!(beta >= 0.0 && beta <= 1.0)) throw Error(ErrorCode::InvalidArgument, "beta must lie in [0, 1]");
        if (!(gamma >= 0.0)) throw Error(ErrorCode::InvalidArgument, "gamma must be >= 0");
        if (!(delta > 0.0)) throw Error(ErrorCode::InvalidArgument, "delta must be positive");
        if (neighbors.k < 1 || !(neighbors.radius > 0.0))
            throw Error(ErrorCode::InvalidArgument, "neighbor config needs k >= 1 and radius > 0");
        if (max_pairs < 1) throw Error(ErrorCode::InvalidArgument, "max_pairs must be >= 1");
    }
};

/// Value plus gradient with respect to the loss's differentiable input.
struct LossValue {
    double value = 0.0;
    Matrix grad;
};

inline Matrix points_to_matrix(const Points& pts) {
    Matrix m(static_cast<Eigen::Index>(pts.size()), 3);
    for (std::size_t i = 0; i < pts.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = pts[i].transpose();
    return m;
}

inline Matrix softmax_rows(const Matrix& logits) {
    Matrix s(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double mx = logits.row(i).maxCoeff();
        s.row(i) = (logits.row(i).array() - mx).exp().matrix();
        s.row(i) /= s.row(i).sum();
    }
    return s;
}

/// Pulls a gradient on softmax probabilities back onto the logits.
inline Matrix softmax_rows_backward(const Matrix& probs, const Matrix& d_probs) {
    Matrix out(probs.rows(), probs.cols());
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        const double dot = probs.row(i).dot(d_probs.row(i));
        out.row(i) = (probs.row(i).array() * (d_probs.row(i).array() - dot)).matrix();
    }
    return out;
}

// ---------------------------------------------------------------------------
// Chamfer
// ---------------------------------------------------------------------------

/// 0.5 * (mean_i min_j |w_i - t_j|^2 + mean_j min_i |t_j - w_i|^2), with the
/// gradient on the warped points only.
inline LossValue chamfer_loss(const Points& warped, const Points& target, double index_cell = 1.0) {
    if (warped.empty() || target.empty()) throw Error(ErrorCode::EmptyCloud, "chamfer needs two non-empty clouds");
    LossValue out;
    out.grad = Matrix::Zero(static_cast<Eigen::Index>(warped.size()), 3);
    const VoxelGrid target_index(target, index_cell);
    const VoxelGrid warped_index(warped, index_cell);
    const double fw = 0.5 / static_cast<double>(warped.size());
    const double bw = 0.5 / static_cast<double>(target.size());

    double forward_sum = 0.0;
    for (std::size_t i = 0; i < warped.size(); ++i) {
        const auto nn = nearest(target_index, warped[i]);
        const Vec3 diff = warped[i] - target[static_cast<std::size_t>(nn.index)];
        forward_sum += diff.squaredNorm();
        out.grad.row(static_cast<Eigen::Index>(i)) += (2.0 * fw) * diff.transpose();
    }
    double backward_sum = 0.0;
    for (std::size_t j = 0; j < target.size(); ++j) {
        const auto nn = nearest(warped_index, target[j]);
        const Vec3 diff = warped[static_cast<std::size_t>(nn.index)] - target[j];
        backward_sum += diff.squaredNorm();
        out.grad.row(nn.index) += (2.0 * bw) * diff.transpose();
    }
    out.value = fw * forward_sum + bw * backward_sum;
    return out;
}

// ---------------------------------------------------------------------------
// Balanced focal loss on the background channel
// ---------------------------------------------------------------------------

namespace detail {

constexpr double kProbFloor = 1e-12;

/// F(p, y) = -alpha y (1 - p)^gamma log p and dF/dp, with p clamped.
inline std::pair<double, double> focal_term(double p, double y, double alpha, double gamma) {
    if (y == 0.0) return {0.0, 0.0};
    const bool clamped = p < kProbFloor || p > 1.0 - kProbFloor;
    p = std::clamp(p, kProbFloor, 1.0 - kProbFloor);
    const double q = 1.0 - p;
    const double value = -alpha * y * std::pow(q, gamma) * std::log(p);
    if (clamped) return {value, 0.0};
    const double dq_pow = gamma == 0.0 ? 0.0 : gamma * std::pow(q, gamma - 1.0);
    const double deriv = -alpha * y * (-dq_pow * std::log(p) + std::pow(q, gamma) / p);
    return {value, deriv};
}

}  // namespace detail

/// y_i = [label_i > 0], p_bg = sigmoid(m_i0), p_fg = 1 - p_bg;
/// mean over points of beta F(p_fg, y) + (1 - beta) F(p_bg, 1 - y).
inline LossValue bf_loss(const MaskLogits& logits, const Labels& pseudo, const LossWeights& w) {
    const auto n = static_cast<std::size_t>(logits.rows());
    if (pseudo.size() != n) throw Error(ErrorCode::LengthMismatch, "pseudo-labels and logits differ in length");
    LossValue out;
    out.grad = Matrix::Zero(logits.rows(), logits.channels());
    if (n == 0) return out;
    const double inv_n = 1.0 / static_cast<double>(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        const double y = pseudo[i] > 0 ? 1.0 : 0.0;
        const double p_bg = 1.0 / (1.0 + std::exp(-logits.values(r, 0)));
        const double p_fg = 1.0 - p_bg;
        const auto [f_fg, df_fg] = detail::focal_term(p_fg, y, w.alpha, w.gamma);
        const auto [f_bg, df_bg] = detail::focal_term(p_bg, 1.0 - y, w.alpha, w.gamma);
        total += w.beta * f_fg + (1.0 - w.beta) * f_bg;
        const double dsig = p_bg * (1.0 - p_bg);
        out.grad(r, 0) = inv_n * (w.beta * df_fg * (-dsig) + (1.0 - w.beta) * df_bg * dsig);
    }
    out.value = total * inv_n;
    return out;
}

// ---------------------------------------------------------------------------
// Rigid object consistency
// ---------------------------------------------------------------------------

/// For every foreground channel with >= 3 argmax members, fit (R, t) from the
/// members' positions to their warped positions p + F and accumulate the
/// Frobenius norm of the fit residual, scaled by 1 / (N C). (R, t) are held
/// constant in the gradient; since they are the least-squares optimum this
/// is also the exact derivative of the loss in the flow.
inline LossValue rigid_loss(const Points& points, const MaskLogits& logits, const Points& total_flow) {
    const std::size_t n = points.size();
    if (total_flow.size() != n || static_cast<std::size_t>(logits.rows()) != n)
        throw Error(ErrorCode::LengthMismatch, "rigid_loss inputs differ in length");
    LossValue out;
    out.grad = Matrix::Zero(static_cast<Eigen::Index>(n), 3);
    if (n == 0) return out;
    const Labels labels = predict_labels(logits);
    const auto channels = static_cast<int>(logits.channels());
    const double scale = 1.0 / (static_cast<double>(n) * static_cast<double>(channels));

    std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(channels));
    for (std::size_t i = 0; i < n; ++i) members[static_cast<std::size_t>(labels[i])].push_back(i);

    Points src, dst;
    for (int c = 1; c < channels; ++c) {
        const auto& idx = members[static_cast<std::size_t>(c)];
        if (idx.size() < 3) continue;
        src.clear();
        dst.clear();
        for (std::size_t i : idx) {
            src.push_back(points[i]);
            dst.push_back(points[i] + total_flow[i]);
        }
        const RigidTransform T = kabsch_align(src, dst).transform;
        double sq = 0.0;
        std::vector<Vec3> residual(idx.size());
        for (std::size_t m = 0; m < idx.size(); ++m) {
            residual[m] = T.apply(src[m]) - dst[m];
            sq += residual[m].squaredNorm();
        }
        const double norm = std::sqrt(sq);
        out.value += scale * norm;
        if (norm == 0.0) continue;
        for (std::size_t m = 0; m < idx.size(); ++m)
            out.grad.row(static_cast<Eigen::Index>(idx[m])) = (-scale / norm) * residual[m].transpose();
    }
    return out;
}

// ---------------------------------------------------------------------------
// Spatial mask consistency
// ---------------------------------------------------------------------------

/// Per-point KNN and ball neighborhoods. KNN members farther than
/// `knn_max_distance` are dropped so isolated points have no neighbors.
struct NeighborLists {
    std::vector<std::vector<int>> knn;
    std::vector<std::vector<int>> ball;

    static NeighborLists build(const Points& points, const NeighborQueryConfig& cfg, double knn_max_distance) {
        NeighborLists out;
        out.knn.resize(points.size());
        out.ball.resize(points.size());
        if (points.size() < 2) return out;
        const VoxelGrid grid(points, std::max(cfg.radius, 0.25));
        const int k = std::min<int>(cfg.k, static_cast<int>(points.size()) - 1);
        const double cap2 = knn_max_distance * knn_max_distance;
        for (std::size_t i = 0; i < points.size(); ++i) {
            const int q = static_cast<int>(i);
            for (int j : sflow::knn(grid, q, k))
                if ((points[static_cast<std::size_t>(j)] - points[i]).squaredNorm() <= cap2) out.knn[i].push_back(j);
            out.ball[i] = ball_query(grid, q, cfg.radius);
        }
        return out;
    }
};

/// (1/N) sum_i [w_knn sum_{j in knn(i)} |s_i - s_j|^2 + w_ball sum_{j in ball(i)} |s_i - s_j|^2]
/// on softmax rows s, with the gradient pulled back to the logits.
inline LossValue smc_loss(const NeighborLists& nb, const MaskLogits& logits, const LossWeights& w) {
    const auto n = static_cast<std::size_t>(logits.rows());
    if (nb.knn.size() != n || nb.ball.size() != n)
        throw Error(ErrorCode::LengthMismatch, "neighbor lists and logits differ in length");
    LossValue out;
    out.grad = Matrix::Zero(logits.rows(), logits.channels());
    if (n == 0) return out;
    const Matrix s = softmax_rows(logits.values);
    Matrix ds = Matrix::Zero(s.rows(), s.cols());
    const double inv_n = 1.0 / static_cast<double>(n);
    double total = 0.0;
    auto accumulate = [&](std::size_t i, const std::vector<int>& js, double weight) {
        if (weight == 0.0) return;
        const auto ri = static_cast<Eigen::Index>(i);
        for (int j : js) {
            const Eigen::RowVectorXd diff = s.row(ri) - s.row(j);
            total += weight * diff.squaredNorm();
            ds.row(ri) += (2.0 * weight * inv_n) * diff;
            ds.row(j) -= (2.0 * weight * inv_n) * diff;
        }
    };
    for (std::size_t i = 0; i < n; ++i) {
        accumulate(i, nb.knn[i], w.w_knn);
        accumulate(i, nb.ball[i], w.w_ball);
    }
    out.value = total * inv_n;
    out.grad = softmax_rows_backward(s, ds);
    return out;
}

inline LossValue smc_loss(const Points& points, const MaskLogits& logits, const LossWeights& w) {
    return smc_loss(NeighborLists::build(points, w.neighbors, w.delta), logits, w);
}

// ---------------------------------------------------------------------------
// Dynamic object mask
// ---------------------------------------------------------------------------

/// Foreground pairs (argmax > 0, i < j) farther apart than delta, in
/// lexicographic order, thinned to at most max_pairs by a uniform stride.
inline std::vector<std::pair<int, int>> distant_foreground_pairs(const Points& points, const Labels& labels,
                                                                 double delta, int max_pairs) {
    std::vector<int> fg;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] > 0) fg.push_back(static_cast<int>(i));
    const double d2 = delta * delta;
    auto far = [&](int a, int b) {
        return (points[static_cast<std::size_t>(a)] - points[static_cast<std::size_t>(b)]).squaredNorm() > d2;
    };
    std::uint64_t total = 0;
    for (std::size_t a = 0; a < fg.size(); ++a)
        for (std::size_t b = a + 1; b < fg.size(); ++b)
            if (far(fg[a], fg[b])) ++total;

    std::vector<std::pair<int, int>> out;
    if (total == 0) return out;
    const auto budget = static_cast<std::uint64_t>(max_pairs);
    const std::uint64_t take = std::min(total, budget);
    out.reserve(static_cast<std::size_t>(take));
    std::uint64_t ordinal = 0, m = 0;
    // the m-th kept pair sits at ordinal floor(m * total / take)
    auto target = [&](std::uint64_t k) {
        return static_cast<std::uint64_t>((static_cast<unsigned __int128>(k) * total) / take);
    };
    std::uint64_t next = target(0);
    for (std::size_t a = 0; a < fg.size() && m < take; ++a) {
        for (std::size_t b = a + 1; b < fg.size() && m < take; ++b) {
            if (!far(fg[a], fg[b])) continue;
            if (ordinal == next) {
                out.emplace_back(fg[a], fg[b]);
                ++m;
                if (m < take) next = target(m);
            }
            ++ordinal;
        }
    }
    return out;
}

/// Mean cosine similarity of softmax rows over distant foreground pairs, or
/// l_min (with zero gradient) when there are none.
inline LossValue dom_loss(const Points& points, const MaskLogits& logits, const LossWeights& w) {
    const auto n = static_cast<std::size_t>(logits.rows());
    if (points.size() != n) throw Error(ErrorCode::LengthMismatch, "points and logits differ in length");
    LossValue out;
    out.grad = Matrix::Zero(logits.rows(), logits.channels());
    const auto pairs = distant_foreground_pairs(points, predict_labels(logits), w.delta, w.max_pairs);
    if (pairs.empty()) {
        out.value = w.l_min;
        return out;
    }
    const Matrix s = softmax_rows(logits.values);
    Eigen::VectorXd norms = s.rowwise().norm();
    Matrix ds = Matrix::Zero(s.rows(), s.cols());
    const double inv_p = 1.0 / static_cast<double>(pairs.size());
    double total = 0.0;
    for (const auto& [i, j] : pairs) {
        const double ni = norms[i], nj = norms[j];
        const double cos = s.row(i).dot(s.row(j)) / (ni * nj);
        total += cos;
        ds.row(i) += inv_p * (s.row(j) / (ni * nj) - cos * s.row(i) / (ni * ni));
        ds.row(j) += inv_p * (s.row(i) / (ni * nj) - cos * s.row(j) / (nj * nj));
    }
    out.value = total * inv_p;
    out.grad = softmax_rows_backward(s, ds);
    return out;
}

// ---------------------------------------------------------------------------
// Weighted total
// ---------------------------------------------------------------------------

/// Everything one training step needs. `neighbors` may be left empty, in
/// which case it is rebuilt from the source points.
struct LossInputs {
    const Points* source = nullptr;      // P_t
    const Points* target = nullptr;      // P_{t+1}
    const Points* ego_flow = nullptr;    // F_ego
    const Points* residual = nullptr;    // delta F
    const MaskLogits* logits = nullptr;  // M_t
    const Labels* pseudo = nullptr;      // coarse instance labels
    const NeighborLists* neighbors = nullptr;
};

struct LossBreakdown {
    double total = 0.0;
    double cd = 0.0, bf = 0.0, rigid = 0.0, smc = 0.0, dom = 0.0;
    Matrix grad_residual;  // N x 3, equal to the gradient w.r.t. total flow
    Matrix grad_logits;    // N x C
};

inline Points total_flow_of(const Points& ego, const Points& residual) {
    if (ego.size() != residual.size()) throw Error(ErrorCode::LengthMismatch, "ego and residual differ in length");
    Points f(ego.size());
    for (std::size_t i = 0; i < ego.size(); ++i) f[i] = ego[i] + residual[i];
    return f;
}

/// lambda_cd CD + lambda_bf BF + lambda_rigid Rigid + lambda_smc SMC + lambda_dom DOM.
/// Terms with a zero weight are skipped and reported as 0.
inline LossBreakdown total_loss(const LossInputs& in, const LossWeights& w) {
    w.validate();
    if (!in.source || !in.target || !in.ego_flow || !in.residual || !in.logits || !in.pseudo)
        throw Error(ErrorCode::InvalidArgument, "total_loss is missing an input");
    const Points& src = *in.source;
    const std::size_t n = src.size();
    if (in.ego_flow->size() != n || in.residual->size() != n || static_cast<std::size_t>(in.logits->rows()) != n ||
        in.pseudo->size() != n)
        throw Error(ErrorCode::LengthMismatch, "total_loss inputs differ in length");

    LossBreakdown out;
    out.grad_residual = Matrix::Zero(static_cast<Eigen::Index>(n), 3);
    out.grad_logits = Matrix::Zero(static_cast<Eigen::Index>(n), in.logits->channels());
    const Points flow = total_flow_of(*in.ego_flow, *in.residual);

    if (w.lambda_cd > 0.0) {
        Points warped(n);
        for (std::size_t i = 0; i < n; ++i) warped[i] = src[i] + flow[i];
        const LossValue v = chamfer_loss(warped, *in.target);
        out.cd = v.value;
        out.total += w.lambda_cd * v.value;
        out.grad_residual += w.lambda_cd * v.grad;
    }
    if (w.lambda_bf > 0.0) {
        const LossValue v = bf_loss(*in.logits, *in.pseudo, w);
        out.bf = v.value;
        out.total += w.lambda_bf * v.value;
        out.grad_logits += w.lambda_bf * v.grad;
    }
    if (w.lambda_rigid > 0.0) {
        const LossValue v = rigid_loss(src, *in.logits, flow);
        out.rigid = v.value;
        out.total += w.lambda_rigid * v.value;
        out.grad_residual += w.lambda_rigid * v.grad;
    }
    if (w.lambda_smc > 0.0) {
        const LossValue v = in.neighbors ? smc_loss(*in.neighbors, *in.logits, w) : smc_loss(src, *in.logits, w);
        out.smc = v.value;
        out.total += w.lambda_smc * v.value;
        out.grad_logits += w.lambda_smc * v.grad;
    }
    if (w.lambda_dom > 0.0) {
        const LossValue v = dom_loss(src, *in.logits, w);
        out.dom = v.value;
        out.total += w.lambda_dom * v.value;
        out.grad_logits += w.lambda_dom * v.grad;
    }
    return out;
}

}  // namespace sflow
