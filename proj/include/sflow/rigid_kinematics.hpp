#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/SVD>

#include "sflow/error.hpp"
#include "sflow/geometry.hpp"
#include "sflow/scene_data.hpp"
#include "sflow/spatial_index.hpp"

namespace sflow {

struct Alignment {
    RigidTransform transform;
    bool degenerate = false;  // covariance rank < 2; rotation is best effort
};

namespace detail {

/// Smallest rotation taking unit vector a onto unit vector b.
inline Mat3 minimal_rotation(const Vec3& a, const Vec3& b) {
    return Eigen::Quaterniond::FromTwoVectors(a, b).toRotationMatrix();
}

}  // namespace detail

/// Weighted least-squares rigid fit: argmin sum_i w_i |R src_i + t - dst_i|^2.
/// Reflections are removed by flipping the sign of the weakest singular
/// direction. With a rank-1 covariance the rotation about the common line is
/// left at identity; with rank 0 only the translation is fitted.
inline Alignment kabsch_align(std::span<const Vec3> src, std::span<const Vec3> dst,
                              std::span<const double> weights = {}) {
    if (src.size() != dst.size()) throw Error(ErrorCode::LengthMismatch, "src and dst differ in length");
    if (!weights.empty() && weights.size() != src.size())
        throw Error(ErrorCode::LengthMismatch, "weights length differs from point count");
    if (src.size() < 3) throw Error(ErrorCode::TooFewPoints, "kabsch_align needs at least 3 pairs");

    double wsum = 0.0;
    Vec3 cs = Vec3::Zero(), cd = Vec3::Zero();
    for (std::size_t i = 0; i < src.size(); ++i) {
        const double w = weights.empty() ? 1.0 : weights[i];
        if (w < 0.0 || !std::isfinite(w)) throw Error(ErrorCode::InvalidArgument, "weights must be finite and >= 0");
        wsum += w;
        cs += w * src[i];
        cd += w * dst[i];
    }
    if (!(wsum > 0.0)) throw Error(ErrorCode::TooFewPoints, "all weights are zero");
    cs /= wsum;
    cd /= wsum;

    Mat3 H = Mat3::Zero();
    for (std::size_t i = 0; i < src.size(); ++i) {
        const double w = weights.empty() ? 1.0 : weights[i];
        H += w * (src[i] - cs) * (dst[i] - cd).transpose();
    }

    Alignment out;
    Eigen::JacobiSVD<Mat3> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Vec3 sv = svd.singularValues();
    const double scale = std::max(sv[0], 1e-300);
    const double rank_tol = 1e-12;
    if (sv[0] <= 1e-300 || sv[1] / scale <= rank_tol) {
        out.degenerate = true;
        if (sv[0] > 1e-300) {
            Vec3 a = svd.matrixU().col(0);
            Vec3 b = svd.matrixV().col(0);
            out.transform.rotation = detail::minimal_rotation(a, b);
        }
    } else {
        const Mat3& U = svd.matrixU();
        const Mat3& V = svd.matrixV();
        Mat3 D = Mat3::Identity();
        if ((V * U.transpose()).determinant() < 0.0) D(2, 2) = -1.0;
        out.transform.rotation = V * D * U.transpose();
    }
    out.transform.translation = cd - out.transform.rotation * cs;
    return out;
}

inline Alignment kabsch_align(const Points& src, const Points& dst, const std::vector<double>& weights = {}) {
    return kabsch_align(std::span<const Vec3>(src), std::span<const Vec3>(dst), std::span<const double>(weights));
}

struct IcpOptions {
    int max_iters = 50;
    double tol = 1e-6;               // meters, on the change of mean residual
    double rejection_factor = 3.0;   // drop pairs farther than factor * median
    double index_cell = 1.0;         // hash cell for the correspondence search
};

struct IcpResult {
    RigidTransform transform;
    int iterations = 0;
    bool converged = false;  // false: NoConvergence, transform is the last iterate
    double mean_residual = 0.0;
};

/// Point-to-point ICP mapping `src` onto `dst`. Each iteration re-solves the
/// full transform from the original source points, so the estimate does not
/// accumulate drift.
inline IcpResult icp_ego_motion(const Points& src, const Points& dst, const IcpOptions& opt = {},
                                const RigidTransform& initial = RigidTransform::identity()) {
    constexpr std::size_t kMinPoints = 10;
    if (src.size() < kMinPoints || dst.size() < kMinPoints)
        throw Error(ErrorCode::TooFewPoints, "ICP needs at least 10 points per cloud");
    if (opt.max_iters < 1) throw Error(ErrorCode::InvalidArgument, "max_iters must be >= 1");

    const VoxelGrid index(dst, opt.index_cell);
    IcpResult result;
    result.transform = initial;
    double prev_residual = std::numeric_limits<double>::infinity();

    std::vector<double> dists(src.size());
    std::vector<int> match(src.size());
    Points s_kept, d_kept;
    for (int it = 1; it <= opt.max_iters; ++it) {
        for (std::size_t i = 0; i < src.size(); ++i) {
            const auto nn = nearest(index, result.transform.apply(src[i]));
            match[i] = nn.index;
            dists[i] = nn.distance;
        }
        std::vector<double> sorted = dists;
        const auto mid = sorted.begin() + static_cast<std::ptrdiff_t>(sorted.size() / 2);
        std::nth_element(sorted.begin(), mid, sorted.end());
        const double cutoff = opt.rejection_factor * *mid;

        s_kept.clear();
        d_kept.clear();
        double residual = 0.0;
        for (std::size_t i = 0; i < src.size(); ++i) {
            if (dists[i] > cutoff) continue;
            s_kept.push_back(src[i]);
            d_kept.push_back(index.point(match[i]));
            residual += dists[i];
        }
        if (s_kept.size() < 3) break;
        residual /= static_cast<double>(s_kept.size());

        result.iterations = it;
        result.mean_residual = residual;
        result.transform = kabsch_align(s_kept, d_kept).transform;
        if (residual < opt.tol || std::abs(prev_residual - residual) < opt.tol) {
            result.converged = true;
            break;
        }
        prev_residual = residual;
    }
    return result;
}

inline IcpResult icp_ego_motion(const PointCloud& src, const PointCloud& dst, int max_iters = 50,
                                double tol = 1e-6) {
    IcpOptions opt;
    opt.max_iters = max_iters;
    opt.tol = tol;
    return icp_ego_motion(src.points, dst.points, opt);
}

/// Flow induced on every point by the sensor motion: (R p + t) - p.
inline FlowField ego_flow(const Points& points, const RigidTransform& T) {
    FlowField f{Points(points.size()), FlowKind::Ego};
    for (std::size_t i = 0; i < points.size(); ++i) f.vectors[i] = T.apply(points[i]) - points[i];
    return f;
}

inline FlowField ego_flow(const PointCloud& cloud, const RigidTransform& T) { return ego_flow(cloud.points, T); }

}  // namespace sflow
