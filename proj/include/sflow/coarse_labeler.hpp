#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <map>
#include <span>
#include <vector>

#include "sflow/error.hpp"
#include "sflow/geometry.hpp"
#include "sflow/scene_data.hpp"
#include "sflow/spatial_index.hpp"

namespace sflow {

struct DynamicMask {
    std::vector<char> flags;     // 1 = dynamic
    std::vector<double> ratios;  // displacement / range per point (0 for origin points)
    double ratio_threshold = 0.05;

    std::size_t size() const { return flags.size(); }
    std::size_t count() const { return static_cast<std::size_t>(std::count(flags.begin(), flags.end(), 1)); }
};

struct ClusterSet {
    std::vector<int> assignments;  // -1 noise/static, 1..K cluster id
    double eps = 0.8;
    int min_pts = 10;

    std::size_t size() const { return assignments.size(); }
    int cluster_count() const {
        int k = 0;
        for (int a : assignments) k = std::max(k, a);
        return k;
    }
};

struct PseudoLabels {
    Labels labels;  // 0 background, 1..K instance
    std::int64_t source_frame = 0;
};

struct LabelerConfig {
    double occupancy_cell = 0.2;
    double ratio_threshold = 0.05;
    double eps = 0.8;
    int min_pts = 10;
    double match_radius = 1.0;
};

namespace detail {

/// First occupied voxel strictly beyond the start cell along the ray
/// start + s * dir, s in (0, max_travel]. Exact grid traversal.
inline std::optional<VoxelKey> first_occupied_beyond(const VoxelGrid& occupancy, const Vec3& start, const Vec3& dir,
                                                     double max_travel) {
    const double cell = occupancy.cell_size();
    VoxelKey key = voxel_of(start, cell);
    std::array<std::int64_t, 3> step{};
    std::array<double, 3> t_max{}, t_delta{};
    const double inf = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
        if (dir[a] > 0.0) {
            step[a] = 1;
            t_max[a] = (static_cast<double>(key[a] + 1) * cell - start[a]) / dir[a];
            t_delta[a] = cell / dir[a];
        } else if (dir[a] < 0.0) {
            step[a] = -1;
            t_max[a] = (static_cast<double>(key[a]) * cell - start[a]) / dir[a];
            t_delta[a] = -cell / dir[a];
        } else {
            t_max[a] = inf;
            t_delta[a] = inf;
        }
    }
    while (true) {
        int axis = 0;
        if (t_max[1] < t_max[axis]) axis = 1;
        if (t_max[2] < t_max[axis]) axis = 2;
        if (t_max[axis] > max_travel) return std::nullopt;
        key[axis] += step[axis];
        t_max[axis] += t_delta[axis];
        if (occupancy.occupied(key)) return key;
    }
}

inline Vec3 cell_center(const VoxelKey& key, double cell) {
    return {(static_cast<double>(key[0]) + 0.5) * cell, (static_cast<double>(key[1]) + 0.5) * cell,
            (static_cast<double>(key[2]) + 0.5) * cell};
}

}  // namespace detail

/// Ray-cast projection of a source point (already expressed in the target
/// sensor frame) onto the target sweep: the point itself when its cell is
/// occupied in the target, otherwise the centre of the first occupied cell
/// met by the sensor ray beyond it, otherwise the point itself.
inline Vec3 raycast_projection(const VoxelGrid& occupancy, const Vec3& q, double max_range) {
    const double cell = occupancy.cell_size();
    if (occupancy.occupied(voxel_of(q, cell))) return q;
    const double range = q.norm();
    if (range == 0.0) return q;
    const auto hit = detail::first_occupied_beyond(occupancy, q, q / range, max_range - range);
    return hit ? detail::cell_center(*hit, cell) : q;
}

/// Coarse dynamic/static split. A source point is dynamic when the target
/// point its ray-cast projection lands on lies farther from it than
/// ratio_threshold times its range. Points at the sensor origin are static.
inline DynamicMask raycast_dynamic_mask(const FramePair& pair, double cell = 0.2, double ratio_threshold = 0.05) {
    if (pair.source.points.empty() || pair.target.points.empty())
        throw Error(ErrorCode::EmptyCloud, "ray casting needs two non-empty clouds");
    if (!(cell > 0.0)) throw Error(ErrorCode::NonPositiveCellSize, "occupancy cell must be positive");

    const VoxelGrid occupancy(pair.target.points, cell);
    double max_range = 0.0;
    for (const auto& p : pair.target.points) max_range = std::max(max_range, p.norm());
    max_range += 2.0 * cell;

    const RigidTransform to_target = pair.ego_pose_hint.value_or(RigidTransform::identity());
    DynamicMask mask;
    mask.ratio_threshold = ratio_threshold;
    mask.flags.assign(pair.source.size(), 0);
    mask.ratios.assign(pair.source.size(), 0.0);
    for (std::size_t i = 0; i < pair.source.size(); ++i) {
        const Vec3& p = pair.source.points[i];
        const double range = p.norm();
        if (range == 0.0) continue;
        const Vec3 q = to_target.apply(p);
        const Vec3 projected = raycast_projection(occupancy, q, max_range);
        const auto nn = nearest(occupancy, projected);
        const double ratio = (occupancy.point(nn.index) - q).norm() / range;
        mask.ratios[i] = ratio;
        mask.flags[i] = ratio > ratio_threshold ? 1 : 0;
    }
    return mask;
}

/// Density clustering with index-ordered seeding and breadth-first
/// expansion. A point is core when its closed eps-ball (itself included)
/// holds at least min_pts points. Border points join the first cluster that
/// reaches them.
inline ClusterSet dbscan(const Points& points, double eps, int min_pts) {
    if (!(eps > 0.0)) throw Error(ErrorCode::InvalidArgument, "eps must be positive");
    if (min_pts < 1) throw Error(ErrorCode::InvalidArgument, "min_pts must be >= 1");
    ClusterSet out;
    out.eps = eps;
    out.min_pts = min_pts;
    out.assignments.assign(points.size(), -1);
    if (points.empty()) return out;

    const VoxelGrid grid(points, eps);
    constexpr int kUnvisited = -2;
    std::vector<int> state(points.size(), kUnvisited);
    auto region = [&](int i) { return ball_query(grid, i, eps); };

    int cluster = 0;
    for (std::size_t s = 0; s < points.size(); ++s) {
        const int seed = static_cast<int>(s);
        if (state[s] != kUnvisited) continue;
        auto neighbors = region(seed);
        if (static_cast<int>(neighbors.size()) + 1 < min_pts) {
            state[s] = -1;
            continue;
        }
        ++cluster;
        state[s] = cluster;
        std::deque<int> queue(neighbors.begin(), neighbors.end());
        while (!queue.empty()) {
            const int j = queue.front();
            queue.pop_front();
            if (state[static_cast<std::size_t>(j)] == -1) state[static_cast<std::size_t>(j)] = cluster;
            if (state[static_cast<std::size_t>(j)] != kUnvisited) continue;
            state[static_cast<std::size_t>(j)] = cluster;
            auto nj = region(j);
            if (static_cast<int>(nj.size()) + 1 >= min_pts) queue.insert(queue.end(), nj.begin(), nj.end());
        }
    }
    for (std::size_t i = 0; i < points.size(); ++i) out.assignments[i] = state[i] >= 1 ? state[i] : -1;
    return out;
}

/// Runs dbscan on the dynamic subset and scatters ids back to all N points.
inline ClusterSet cluster_dynamic(const Points& points, const DynamicMask& mask, double eps, int min_pts) {
    if (mask.size() != points.size()) throw Error(ErrorCode::LengthMismatch, "mask length differs from cloud");
    Points subset;
    std::vector<std::size_t> where;
    for (std::size_t i = 0; i < points.size(); ++i) {
        if (!mask.flags[i]) continue;
        subset.push_back(points[i]);
        where.push_back(i);
    }
    ClusterSet sub = dbscan(subset, eps, min_pts);
    ClusterSet out;
    out.eps = eps;
    out.min_pts = min_pts;
    out.assignments.assign(points.size(), -1);
    for (std::size_t k = 0; k < where.size(); ++k) out.assignments[where[k]] = sub.assignments[k];
    return out;
}

/// Clustered frame expressed in a common coordinate frame.
struct ClusteredFrame {
    std::span<const Vec3> points;
    const ClusterSet* clusters = nullptr;
};

/// Keeps a clustered point at t only if some clustered point of frame t-1
/// or t+1 lies within match_radius of it; clusters left with fewer than
/// min_pts points are dissolved. Surviving ids are renumbered 1..K in their
/// original order. Never adds points.
inline ClusterSet temporal_refine(const ClusteredFrame* prev, const ClusteredFrame& curr, const ClusteredFrame* next,
                                  double match_radius) {
    if (curr.clusters == nullptr || curr.clusters->size() != curr.points.size())
        throw Error(ErrorCode::LengthMismatch, "current frame clusters do not match its points");
    const ClusterSet& in = *curr.clusters;
    ClusterSet out = in;

    std::vector<std::optional<VoxelGrid>> neighbors;
    for (const ClusteredFrame* f : {prev, next}) {
        if (f == nullptr) continue;
        if (f->clusters == nullptr || f->clusters->size() != f->points.size())
            throw Error(ErrorCode::LengthMismatch, "neighbor frame clusters do not match its points");
        Points clustered;
        for (std::size_t j = 0; j < f->points.size(); ++j)
            if (f->clusters->assignments[j] >= 1) clustered.push_back(f->points[j]);
        if (!clustered.empty()) neighbors.emplace_back(VoxelGrid(std::move(clustered), match_radius));
    }

    for (std::size_t i = 0; i < in.size(); ++i) {
        if (in.assignments[i] < 1) continue;
        bool supported = false;
        for (const auto& g : neighbors) {
            const auto nn = nearest(*g, curr.points[i]);
            if (nn.index >= 0 && nn.distance <= match_radius) {
                supported = true;
                break;
            }
        }
        if (!supported) out.assignments[i] = -1;
    }

    std::map<int, int> sizes;
    for (int a : out.assignments)
        if (a >= 1) ++sizes[a];
    std::map<int, int> remap;
    int next_id = 0;
    for (const auto& [id, n] : sizes)
        if (n >= in.min_pts) remap[id] = ++next_id;
    for (int& a : out.assignments) {
        if (a < 1) continue;
        auto it = remap.find(a);
        a = it == remap.end() ? -1 : it->second;
    }
    return out;
}

/// Static -> 0, dynamic in cluster c -> c, dynamic noise -> 0.
inline PseudoLabels assemble_pseudo_labels(const DynamicMask& mask, const ClusterSet& clusters,
                                           std::int64_t source_frame = 0) {
    if (mask.size() != clusters.size()) throw Error(ErrorCode::LengthMismatch, "mask and clusters differ in length");
    PseudoLabels out;
    out.source_frame = source_frame;
    out.labels.assign(mask.size(), 0);
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask.flags[i] && clusters.assignments[i] >= 1) out.labels[i] = clusters.assignments[i];
    return out;
}

}  // namespace sflow
