#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sflow/error.hpp"
#include "sflow/geometry.hpp"

namespace sflow {

using VoxelKey = std::array<std::int64_t, 3>;

struct VoxelKeyHash {
    std::size_t operator()(const VoxelKey& k) const noexcept {
        std::uint64_t h = 1469598103934665603ull;
        for (auto v : k) {
            h ^= static_cast<std::uint64_t>(v) + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
        }
        return static_cast<std::size_t>(h);
    }
};

inline VoxelKey voxel_of(const Vec3& p, double cell_size) {
    return {static_cast<std::int64_t>(std::floor(p.x() / cell_size)),
            static_cast<std::int64_t>(std::floor(p.y() / cell_size)),
            static_cast<std::int64_t>(std::floor(p.z() / cell_size))};
}

struct NeighborQueryConfig {
    int k = 8;
    double radius = 0.5;
};

/// Sparse voxel hash over an immutable copy of the points. Cells are keyed by
/// floor(coordinate / cell_size); point lists inside a cell are in ascending
/// index order.
class VoxelGrid {
public:
    VoxelGrid(Points points, double cell_size) : points_(std::move(points)), cell_size_(cell_size) {
        if (!(cell_size > 0.0) || !std::isfinite(cell_size))
            throw Error(ErrorCode::NonPositiveCellSize, "cell size must be positive");
        point_cell_.reserve(points_.size());
        for (std::size_t i = 0; i < points_.size(); ++i) {
            const VoxelKey key = voxel_of(points_[i], cell_size_);
            auto [it, inserted] = cells_.try_emplace(key);
            if (inserted) {
                cell_order_.push_back(key);
                if (cell_order_.size() == 1) {
                    lo_ = hi_ = key;
                } else {
                    for (int a = 0; a < 3; ++a) {
                        lo_[a] = std::min(lo_[a], key[a]);
                        hi_[a] = std::max(hi_[a], key[a]);
                    }
                }
            }
            it->second.push_back(static_cast<int>(i));
            point_cell_.push_back(key);
        }
    }

    double cell_size() const { return cell_size_; }
    std::size_t size() const { return points_.size(); }
    const Points& points() const { return points_; }
    const Vec3& point(int i) const { return points_[static_cast<std::size_t>(i)]; }
    const VoxelKey& cell_of(int i) const { return point_cell_[static_cast<std::size_t>(i)]; }
    std::size_t cell_count() const { return cells_.size(); }

    /// Occupied cells in order of first appearance (ascending smallest index).
    const std::vector<VoxelKey>& cells_in_order() const { return cell_order_; }

    std::span<const int> members(const VoxelKey& key) const {
        auto it = cells_.find(key);
        if (it == cells_.end()) return {};
        return it->second;
    }

    bool occupied(const VoxelKey& key) const { return cells_.count(key) != 0; }

    /// Visit every point in cells at Chebyshev distance exactly `ring` from
    /// `center`. Returns false once the ring lies entirely outside the
    /// occupied bounding box.
    template <class Fn>
    bool visit_ring(const VoxelKey& center, std::int64_t ring, Fn&& fn) const {
        if (points_.empty()) return false;
        bool any_inside = false;
        for (std::int64_t dx = -ring; dx <= ring; ++dx) {
            const std::int64_t x = center[0] + dx;
            if (x < lo_[0] || x > hi_[0]) continue;
            for (std::int64_t dy = -ring; dy <= ring; ++dy) {
                const std::int64_t y = center[1] + dy;
                if (y < lo_[1] || y > hi_[1]) continue;
                const bool edge_xy = std::abs(dx) == ring || std::abs(dy) == ring;
                for (std::int64_t dz = -ring; dz <= ring; ++dz) {
                    if (!edge_xy && std::abs(dz) != ring) {
                        dz = ring - 1;  // jump to the far face
                        continue;
                    }
                    const std::int64_t z = center[2] + dz;
                    if (z < lo_[2] || z > hi_[2]) continue;
                    any_inside = true;
                    auto it = cells_.find({x, y, z});
                    if (it == cells_.end()) continue;
                    for (int idx : it->second) fn(idx);
                }
            }
        }
        return any_inside;
    }

    /// Largest Chebyshev ring around `center` that can still hold points.
    std::int64_t max_ring(const VoxelKey& center) const {
        std::int64_t r = 0;
        for (int a = 0; a < 3; ++a) r = std::max({r, std::abs(center[a] - lo_[a]), std::abs(center[a] - hi_[a])});
        return r;
    }

private:
    Points points_;
    double cell_size_;
    std::unordered_map<VoxelKey, std::vector<int>, VoxelKeyHash> cells_;
    std::vector<VoxelKey> cell_order_;
    std::vector<VoxelKey> point_cell_;
    VoxelKey lo_{0, 0, 0};
    VoxelKey hi_{0, 0, 0};
};

inline VoxelGrid build_voxel_grid(const Points& points, double cell_size) {
    return VoxelGrid(points, cell_size);
}

namespace detail {

struct Candidate {
    double dist2;
    int index;
    bool operator<(const Candidate& o) const { return dist2 < o.dist2 || (dist2 == o.dist2 && index < o.index); }
};

/// k best candidates around an arbitrary query position. Rings are expanded
/// until the k-th distance is strictly below the lower bound of anything
/// still unvisited, so ties are resolved by index exactly as a full sort
/// would. Falls back to a linear scan when a ring would touch more cells
/// than are occupied.
inline std::vector<Candidate> k_nearest(const VoxelGrid& grid, const Vec3& query, std::size_t k, int exclude) {
    std::vector<Candidate> best;
    if (k == 0 || grid.size() == 0) return best;
    auto offer = [&](int idx) {
        if (idx == exclude) return;
        best.push_back({(grid.point(idx) - query).squaredNorm(), idx});
    };
    auto finish = [&]() {
        const std::size_t keep = std::min(k, best.size());
        std::partial_sort(best.begin(), best.begin() + static_cast<std::ptrdiff_t>(keep), best.end());
        best.resize(keep);
        return best;
    };
    auto brute = [&]() {
        best.clear();
        for (std::size_t i = 0; i < grid.size(); ++i) offer(static_cast<int>(i));
        return finish();
    };

    const VoxelKey center = voxel_of(query, grid.cell_size());
    const std::int64_t last = grid.max_ring(center);
    for (std::int64_t ring = 0; ring <= last; ++ring) {
        const double side = static_cast<double>(2 * ring + 1);
        if (side * side * side > 4.0 * static_cast<double>(grid.cell_count()) && ring > 1) return brute();
        grid.visit_ring(center, ring, offer);
        if (best.size() >= k) {
            std::nth_element(best.begin(), best.begin() + static_cast<std::ptrdiff_t>(k - 1), best.end());
            const double kth = best[k - 1].dist2;
            // Anything outside rings 0..ring is at least ring * cell away.
            const double bound = static_cast<double>(ring) * grid.cell_size();
            if (kth < bound * bound) return finish();
        }
    }
    return finish();
}

}  // namespace detail

/// The k nearest points to point `query_index`, excluding itself, ordered by
/// distance then index.
inline std::vector<int> knn(const VoxelGrid& grid, int query_index, int k) {
    if (k < 1) throw Error(ErrorCode::InvalidArgument, "k must be >= 1");
    if (static_cast<std::size_t>(k) >= grid.size())
        throw Error(ErrorCode::KTooLarge, "k=" + std::to_string(k) + " with N=" + std::to_string(grid.size()));
    auto cands = detail::k_nearest(grid, grid.point(query_index), static_cast<std::size_t>(k), query_index);
    std::vector<int> out;
    out.reserve(cands.size());
    for (const auto& c : cands) out.push_back(c.index);
    return out;
}

struct Nearest {
    int index = -1;
    double distance = std::numeric_limits<double>::infinity();
};

/// Nearest grid point to an arbitrary position (smallest index on ties).
inline Nearest nearest(const VoxelGrid& grid, const Vec3& query) {
    auto cands = detail::k_nearest(grid, query, 1, -1);
    if (cands.empty()) return {};
    return {cands.front().index, std::sqrt(cands.front().dist2)};
}

/// All points within distance <= r of an arbitrary position, ascending index.
inline std::vector<int> ball_query_point(const VoxelGrid& grid, const Vec3& query, double r, int exclude = -1) {
    if (!(r > 0.0)) throw Error(ErrorCode::InvalidArgument, "radius must be positive");
    std::vector<int> out;
    const double r2 = r * r;
    const VoxelKey center = voxel_of(query, grid.cell_size());
    const auto reach = static_cast<std::int64_t>(std::ceil(r / grid.cell_size()));
    const double side = static_cast<double>(2 * reach + 1);
    if (side * side * side > 4.0 * static_cast<double>(grid.cell_count())) {
        for (std::size_t i = 0; i < grid.size(); ++i) {
            const int idx = static_cast<int>(i);
            if (idx != exclude && (grid.point(idx) - query).squaredNorm() <= r2) out.push_back(idx);
        }
        return out;
    }
    for (std::int64_t ring = 0; ring <= reach; ++ring) {
        grid.visit_ring(center, ring, [&](int idx) {
            if (idx != exclude && (grid.point(idx) - query).squaredNorm() <= r2) out.push_back(idx);
        });
    }
    std::sort(out.begin(), out.end());
    return out;
}

/// Closed ball around point `query_index`, excluding itself, ascending index.
inline std::vector<int> ball_query(const VoxelGrid& grid, int query_index, double r) {
    return ball_query_point(grid, grid.point(query_index), r, query_index);
}

}  // namespace sflow
