#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "sflow/geometry.hpp"
#include "sflow/network.hpp"
#include "sflow/scene_data.hpp"

namespace sflow::testing {

inline Points random_points(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    Points pts(n);
    for (auto& p : pts) p = Vec3(u(rng), u(rng), u(rng));
    return pts;
}

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, double scale = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-scale, scale);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = u(rng);
    return m;
}

inline RigidTransform random_transform(std::mt19937_64& rng, double max_angle = M_PI, double max_t = 5.0) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Vec3 axis(u(rng), u(rng), u(rng));
    axis.normalize();
    RigidTransform T;
    T.rotation = Eigen::AngleAxisd(max_angle * u(rng), axis).toRotationMatrix();
    T.translation = Vec3(u(rng), u(rng), u(rng)) * max_t;
    return T;
}

/// Norm-wise relative error between two gradient blocks.
inline double relative_error(const Matrix& analytic, const Matrix& numeric) {
    const double scale = std::max(analytic.norm(), numeric.norm());
    if (scale == 0.0) return 0.0;
    return (analytic - numeric).norm() / scale;
}

/// Central differences of f with respect to every entry of m.
inline Matrix numeric_gradient(Matrix& m, const std::function<double()>& f, double h = 1e-5) {
    Matrix g(m.rows(), m.cols());
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            const double keep = m(i, j);
            m(i, j) = keep + h;
            const double up = f();
            m(i, j) = keep - h;
            const double down = f();
            m(i, j) = keep;
            g(i, j) = (up - down) / (2.0 * h);
        }
    }
    return g;
}

inline Points rows_to_points(const Matrix& m) {
    Points p(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) p[static_cast<std::size_t>(i)] = m.row(i).transpose();
    return p;
}

// ---------------------------------------------------------------------------
// O(N^2) oracles
// ---------------------------------------------------------------------------

inline std::vector<int> brute_knn(const Points& pts, int q, int k) {
    std::vector<std::pair<double, int>> d;
    for (std::size_t j = 0; j < pts.size(); ++j)
        if (static_cast<int>(j) != q) d.emplace_back((pts[j] - pts[static_cast<std::size_t>(q)]).squaredNorm(), static_cast<int>(j));
    std::sort(d.begin(), d.end());
    std::vector<int> out;
    for (int i = 0; i < k; ++i) out.push_back(d[static_cast<std::size_t>(i)].second);
    return out;
}

inline std::vector<int> brute_ball(const Points& pts, int q, double r) {
    std::vector<int> out;
    for (std::size_t j = 0; j < pts.size(); ++j)
        if (static_cast<int>(j) != q && (pts[j] - pts[static_cast<std::size_t>(q)]).squaredNorm() <= r * r)
            out.push_back(static_cast<int>(j));
    return out;
}

/// Textbook DBSCAN on a full distance scan: index-ordered seeds, FIFO
/// expansion, border points to the first cluster reaching them.
inline std::vector<int> brute_dbscan(const Points& pts, double eps, int min_pts) {
    const std::size_t n = pts.size();
    auto region = [&](std::size_t i) {
        std::vector<std::size_t> out;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i && (pts[i] - pts[j]).squaredNorm() <= eps * eps) out.push_back(j);
        return out;
    };
    std::vector<int> label(n, 0);  // 0 unvisited, -1 noise
    int cluster = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (label[i] != 0) continue;
        auto nb = region(i);
        if (static_cast<int>(nb.size()) + 1 < min_pts) {
            label[i] = -1;
            continue;
        }
        label[i] = ++cluster;
        std::vector<std::size_t> queue(nb.begin(), nb.end());
        for (std::size_t h = 0; h < queue.size(); ++h) {
            const std::size_t j = queue[h];
            if (label[j] == -1) label[j] = cluster;
            if (label[j] != 0) continue;
            label[j] = cluster;
            auto nj = region(j);
            if (static_cast<int>(nj.size()) + 1 >= min_pts) queue.insert(queue.end(), nj.begin(), nj.end());
        }
    }
    return label;
}

inline double brute_rand_index(const Labels& a, const Labels& b) {
    const std::size_t n = a.size();
    if (n < 2) return 1.0;
    std::size_t agree = 0, total = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            ++total;
            agree += ((a[i] == a[j]) == (b[i] == b[j])) ? 1 : 0;
        }
    return static_cast<double>(agree) / static_cast<double>(total);
}

}  // namespace sflow::testing
