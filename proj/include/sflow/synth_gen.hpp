#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "sflow/error.hpp"
#include "sflow/geometry.hpp"
#include "sflow/scene_data.hpp"

namespace sflow {

/// Parameters of one synthetic frame pair. ego_motion maps source-frame
/// coordinates of static structure to the target sensor frame.
struct SceneSpec {
    std::uint64_t seed = 0;
    int n_background = 1600;
    int n_movers = 4;
    int points_per_mover = 80;
    double mover_speed_min = 1.5;  // meters / frame
    double mover_speed_max = 2.5;
    double mover_max_yaw = 0.05;   // radians / frame
    RigidTransform ego_motion = RigidTransform::from_yaw(0.01, Vec3(-0.5, 0.0, 0.0));
    double noise_sigma = 0.0;      // meters, target frame only
    double extent = 25.0;          // scene spans [-extent, extent]^2
    double sensor_height = 1.7;
    double mover_range_min = 3.0;
    double mover_range_max = 10.0;

    void validate() const {
        if (n_background < 0 || n_movers < 0 || points_per_mover < 0)
            throw Error(ErrorCode::InvalidArgument, "scene counts must be >= 0");
        if (!(noise_sigma >= 0.0)) throw Error(ErrorCode::InvalidArgument, "noise_sigma must be >= 0");
        if (!(extent > 0.0)) throw Error(ErrorCode::InvalidArgument, "extent must be positive");
        if (!(mover_speed_min >= 0.0 && mover_speed_max >= mover_speed_min))
            throw Error(ErrorCode::InvalidArgument, "invalid mover speed range");
        if (!(mover_range_min >= 0.0 && mover_range_max >= mover_range_min))
            throw Error(ErrorCode::InvalidArgument, "invalid mover range band");
        if (n_background + n_movers * points_per_mover < 1)
            throw Error(ErrorCode::InvalidArgument, "scene would be empty");
        if (!ego_motion.is_valid(1e-9)) throw Error(ErrorCode::InvalidArgument, "ego_motion is not a rigid transform");
    }
};

/// Sampled motion of one mover, expressed in the source frame.
struct MoverTruth {
    RigidTransform motion;
    std::vector<std::size_t> indices;  // member points in the source cloud
};

struct SyntheticPair {
    FramePair pair;
    std::vector<MoverTruth> movers;
};

namespace detail {

/// Portable RNG helpers so a seed reproduces bit-identical scenes on every
/// conforming platform.
class SceneRng {
public:
    explicit SceneRng(std::uint64_t seed) : engine_(seed) {}

    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal() {
        if (spare_) {
            spare_ = false;
            return spare_value_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double mag = std::sqrt(-2.0 * std::log(u1));
        spare_value_ = mag * std::sin(2.0 * std::numbers::pi * u2);
        spare_ = true;
        return mag * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    std::mt19937_64 engine_;
    bool spare_ = false;
    double spare_value_ = 0.0;
};

struct Box {
    Vec3 center;  // center of the footprint on the ground
    double heading, length, width, height;
};

/// Uniform sample on the four sides and the roof of a box.
inline Vec3 sample_box_surface(SceneRng& rng, const Box& b, double ground_z) {
    const double side_area = 2.0 * (b.length + b.width) * b.height;
    const double roof_area = b.length * b.width;
    const double pick = rng.uniform() * (side_area + roof_area);
    Vec3 local;
    if (pick < roof_area) {
        local = {rng.uniform(-0.5, 0.5) * b.length, rng.uniform(-0.5, 0.5) * b.width, b.height};
    } else {
        const double perimeter = 2.0 * (b.length + b.width);
        double s = rng.uniform() * perimeter;
        const double z = rng.uniform() * b.height;
        if (s < b.length) {
            local = {s - 0.5 * b.length, -0.5 * b.width, z};
        } else if ((s -= b.length) < b.width) {
            local = {0.5 * b.length, s - 0.5 * b.width, z};
        } else if ((s -= b.width) < b.length) {
            local = {0.5 * b.length - s, 0.5 * b.width, z};
        } else {
            s -= b.length;
            local = {-0.5 * b.length, 0.5 * b.width - s, z};
        }
    }
    const Mat3 R = Eigen::AngleAxisd(b.heading, Vec3::UnitZ()).toRotationMatrix();
    return Vec3(b.center.x(), b.center.y(), ground_z) + R * local;
}

}  // namespace detail

/// Synthetic sweep pair: a ground plane, vertical walls and poles, and
/// rigid box movers. Frame t+1 applies each mover's motion, then the ego
/// motion, then optional Gaussian noise. gt_flow on the source is the exact
/// noise-free displacement.
inline SyntheticPair generate_pair(const SceneSpec& spec) {
    spec.validate();
    detail::SceneRng rng(spec.seed);
    const double ground_z = -spec.sensor_height;
    const double E = spec.extent;

    SyntheticPair out;
    PointCloud& src = out.pair.source;
    src.frame_index = 0;
    Labels labels;
    Points flow;

    // Background: ~60% ground, the rest on walls and poles.
    const int n_ground = spec.n_background * 3 / 5;
    const int n_struct = spec.n_background - n_ground;
    for (int i = 0; i < n_ground; ++i) {
        // area-uniform in the disc of radius E, a little denser near the sensor
        const double r = E * std::pow(rng.uniform(), 0.75);
        const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
        src.points.emplace_back(r * std::cos(a), r * std::sin(a), ground_z);
    }
    const int n_walls = 8;
    std::vector<std::pair<Vec3, Vec3>> walls;  // (start, end) on the ground
    for (int w = 0; w < n_walls; ++w) {
        const double a = (w + rng.uniform(0.1, 0.9)) * 2.0 * std::numbers::pi / n_walls;
        const double r = rng.uniform(0.75, 0.95) * E;
        const Vec3 mid(r * std::cos(a), r * std::sin(a), ground_z);
        const Vec3 tangent(-std::sin(a), std::cos(a), 0.0);
        const double half = rng.uniform(3.0, 6.0);
        walls.emplace_back(mid - half * tangent, mid + half * tangent);
    }
    const int n_poles = 6;
    std::vector<Vec3> poles;
    for (int k = 0; k < n_poles; ++k) {
        const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double r = rng.uniform(0.3, 0.7) * E;
        poles.emplace_back(r * std::cos(a), r * std::sin(a), ground_z);
    }
    for (int i = 0; i < n_struct; ++i) {
        if (i % 5 != 4) {
            const auto& [s, e] = walls[static_cast<std::size_t>(i) % walls.size()];
            const double u = rng.uniform();
            Vec3 p = s + u * (e - s);
            p.z() += rng.uniform(0.0, 4.0);
            src.points.push_back(p);
        } else {
            const Vec3& base = poles[static_cast<std::size_t>(i / 5) % poles.size()];
            const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
            src.points.emplace_back(base.x() + 0.15 * std::cos(a), base.y() + 0.15 * std::sin(a),
                                    ground_z + rng.uniform(0.0, 3.0));
        }
    }
    const std::size_t n_static = src.points.size();
    labels.assign(n_static, 0);
    for (std::size_t i = 0; i < n_static; ++i) flow.push_back(spec.ego_motion.apply(src.points[i]) - src.points[i]);

    // Movers: boxes on the ground within the range band, kept apart at both
    // time steps.
    std::vector<std::pair<Vec3, Vec3>> placed;  // centers at t and t+1
    for (int m = 0; m < spec.n_movers; ++m) {
        detail::Box box{};
        RigidTransform motion;
        Vec3 c0, c1;
        for (int attempt = 0; attempt < 200; ++attempt) {
            const double r = rng.uniform(spec.mover_range_min, spec.mover_range_max);
            const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
            box.center = Vec3(r * std::cos(a), r * std::sin(a), 0.0);
            box.heading = rng.uniform(0.0, 2.0 * std::numbers::pi);
            box.length = rng.uniform(0.6, 1.0);
            box.width = rng.uniform(0.5, 0.8);
            box.height = rng.uniform(1.0, 1.5);
            const double speed = rng.uniform(spec.mover_speed_min, spec.mover_speed_max);
            const double yaw = rng.uniform(-spec.mover_max_yaw, spec.mover_max_yaw);
            const Vec3 dir(std::cos(box.heading), std::sin(box.heading), 0.0);
            // rotate about the box's own vertical axis, then translate along the heading
            const Vec3 pivot(box.center.x(), box.center.y(), ground_z);
            motion = RigidTransform::from_yaw(yaw);
            motion.translation = pivot - motion.rotation * pivot + speed * dir;
            c0 = pivot;
            c1 = motion.apply(pivot);
            bool ok = std::abs(c1.x()) < E - 2.0 && std::abs(c1.y()) < E - 2.0;
            for (const auto& [q0, q1] : placed)
                ok = ok && (q0 - c0).norm() > 5.0 && (q1 - c1).norm() > 5.0 && (q0 - c1).norm() > 5.0 &&
                     (q1 - c0).norm() > 5.0;
            if (ok) break;
        }
        placed.emplace_back(c0, c1);
        MoverTruth truth;
        truth.motion = motion;
        for (int k = 0; k < spec.points_per_mover; ++k) {
            truth.indices.push_back(src.points.size());
            const Vec3 p = detail::sample_box_surface(rng, box, ground_z);
            src.points.push_back(p);
            labels.push_back(m + 1);
            flow.push_back(spec.ego_motion.apply(motion.apply(p)) - p);
        }
        out.movers.push_back(std::move(truth));
    }

    PointCloud& tgt = out.pair.target;
    tgt.frame_index = 1;
    tgt.points.resize(src.points.size());
    for (std::size_t i = 0; i < src.points.size(); ++i) {
        Vec3 q = src.points[i] + flow[i];
        if (spec.noise_sigma > 0.0)
            for (int a = 0; a < 3; ++a) q[a] += spec.noise_sigma * rng.normal();
        tgt.points[i] = q;
    }
    tgt.gt_labels = labels;
    src.gt_labels = std::move(labels);
    src.gt_flow = std::move(flow);
    out.pair.ego_pose_hint.reset();
    return out;
}

}  // namespace sflow
