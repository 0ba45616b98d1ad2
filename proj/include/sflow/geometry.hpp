#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace sflow {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Points = std::vector<Vec3>;
using Labels = std::vector<int>;

/// Rigid motion x -> R x + t. R is kept orthonormal with det +1.
struct RigidTransform {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    static RigidTransform identity() { return {}; }

    static RigidTransform from_yaw(double yaw_rad, const Vec3& t = Vec3::Zero()) {
        RigidTransform T;
        T.rotation = Eigen::AngleAxisd(yaw_rad, Vec3::UnitZ()).toRotationMatrix();
        T.translation = t;
        return T;
    }

    Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

    Points apply(const Points& pts) const {
        Points out;
        out.reserve(pts.size());
        for (const auto& p : pts) out.push_back(apply(p));
        return out;
    }

    /// (this * other)(x) = this(other(x))
    RigidTransform operator*(const RigidTransform& other) const {
        RigidTransform T;
        T.rotation = rotation * other.rotation;
        T.translation = rotation * other.translation + translation;
        return T;
    }

    RigidTransform inverse() const {
        RigidTransform T;
        T.rotation = rotation.transpose();
        T.translation = -(T.rotation * translation);
        return T;
    }

    bool is_valid(double tol = 1e-9) const {
        if (!rotation.allFinite() || !translation.allFinite()) return false;
        const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
        return ortho <= tol && std::abs(rotation.determinant() - 1.0) <= tol;
    }
};

/// Angle of the relative rotation between two rotation matrices, in radians.
inline double rotation_angle_between(const Mat3& a, const Mat3& b) {
    const double c = std::clamp(((a.transpose() * b).trace() - 1.0) / 2.0, -1.0, 1.0);
    return std::acos(c);
}

}  // namespace sflow
