#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <optional>

#include "sgta/errors.hpp"

namespace sgta {

inline constexpr double kMinDepth = 1e-6;  // meters; below this a point counts as behind the camera

// Rigid camera-to-robot transform. Applied to a point in robot base
// coordinates it yields camera-frame coordinates: X_cam = R * P + t.
struct PoseSE3 {
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();

    static PoseSE3 identity() { return PoseSE3{}; }

    Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return rotation * p + translation; }

    bool is_valid(double tol = 1e-9) const {
        const Eigen::Matrix3d err = rotation.transpose() * rotation - Eigen::Matrix3d::Identity();
        if (err.cwiseAbs().maxCoeff() > tol) return false;
        if (std::abs(rotation.determinant() - 1.0) > tol) return false;
        return rotation.allFinite() && translation.allFinite();
    }
};

inline PoseSE3 compose(const PoseSE3& a, const PoseSE3& b) {
    return PoseSE3{a.rotation * b.rotation, a.rotation * b.translation + a.translation};
}

inline PoseSE3 inverse(const PoseSE3& a) {
    const Eigen::Matrix3d rt = a.rotation.transpose();
    return PoseSE3{rt, -(rt * a.translation)};
}

struct CameraIntrinsics {
    double fx = 0.0;
    double fy = 0.0;
    double cx = 0.0;
    double cy = 0.0;
    int width = 0;
    int height = 0;

    bool is_valid() const { return fx > 0.0 && fy > 0.0 && width > 0 && height > 0; }
};

// Pinhole projection of a robot-base point through a pose. Returns nullopt
// when the camera-frame depth is at or below kMinDepth.
inline std::optional<Eigen::Vector2d> try_project(const CameraIntrinsics& k, const PoseSE3& pose,
                                                  const Eigen::Vector3d& p) {
    const Eigen::Vector3d c = pose.apply(p);
    if (c.z() <= kMinDepth) return std::nullopt;
    return Eigen::Vector2d(k.fx * c.x() / c.z() + k.cx, k.fy * c.y() / c.z() + k.cy);
}

inline Eigen::Vector2d project(const CameraIntrinsics& k, const PoseSE3& pose,
                               const Eigen::Vector3d& p) {
    auto uv = try_project(k, pose, p);
    if (!uv) throw NonPositiveDepth("project: point at or behind the camera plane");
    return *uv;
}

// 2D affine map between the raw image frame and the square network input frame.
struct AffineMap2D {
    Eigen::Matrix2d linear = Eigen::Matrix2d::Identity();
    Eigen::Vector2d offset = Eigen::Vector2d::Zero();

    Eigen::Vector2d apply(const Eigen::Vector2d& p) const { return linear * p + offset; }
};

inline Eigen::Vector2d affine_apply(const AffineMap2D& m, const Eigen::Vector2d& p) {
    return m.apply(p);
}

inline AffineMap2D affine_invert(const AffineMap2D& m) {
    const double det = m.linear.determinant();
    if (std::abs(det) <= 1e-12) throw SingularAffine("affine_invert: |det| <= 1e-12");
    AffineMap2D inv;
    inv.linear = m.linear.inverse();
    inv.offset = -(inv.linear * m.offset);
    return inv;
}

// Aspect-preserving scale plus centered padding mapping a raw image into a
// square input of side `out_size`.
inline AffineMap2D letterbox_map(int raw_width, int raw_height, int out_size) {
    if (raw_width <= 0 || raw_height <= 0 || out_size <= 0)
        throw SizeMismatch("letterbox_map: non-positive dimension");
    const double s = std::min(static_cast<double>(out_size) / raw_width,
                              static_cast<double>(out_size) / raw_height);
    AffineMap2D m;
    m.linear = Eigen::Matrix2d::Identity() * s;
    m.offset = Eigen::Vector2d((out_size - s * raw_width) * 0.5, (out_size - s * raw_height) * 0.5);
    return m;
}

inline Eigen::Matrix3d skew(const Eigen::Vector3d& w) {
    Eigen::Matrix3d s;
    s << 0.0, -w.z(), w.y(), w.z(), 0.0, -w.x(), -w.y(), w.x(), 0.0;
    return s;
}

// Rodrigues exponential of an axis-angle vector.
inline Eigen::Matrix3d so3_exp(const Eigen::Vector3d& w) {
    const double theta = w.norm();
    if (theta < 1e-12) return Eigen::Matrix3d::Identity() + skew(w);
    const Eigen::Matrix3d k = skew(w / theta);
    return Eigen::Matrix3d::Identity() + std::sin(theta) * k + (1.0 - std::cos(theta)) * k * k;
}

inline Eigen::Vector3d so3_log(const Eigen::Matrix3d& r) {
    const double c = std::clamp((r.trace() - 1.0) * 0.5, -1.0, 1.0);
    const double theta = std::acos(c);
    if (theta < 1e-12) {
        return Eigen::Vector3d(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1)) * 0.5;
    }
    if (theta > M_PI - 1e-6) {
        // Near pi the off-diagonal formula degenerates; recover the axis from R + I.
        Eigen::Matrix3d a = (r + Eigen::Matrix3d::Identity()) * 0.5;
        Eigen::Vector3d axis(std::sqrt(std::max(0.0, a(0, 0))), std::sqrt(std::max(0.0, a(1, 1))),
                             std::sqrt(std::max(0.0, a(2, 2))));
        int imax = 0;
        axis.cwiseAbs().maxCoeff(&imax);
        for (int i = 0; i < 3; ++i) {
            if (i != imax && a(imax, i) < 0.0) axis[i] = -axis[i];
        }
        axis.normalize();
        return axis * theta;
    }
    Eigen::Vector3d v(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
    return v * (theta / (2.0 * std::sin(theta)));
}

// Nearest rotation matrix in Frobenius norm, det forced to +1.
inline Eigen::Matrix3d nearest_rotation(const Eigen::Matrix3d& m) {
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d u = svd.matrixU();
    Eigen::Matrix3d v = svd.matrixV();
    if ((u * v.transpose()).determinant() < 0.0) u.col(2) = -u.col(2);
    return u * v.transpose();
}

// Geodesic angle between two rotations, radians. Measured through the log
// map: the acos-of-trace form loses all precision below ~1e-8.
inline double rotation_geodesic(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b) {
    return so3_log(a.transpose() * b).norm();
}

}  // namespace sgta
