#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace stmd {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Unit quaternion rotation. Every constructor normalizes.
class Rotation {
 public:
  Rotation() : q_(Eigen::Quaterniond::Identity()) {}
  Rotation(double w, double x, double y, double z);
  explicit Rotation(const Eigen::Quaterniond& q);

  static Rotation identity() { return {}; }
  static Rotation from_matrix(const Mat3& m);

  double w() const { return q_.w(); }
  double x() const { return q_.x(); }
  double y() const { return q_.y(); }
  double z() const { return q_.z(); }
  const Eigen::Quaterniond& quaternion() const { return q_; }

  Mat3 matrix() const { return q_.toRotationMatrix(); }
  Rotation inverse() const { return Rotation(q_.conjugate()); }
  Vec3 apply(const Vec3& v) const { return q_ * v; }
  /// Rotation angle in [0, pi].
  double angle() const;

  Rotation operator*(const Rotation& other) const { return Rotation(q_ * other.q_); }

 private:
  Eigen::Quaterniond q_;
};

/// Exponential map from an axis-angle vector (radians).
Rotation exp_so3(const Vec3& axis_angle);

/// Inverse of exp_so3 on angles in [0, pi]. Near pi the axis is read from the
/// symmetric part of the matrix; the sign of the axis at exactly pi is
/// arbitrary, so the map is discontinuous there.
Vec3 log_so3(const Rotation& r);

/// Geodesic angle between two rotations.
double rotation_distance(const Rotation& a, const Rotation& b);

Mat3 skew(const Vec3& v);

struct RigidFrame {
  Rotation rotation;
  Vec3 translation = Vec3::Zero();

  static RigidFrame identity() { return {}; }
  Vec3 apply(const Vec3& p) const { return rotation.apply(p) + translation; }
  RigidFrame inverse() const;
};

/// (a o b)(p) = a(b(p)).
RigidFrame compose(const RigidFrame& a, const RigidFrame& b);

}  // namespace stmd
