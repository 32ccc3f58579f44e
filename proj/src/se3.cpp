#include "stmd/se3.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace stmd {

namespace {

Eigen::Quaterniond normalized_canonical(Eigen::Quaterniond q) {
  q.normalize();
  // Second pass brings the norm to within one ulp of 1.
  q.normalize();
  return q;
}

}  // namespace

Rotation::Rotation(double w, double x, double y, double z)
    : q_(normalized_canonical(Eigen::Quaterniond(w, x, y, z))) {}

Rotation::Rotation(const Eigen::Quaterniond& q) : q_(normalized_canonical(q)) {}

Rotation Rotation::from_matrix(const Mat3& m) { return Rotation(Eigen::Quaterniond(m)); }

double Rotation::angle() const {
  const double vn = q_.vec().norm();
  return 2.0 * std::atan2(vn, std::abs(q_.w()));
}

Mat3 skew(const Vec3& v) {
  Mat3 s;
  s << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return s;
}

Rotation exp_so3(const Vec3& v) {
  const double theta = v.norm();
  const double half = 0.5 * theta;
  // sin(theta/2)/theta, series below 1e-4 where the ratio loses precision.
  double k;
  if (theta < 1e-4) {
    const double t2 = theta * theta;
    k = 0.5 - t2 / 48.0 + t2 * t2 / 3840.0;
  } else {
    k = std::sin(half) / theta;
  }
  return Rotation(std::cos(half), k * v.x(), k * v.y(), k * v.z());
}

Vec3 log_so3(const Rotation& r) {
  Eigen::Quaterniond q = r.quaternion();
  if (q.w() < 0.0) q.coeffs() *= -1.0;
  const double vn = q.vec().norm();
  const double theta = 2.0 * std::atan2(vn, q.w());
  if (theta < std::numbers::pi - 1e-6) {
    if (vn < 1e-12) {
      // theta ~ 2 vn; first-order inverse.
      return 2.0 * q.vec() / std::max(q.w(), 1e-300);
    }
    return theta / vn * q.vec();
  }
  // Near pi: R + R^T = 2 cos(theta) I + 2 (1 - cos(theta)) n n^T.
  const Mat3 m = r.matrix();
  const Mat3 sym = 0.5 * (m + m.transpose());
  const double c = std::cos(theta);
  Mat3 nn = (sym - c * Mat3::Identity()) / (1.0 - c);
  int col = 0;
  nn.diagonal().maxCoeff(&col);
  Vec3 axis = nn.col(col) / std::sqrt(std::max(nn(col, col), 1e-300));
  axis.normalize();
  // Orient the axis using the antisymmetric part when it is still resolvable.
  const Vec3 anti(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1));
  if (anti.dot(axis) < 0.0) axis = -axis;
  return theta * axis;
}

double rotation_distance(const Rotation& a, const Rotation& b) { return (a.inverse() * b).angle(); }

RigidFrame RigidFrame::inverse() const {
  RigidFrame out;
  out.rotation = rotation.inverse();
  out.translation = -out.rotation.apply(translation);
  return out;
}

RigidFrame compose(const RigidFrame& a, const RigidFrame& b) {
  RigidFrame out;
  out.rotation = a.rotation * b.rotation;
  out.translation = a.rotation.apply(b.translation) + a.translation;
  return out;
}

}  // namespace stmd
