#include "facetrack/rotation.hpp"

#include <Eigen/Geometry>

#include <cmath>

namespace facetrack {

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
       -v.y(), v.x(), 0.0;
  return m;
}

Mat3 rotation_from_axis_angle(const Vec3& omega) {
  const double angle = omega.norm();
  if (angle < 1e-12) return Mat3::Identity() + skew(omega);
  return Eigen::AngleAxisd(angle, omega / angle).toRotationMatrix();
}

Vec3 axis_angle_from_rotation(const Mat3& rotation) {
  const Eigen::AngleAxisd aa(rotation);
  return aa.axis() * aa.angle();
}

Mat3 so3_left_jacobian(const Vec3& omega) {
  const double t2 = omega.squaredNorm();
  const Mat3 w = skew(omega);
  double a, b;
  if (t2 < 1e-8) {
    // Taylor expansions of (1 - cos t)/t^2 and (t - sin t)/t^3.
    a = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
    b = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0;
  } else {
    const double t = std::sqrt(t2);
    a = (1.0 - std::cos(t)) / t2;
    b = (t - std::sin(t)) / (t2 * t);
  }
  return Mat3::Identity() + a * w + b * w * w;
}

Mat3 rotate_point_jacobian(const Vec3& omega, const Vec3& v) {
  const Vec3 rv = rotation_from_axis_angle(omega) * v;
  return -skew(rv) * so3_left_jacobian(omega);
}

}  // namespace facetrack
