#pragma once

#include "facetrack/common.hpp"

namespace facetrack {

Mat3 skew(const Vec3& v);

/// Rotation matrix of an axis-angle vector (exponential map).
Mat3 rotation_from_axis_angle(const Vec3& omega);

/// Canonical axis-angle vector with angle in [0, pi].
Vec3 axis_angle_from_rotation(const Mat3& rotation);

/// Left Jacobian of SO(3): R(omega + d) ~= Exp(J_l(omega) d) R(omega).
Mat3 so3_left_jacobian(const Vec3& omega);

/// d(R(omega) v)/d(omega) as a 3x3 matrix.
Mat3 rotate_point_jacobian(const Vec3& omega, const Vec3& v);

}  // namespace facetrack
