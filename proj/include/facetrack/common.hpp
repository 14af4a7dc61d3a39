#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace facetrack {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using VectorX = Eigen::VectorXd;
using MatrixX = Eigen::MatrixXd;

/// Columns are vertices, rows are x/y/z in meters.
using VertexArray = Eigen::Matrix3Xd;
/// Columns are 2D image points in pixels.
using Points2D = Eigen::Matrix2Xd;

enum class ErrorCategory {
  invalid_input,
  dimension_mismatch,
  behind_camera,
  io,
  format,
  numerical,
  missing_data,
};

const char* to_string(ErrorCategory category) noexcept;

/// Exit code used by the command line tool for each category.
int exit_code(ErrorCategory category) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& message)
      : std::runtime_error(message), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

[[noreturn]] inline void fail(ErrorCategory category, const std::string& message) {
  throw Error(category, message);
}

inline void require(bool condition, ErrorCategory category, const std::string& message) {
  if (!condition) fail(category, message);
}

}  // namespace facetrack
