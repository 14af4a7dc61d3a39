#pragma once

#include "facetrack/common.hpp"

#include <functional>
#include <vector>

namespace facetrack {

/// Fills r (and J when non-null) at x. The minimized cost is r.squaredNorm().
using ResidualFunction = std::function<void(const VectorX& x, VectorX& r, MatrixX* jacobian)>;

struct LeastSquaresOptions {
  int max_iterations = 100;
  double initial_damping = 1e-4;
  double max_damping = 1e12;
  double gradient_tolerance = 1e-12;
  double relative_step_tolerance = 1e-12;
  double relative_cost_tolerance = 1e-14;
  /// Box bounds; empty vectors mean unbounded. Steps are projected onto the box.
  VectorX lower;
  VectorX upper;
  /// Singular value ratio below which the final Jacobian is reported rank deficient.
  double rank_tolerance = 1e-9;
  bool check_rank = false;
};

struct LeastSquaresReport {
  double initial_cost = 0.0;
  double final_cost = 0.0;
  int iterations = 0;        // accepted steps
  int evaluations = 0;
  bool converged = false;
  bool rank_deficient = false;
  double first_step_norm = 0.0;
  std::vector<double> cost_history;  // after each accepted step, starting with the initial cost
};

/// Damped Gauss-Newton with Levenberg-Marquardt damping adaptation. A step is
/// accepted only when it lowers the cost. With bounds, coordinates pinned at a
/// bound whose gradient pushes outward are frozen for the step and the
/// trial point is clamped into the box.
LeastSquaresReport minimize_least_squares(const ResidualFunction& residual, VectorX& x,
                                          const LeastSquaresOptions& options = {});

}  // namespace facetrack
