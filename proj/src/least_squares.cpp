#include "facetrack/least_squares.hpp"

#include <Eigen/Cholesky>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>

namespace facetrack {

namespace {

void clamp_to_box(VectorX& x, const LeastSquaresOptions& o) {
  if (o.lower.size() == x.size()) x = x.cwiseMax(o.lower);
  if (o.upper.size() == x.size()) x = x.cwiseMin(o.upper);
}

}  // namespace

LeastSquaresReport minimize_least_squares(const ResidualFunction& residual, VectorX& x,
                                          const LeastSquaresOptions& options) {
  LeastSquaresReport report;
  const Eigen::Index n = x.size();
  const bool bounded = options.lower.size() == n || options.upper.size() == n;
  clamp_to_box(x, options);

  VectorX r;
  MatrixX jac;
  residual(x, r, &jac);
  ++report.evaluations;
  require(r.allFinite(), ErrorCategory::numerical, "non-finite residual at the initial point");
  double cost = r.squaredNorm();
  report.initial_cost = cost;
  report.cost_history.push_back(cost);

  double damping = options.initial_damping;
  VectorX r_trial;
  MatrixX j_trial;
  bool first_step = true;

  while (report.iterations < options.max_iterations) {
    VectorX g = jac.transpose() * r;
    std::vector<bool> free(n, true);
    if (bounded) {
      for (Eigen::Index i = 0; i < n; ++i) {
        const bool at_low = options.lower.size() == n && x[i] <= options.lower[i] && g[i] > 0.0;
        const bool at_high = options.upper.size() == n && x[i] >= options.upper[i] && g[i] < 0.0;
        if (at_low || at_high) {
          free[i] = false;
          g[i] = 0.0;
        }
      }
    }
    if (g.lpNorm<Eigen::Infinity>() <= options.gradient_tolerance * std::max(1.0, std::sqrt(cost))) {
      report.converged = true;
      break;
    }

    MatrixX h = jac.transpose() * jac;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!free[i]) {
        h.row(i).setZero();
        h.col(i).setZero();
        h(i, i) = 1.0;
      }
    }
    const VectorX diag = h.diagonal().cwiseMax(1e-12);

    bool accepted = false;
    while (damping <= options.max_damping) {
      MatrixX a = h;
      a.diagonal() += damping * diag;
      const Eigen::LDLT<MatrixX> ldlt(a);
      VectorX step = ldlt.solve(-g);
      for (Eigen::Index i = 0; i < n; ++i) {
        if (!free[i]) step[i] = 0.0;
      }
      if (!step.allFinite()) {
        damping *= 4.0;
        continue;
      }
      VectorX x_trial = x + step;
      clamp_to_box(x_trial, options);
      residual(x_trial, r_trial, &j_trial);
      ++report.evaluations;
      const double trial_cost = r_trial.allFinite() ? r_trial.squaredNorm() : INFINITY;
      if (trial_cost < cost) {
        const double step_norm = (x_trial - x).norm();
        if (first_step) {
          report.first_step_norm = step_norm;
          first_step = false;
        }
        const double decrease = cost - trial_cost;
        x = std::move(x_trial);
        r.swap(r_trial);
        jac.swap(j_trial);
        cost = trial_cost;
        ++report.iterations;
        report.cost_history.push_back(cost);
        damping = std::max(damping / 3.0, 1e-12);
        accepted = true;
        if (step_norm <= options.relative_step_tolerance * (x.norm() + options.relative_step_tolerance) ||
            decrease <= options.relative_cost_tolerance * cost) {
          report.converged = true;
        }
        break;
      }
      damping *= 4.0;
    }
    if (!accepted) {
      // No descent possible at any damping: numerically at a minimum.
      report.converged = true;
      break;
    }
    if (report.converged) break;
  }

  report.final_cost = cost;
  if (options.check_rank && jac.size() > 0) {
    const Eigen::JacobiSVD<MatrixX> svd(jac);
    const auto& s = svd.singularValues();
    const bool tall_enough = jac.rows() >= jac.cols();
    report.rank_deficient = !tall_enough || s.size() == 0 || s[s.size() - 1] <= options.rank_tolerance * s[0];
  }
  return report;
}

}  // namespace facetrack
