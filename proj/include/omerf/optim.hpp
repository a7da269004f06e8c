#pragma once

#include <Eigen/Dense>

#include <functional>

namespace omerf {

struct BfgsOptions {
  int max_iterations = 200;
  /// Stop when max |g| < gradient_tolerance * max(1, |f|).
  double gradient_tolerance = 1e-5;
  /// Central-difference step, relative to max(1, |x_k|).
  double fd_step = 1e-6;
  /// Largest coordinate change allowed in one line-search trial.
  double max_step = 5.0;
};

struct BfgsResult {
  Eigen::VectorXd x;
  double f = 0.0;
  double gradient_inf = 0.0;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
};

Eigen::VectorXd central_difference_gradient(const std::function<double(const Eigen::VectorXd&)>& f,
                                            const Eigen::VectorXd& x, double rel_step,
                                            int* evaluations = nullptr);

/// Quasi-Newton minimisation with numerical gradients and Armijo backtracking.
/// Non-finite objective values are treated as infeasible and backtracked.
BfgsResult minimize_bfgs(const std::function<double(const Eigen::VectorXd&)>& f, Eigen::VectorXd x0,
                         const BfgsOptions& options = {});

}  // namespace omerf
