#include "omerf/optim.hpp"

#include <cmath>
#include <limits>

namespace omerf {

Eigen::VectorXd central_difference_gradient(const std::function<double(const Eigen::VectorXd&)>& f,
                                            const Eigen::VectorXd& x, double rel_step,
                                            int* evaluations) {
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd work = x;
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    const double h = rel_step * std::max(1.0, std::abs(x[k]));
    work[k] = x[k] + h;
    const double fp = f(work);
    work[k] = x[k] - h;
    const double fm = f(work);
    work[k] = x[k];
    g[k] = (fp - fm) / (2.0 * h);
  }
  if (evaluations) *evaluations += static_cast<int>(2 * x.size());
  return g;
}

BfgsResult minimize_bfgs(const std::function<double(const Eigen::VectorXd&)>& f, Eigen::VectorXd x0,
                         const BfgsOptions& options) {
  const Eigen::Index n = x0.size();
  BfgsResult res;
  res.x = std::move(x0);
  res.f = f(res.x);
  res.evaluations = 1;
  if (!std::isfinite(res.f)) return res;
  Eigen::VectorXd g = central_difference_gradient(f, res.x, options.fd_step, &res.evaluations);
  Eigen::MatrixXd inv_h = Eigen::MatrixXd::Identity(n, n);
  int stalled = 0;

  for (res.iterations = 0; res.iterations < options.max_iterations; ++res.iterations) {
    res.gradient_inf = g.lpNorm<Eigen::Infinity>();
    const double tol = options.gradient_tolerance * std::max(1.0, std::abs(res.f));
    if (res.gradient_inf < tol) {
      res.converged = true;
      return res;
    }
    Eigen::VectorXd d = -inv_h * g;
    double slope = g.dot(d);
    if (!(slope < 0.0)) {
      inv_h.setIdentity();
      d = -g;
      slope = g.dot(d);
    }
    double t = std::min(1.0, options.max_step / std::max(d.lpNorm<Eigen::Infinity>(), 1e-300));
    Eigen::VectorXd x_new;
    double f_new = std::numeric_limits<double>::infinity();
    bool accepted = false;
    for (int k = 0; k < 60; ++k) {
      x_new = res.x + t * d;
      f_new = f(x_new);
      ++res.evaluations;
      if (std::isfinite(f_new) && f_new <= res.f + 1e-4 * t * slope) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) {
      // No descent along d: either at the numerical noise floor or the
      // curvature estimate is stale.
      if (!inv_h.isIdentity()) {
        inv_h.setIdentity();
        continue;
      }
      res.converged = res.gradient_inf < 100.0 * tol;
      return res;
    }
    const Eigen::VectorXd g_new = central_difference_gradient(f, x_new, options.fd_step, &res.evaluations);
    const Eigen::VectorXd s = x_new - res.x;
    const Eigen::VectorXd y = g_new - g;
    const double sy = s.dot(y);
    const double change = res.f - f_new;
    res.x = x_new;
    res.f = f_new;
    g = g_new;
    if (sy > 1e-12 * s.norm() * y.norm()) {
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
      inv_h = (I - rho * s * y.transpose()) * inv_h * (I - rho * y * s.transpose()) + rho * s * s.transpose();
    }
    stalled = change <= 1e-13 * std::max(1.0, std::abs(res.f)) ? stalled + 1 : 0;
    if (stalled >= 3) {
      res.gradient_inf = g.lpNorm<Eigen::Infinity>();
      res.converged = res.gradient_inf < 100.0 * options.gradient_tolerance * std::max(1.0, std::abs(res.f));
      return res;
    }
  }
  res.gradient_inf = g.lpNorm<Eigen::Infinity>();
  return res;
}

}  // namespace omerf
