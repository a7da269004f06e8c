#include "omerf/clmm.hpp"

#include "omerf/optim.hpp"

#include <algorithm>
#include <limits>

namespace omerf {

namespace {

std::vector<std::vector<std::size_t>> rows_by_group(const GroupedOrdinalDataset& data) {
  std::vector<std::vector<std::size_t>> rows(static_cast<std::size_t>(data.num_groups()));
  for (std::size_t r = 0; r < data.rows(); ++r) rows[static_cast<std::size_t>(data.group[r])].push_back(r);
  return rows;
}

// x beta + offset, without random effects.
Eigen::VectorXd fixed_part(const GroupedOrdinalDataset& data, const Eigen::VectorXd& beta,
                           const Eigen::VectorXd& offset) {
  Eigen::VectorXd base = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(data.rows()));
  if (beta.size() > 0) {
    if (beta.size() != data.x.cols()) throw ValidationError("beta length differs from x columns");
    base = data.x * beta;
  }
  if (offset.size() > 0) {
    if (offset.size() != base.size()) throw ValidationError("offset length differs from rows");
    base += offset;
  }
  return base;
}

void require_labels(const GroupedOrdinalDataset& data) {
  if (!data.has_labels()) throw ValidationError("dataset has no labels");
}

double sd_from_log(double log_sd) { return std::exp(std::clamp(log_sd, kLogSdFloor, 15.0)); }

struct GroupMode {
  Eigen::VectorXd b;
  Eigen::MatrixXd neg_hessian;
  bool converged = false;
  int iterations = 0;
};

// h(b) = sum_j log P(y_j | base_j + z_j b) - 0.5 b' diag(1/sigma2) b
double group_objective(const ThresholdVector& theta, const GroupedOrdinalDataset& data,
                       const Eigen::VectorXd& base, const std::vector<std::size_t>& rows,
                       const Eigen::VectorXd& b, const Eigen::VectorXd& precision) {
  const Eigen::Index K = b.size();
  double h = 0.0;
  for (std::size_t r : rows) {
    const auto ri = static_cast<Eigen::Index>(r);
    const double lambda = base[ri] + data.z.row(ri).head(K).dot(b);
    h += category_log_prob(theta, lambda, data.y[r]);
  }
  return h - 0.5 * (b.array().square() * precision.array()).sum();
}

GroupMode newton_group(const ThresholdVector& theta, const GroupedOrdinalDataset& data,
                       const Eigen::VectorXd& base, const std::vector<std::size_t>& rows,
                       const Eigen::VectorXd& precision, Eigen::VectorXd b,
                       const InnerOptions& opt) {
  const Eigen::Index K = b.size();
  GroupMode out;
  Eigen::VectorXd grad(K);
  Eigen::MatrixXd H(K, K);
  auto derivatives = [&](const Eigen::VectorXd& at) {
    grad = -(precision.array() * at.array()).matrix();
    H = precision.asDiagonal();
    for (std::size_t r : rows) {
      const auto ri = static_cast<Eigen::Index>(r);
      const auto zr = data.z.row(ri).head(K);
      const double lambda = base[ri] + zr.dot(at);
      const CategoryDerivs d = category_derivs(theta, lambda, data.y[r]);
      grad += d.dlambda() * zr.transpose();
      H -= d.d2lambda() * zr.transpose() * zr;
    }
  };

  double h = group_objective(theta, data, base, rows, b, precision);
  for (out.iterations = 0; out.iterations < opt.max_iterations; ++out.iterations) {
    derivatives(b);
    if (grad.lpNorm<Eigen::Infinity>() < opt.gradient_tolerance) {
      out.converged = true;
      break;
    }
    const Eigen::VectorXd step = H.ldlt().solve(grad);
    double t = 1.0;
    bool improved = false;
    for (int k = 0; k <= opt.max_halvings; ++k) {
      const Eigen::VectorXd trial = b + t * step;
      const double h_trial = group_objective(theta, data, base, rows, trial, precision);
      if (h_trial >= h) {
        b = trial;
        improved = h_trial > h;
        h = h_trial;
        break;
      }
      t *= 0.5;
    }
    if (!improved) {
      // No representable ascent left: converged if the Newton decrement is
      // below the rounding level of h.
      const double decrement = grad.dot(step);
      out.converged = decrement <= 1e-10 * std::max(1.0, std::abs(h));
      break;
    }
  }
  derivatives(b);
  out.b = std::move(b);
  out.neg_hessian = H;
  return out;
}

}  // namespace

Eigen::VectorXd linear_predictor(const GroupedOrdinalDataset& data, std::span<const int> group,
                                 const Eigen::VectorXd& beta, const Eigen::MatrixXd& b,
                                 const Eigen::VectorXd& offset) {
  Eigen::VectorXd lambda = fixed_part(data, beta, offset);
  const Eigen::Index K = b.cols();
  if (K > data.z.cols()) throw ValidationError("more random effects than z columns");
  for (std::size_t r = 0; r < data.rows(); ++r) {
    const int g = group[r];
    if (g < 0 || K == 0) continue;
    if (g >= b.rows()) throw ValidationError("group index outside the random-effect table");
    const auto ri = static_cast<Eigen::Index>(r);
    lambda[ri] += data.z.row(ri).head(K).dot(b.row(g));
  }
  return lambda;
}

double conditional_loglik(const ThresholdVector& theta, const Eigen::VectorXd& beta,
                          const Eigen::MatrixXd& b, const GroupedOrdinalDataset& data,
                          const Eigen::VectorXd& offset) {
  require_labels(data);
  const Eigen::VectorXd lambda = linear_predictor(data, data.group, beta, b, offset);
  double ll = 0.0;
  for (std::size_t r = 0; r < data.rows(); ++r) {
    ll += category_log_prob(theta, lambda[static_cast<Eigen::Index>(r)], data.y[r]);
  }
  return ll;
}

ConditionalGradient conditional_loglik_gradient(const ThresholdVector& theta,
                                                const Eigen::VectorXd& beta,
                                                const Eigen::MatrixXd& b,
                                                const GroupedOrdinalDataset& data,
                                                const Eigen::VectorXd& offset) {
  require_labels(data);
  const Eigen::VectorXd lambda = linear_predictor(data, data.group, beta, b, offset);
  ConditionalGradient g;
  g.theta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(theta.size()));
  g.beta = Eigen::VectorXd::Zero(beta.size());
  g.b = Eigen::MatrixXd::Zero(b.rows(), b.cols());
  const Eigen::Index K = b.cols();
  for (std::size_t r = 0; r < data.rows(); ++r) {
    const auto ri = static_cast<Eigen::Index>(r);
    const int c = data.y[r];
    const CategoryDerivs d = category_derivs(theta, lambda[ri], c);
    if (d.has_upper) g.theta[c - 1] += d.da;
    if (d.has_lower) g.theta[c - 2] += d.db;
    const double dl = d.dlambda();
    if (beta.size() > 0) g.beta += dl * data.x.row(ri).transpose();
    if (K > 0) g.b.row(data.group[r]) += dl * data.z.row(ri).head(K);
  }
  return g;
}

bool InnerModes::all_converged() const {
  return std::all_of(converged.begin(), converged.end(), [](bool c) { return c; });
}

InnerModes inner_newton_modes(const ThresholdVector& theta, const Eigen::VectorXd& beta,
                              const Eigen::VectorXd& sigma2, const GroupedOrdinalDataset& data,
                              const Eigen::VectorXd& offset, const Eigen::MatrixXd& start,
                              const InnerOptions& options) {
  require_labels(data);
  const Eigen::Index K = sigma2.size();
  if (K < 1 || K > data.z.cols()) throw ValidationError("inner Newton: bad random-effect dimension");
  if ((sigma2.array() <= 0.0).any()) throw ValidationError("inner Newton: variances must be positive");
  const int I = data.num_groups();
  if (start.rows() != I || start.cols() != K) throw ValidationError("inner Newton: start has wrong shape");

  const Eigen::VectorXd base = fixed_part(data, beta, offset);
  const auto rows = rows_by_group(data);
  const Eigen::VectorXd precision = sigma2.cwiseInverse();

  InnerModes out;
  out.modes.resize(I, K);
  out.neg_hessian.resize(static_cast<std::size_t>(I));
  std::vector<int> iters(static_cast<std::size_t>(I), 0);
  std::vector<char> conv(static_cast<std::size_t>(I), 0);
  parallel_for(static_cast<std::size_t>(I), options.threads, [&](std::size_t i) {
    const auto ii = static_cast<Eigen::Index>(i);
    GroupMode m = newton_group(theta, data, base, rows[i], precision, start.row(ii).transpose(), options);
    out.modes.row(ii) = m.b.transpose();
    out.neg_hessian[i] = std::move(m.neg_hessian);
    conv[i] = m.converged ? 1 : 0;
    iters[i] = m.iterations;
  });
  out.converged.assign(conv.begin(), conv.end());
  out.max_iterations = *std::max_element(iters.begin(), iters.end());
  return out;
}

LaplaceValue laplace_marginal(const ThresholdVector& theta, const Eigen::VectorXd& beta,
                              const Eigen::VectorXd& log_sd, const GroupedOrdinalDataset& data,
                              const Eigen::VectorXd& offset, const std::optional<Eigen::MatrixXd>& start,
                              const InnerOptions& options) {
  const Eigen::Index K = log_sd.size();
  Eigen::VectorXd sigma2(K);
  for (Eigen::Index k = 0; k < K; ++k) sigma2[k] = std::pow(sd_from_log(log_sd[k]), 2);
  const Eigen::MatrixXd b0 = start ? *start : Eigen::MatrixXd::Zero(data.num_groups(), K);

  LaplaceValue out;
  out.inner = inner_newton_modes(theta, beta, sigma2, data, offset, b0, options);
  const Eigen::VectorXd base = fixed_part(data, beta, offset);
  const auto rows = rows_by_group(data);
  const double log_det_sigma = sigma2.array().log().sum();
  double total = 0.0;
  for (int i = 0; i < data.num_groups(); ++i) {
    const Eigen::VectorXd b = out.inner.modes.row(i).transpose();
    // log p(y|b) + log phi(b) + K/2 log 2pi: the 2pi terms cancel.
    const double h = group_objective(theta, data, base, rows[static_cast<std::size_t>(i)], b,
                                     sigma2.cwiseInverse());
    const double log_det_h = out.inner.neg_hessian[static_cast<std::size_t>(i)].ldlt().vectorD().array().log().sum();
    total += h - 0.5 * log_det_sigma - 0.5 * log_det_h;
  }
  if (!out.inner.all_converged()) total -= 1e6;
  out.value = total;
  return out;
}

double laplace_marginal_loglik(const ThresholdVector& theta, const Eigen::VectorXd& beta,
                               const Eigen::VectorXd& log_sd, const GroupedOrdinalDataset& data,
                               const Eigen::VectorXd& offset) {
  return laplace_marginal(theta, beta, log_sd, data, offset).value;
}

Eigen::VectorXd thresholds_to_unconstrained(const ThresholdVector& theta) {
  Eigen::VectorXd u(static_cast<Eigen::Index>(theta.size()));
  u[0] = theta[0];
  for (std::size_t c = 1; c < theta.size(); ++c) u[static_cast<Eigen::Index>(c)] = std::log(theta[c] - theta[c - 1]);
  return u;
}

ThresholdVector thresholds_from_unconstrained(const Eigen::VectorXd& u) {
  std::vector<double> t(static_cast<std::size_t>(u.size()));
  t[0] = u[0];
  for (Eigen::Index c = 1; c < u.size(); ++c) {
    t[static_cast<std::size_t>(c)] = t[static_cast<std::size_t>(c - 1)] + std::max(std::exp(u[c]), 1e-12);
  }
  return ThresholdVector(std::move(t));
}

ThresholdVector empirical_thresholds(const std::vector<int>& y, int num_categories) {
  if (num_categories < 2) throw ValidationError("need at least 2 categories");
  std::vector<double> count(static_cast<std::size_t>(num_categories), 0.0);
  for (int v : y) count[static_cast<std::size_t>(v - 1)] += 1.0;
  const double n = static_cast<double>(y.size());
  std::vector<double> theta(static_cast<std::size_t>(num_categories - 1));
  double cum = 0.0;
  for (int c = 0; c < num_categories - 1; ++c) {
    cum += count[static_cast<std::size_t>(c)];
    theta[static_cast<std::size_t>(c)] = logit(clamp_prob(cum / n));
    if (c > 0) theta[c] = std::max(theta[c], theta[c - 1] + 1e-3);
  }
  return ThresholdVector(std::move(theta));
}

// ---------------------------------------------------------------------------
// CLMM

namespace {

void check_fit_data(const GroupedOrdinalDataset& data) {
  require_labels(data);
  if (data.observed_categories() < 2) {
    throw ValidationError("response has fewer than 2 observed categories");
  }
}

struct ParamLayout {
  Eigen::Index n_theta, n_beta, n_sd;
  Eigen::Index size() const { return n_theta + n_beta + n_sd; }

  Eigen::VectorXd pack(const ThresholdVector& theta, const Eigen::VectorXd& beta,
                       const Eigen::VectorXd& log_sd) const {
    Eigen::VectorXd u(size());
    u.head(n_theta) = thresholds_to_unconstrained(theta);
    if (n_beta) u.segment(n_theta, n_beta) = beta;
    u.tail(n_sd) = log_sd;
    return u;
  }
  ThresholdVector theta(const Eigen::VectorXd& u) const { return thresholds_from_unconstrained(u.head(n_theta)); }
  Eigen::VectorXd beta(const Eigen::VectorXd& u) const {
    return n_beta ? Eigen::VectorXd(u.segment(n_theta, n_beta)) : Eigen::VectorXd();
  }
  Eigen::VectorXd log_sd(const Eigen::VectorXd& u) const { return u.tail(n_sd); }
};

}  // namespace

ClmmFit fit_clmm(const GroupedOrdinalDataset& data, const RandomEffectsSpec& spec,
                 const Eigen::VectorXd& offset, bool fixed_effects, const ClmmOptions& options) {
  check_fit_data(data);
  const int K = spec.num_effects();
  if (spec.q_slopes < 0 || K > data.z.cols()) {
    throw ValidationError("random-effects spec asks for more slopes than the data provides");
  }
  if (offset.size() != 0 && offset.size() != static_cast<Eigen::Index>(data.rows())) {
    throw ValidationError("offset length differs from rows");
  }
  const ParamLayout layout{static_cast<Eigen::Index>(data.num_categories - 1),
                           fixed_effects ? data.x.cols() : 0, K};
  InnerOptions inner_opt;
  inner_opt.threads = options.threads;

  Eigen::MatrixXd warm_modes = Eigen::MatrixXd::Zero(data.num_groups(), K);
  int total_evals = 0;
  auto objective = [&](const Eigen::VectorXd& u) {
    ++total_evals;
    const auto res = laplace_marginal(layout.theta(u), layout.beta(u), layout.log_sd(u), data, offset,
                                      warm_modes, inner_opt);
    if (res.inner.all_converged()) warm_modes = res.inner.modes;
    return -res.value;
  };

  ThresholdVector theta0 = empirical_thresholds(data.y, data.num_categories);
  if (offset.size() > 0) theta0 = theta0.shifted(offset.mean());

  std::vector<Eigen::VectorXd> starts;
  if (options.warm_theta) {
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(layout.n_beta);
    if (options.warm_beta && options.warm_beta->size() == layout.n_beta) beta = *options.warm_beta;
    Eigen::VectorXd ls = Eigen::VectorXd::Zero(K);
    if (options.warm_log_sd && options.warm_log_sd->size() == K) ls = *options.warm_log_sd;
    starts.push_back(layout.pack(*options.warm_theta, beta, ls));
  }
  for (double ls : options.start_log_sd) {
    starts.push_back(layout.pack(theta0, Eigen::VectorXd::Zero(layout.n_beta), Eigen::VectorXd::Constant(K, ls)));
  }

  BfgsOptions bfgs;
  bfgs.max_iterations = options.max_outer_iterations;
  bfgs.gradient_tolerance = options.gradient_tolerance;
  bfgs.fd_step = options.fd_step;

  std::optional<BfgsResult> best;
  int starts_used = 0;
  int total_iterations = 0;
  for (const auto& u0 : starts) {
    ++starts_used;
    warm_modes.setZero();
    BfgsResult r = minimize_bfgs(objective, u0, bfgs);
    total_iterations += r.iterations;
    const bool better = !best || (std::isfinite(r.f) && r.f < best->f);
    if (better) best = r;
    if (r.converged) {
      best = r;
      break;
    }
  }

  // Final modes at the optimum from a cold start.
  const Eigen::VectorXd& u = best->x;
  ClmmFit fit;
  fit.theta = layout.theta(u);
  fit.beta = layout.beta(u);
  const Eigen::VectorXd ls = layout.log_sd(u);
  const auto lap = laplace_marginal(fit.theta, fit.beta, ls, data, offset, std::nullopt, inner_opt);
  fit.marginal_loglik = lap.value;
  fit.sigma2.resize(K);
  fit.b_modes = lap.inner.modes;
  fit.b_sd.resize(data.num_groups(), K);
  for (int i = 0; i < data.num_groups(); ++i) {
    const Eigen::MatrixXd cov = lap.inner.neg_hessian[static_cast<std::size_t>(i)].inverse();
    fit.b_sd.row(i) = cov.diagonal().cwiseMax(0.0).cwiseSqrt().transpose();
  }
  for (int k = 0; k < K; ++k) {
    if (ls[k] <= kLogSdFloor) {
      fit.sigma2[k] = 0.0;
      fit.b_modes.col(k).setZero();
      fit.b_sd.col(k).setZero();
    } else {
      fit.sigma2[k] = std::pow(sd_from_log(ls[k]), 2);
    }
  }
  fit.offset_used = offset.size() > 0;
  fit.converged = best->converged;
  fit.iterations = total_iterations;
  fit.function_evals = total_evals;
  fit.starts_used = starts_used;
  fit.single_group = data.num_groups() < 2;
  fit.group_labels = data.group_labels;
  if (fixed_effects) fit.feature_names = data.feature_names;
  fit.slope_names.assign(data.slope_names.begin(), data.slope_names.begin() + spec.q_slopes);
  if (!fit.converged) {
    throw ClmmConvergenceError("CLMM did not converge after " + std::to_string(starts_used) + " starts", fit);
  }
  return fit;
}

// ---------------------------------------------------------------------------
// CLM

ClmFit fit_clm(const GroupedOrdinalDataset& data, bool fixed_effects, const Eigen::VectorXd& offset) {
  check_fit_data(data);
  const Eigen::Index T = data.num_categories - 1;
  const Eigen::Index P = fixed_effects ? data.x.cols() : 0;
  const Eigen::Index n = T + P;
  const Eigen::MatrixXd empty_b(0, 0);

  ThresholdVector theta0 = empirical_thresholds(data.y, data.num_categories);
  if (offset.size() > 0) theta0 = theta0.shifted(offset.mean());
  Eigen::VectorXd params(n);
  for (Eigen::Index c = 0; c < T; ++c) params[c] = theta0[static_cast<std::size_t>(c)];
  params.tail(P).setZero();

  auto ordered = [&](const Eigen::VectorXd& p) {
    for (Eigen::Index c = 1; c < T; ++c) {
      if (!(p[c] > p[c - 1])) return false;
    }
    return p.allFinite();
  };
  auto split = [&](const Eigen::VectorXd& p) {
    return std::pair{ThresholdVector(std::vector<double>(p.data(), p.data() + T)), Eigen::VectorXd(p.tail(P))};
  };
  auto loglik = [&](const Eigen::VectorXd& p) {
    const auto [th, be] = split(p);
    return conditional_loglik(th, be, empty_b, data, offset);
  };

  Eigen::VectorXd grad(n);
  Eigen::MatrixXd hess(n, n);
  auto derivatives = [&](const Eigen::VectorXd& p) {
    const auto [th, be] = split(p);
    const Eigen::VectorXd lambda = linear_predictor(data, data.group, be, empty_b, offset);
    grad.setZero();
    hess.setZero();
    Eigen::VectorXd v(n);  // d lambda-direction helper
    for (std::size_t r = 0; r < data.rows(); ++r) {
      const auto ri = static_cast<Eigen::Index>(r);
      const int c = data.y[r];
      const CategoryDerivs d = category_derivs(th, lambda[ri], c);
      const Eigen::Index up = c - 1, lo = c - 2;
      if (d.has_upper) grad[up] += d.da;
      if (d.has_lower) grad[lo] += d.db;
      if (P) grad.tail(P) += d.dlambda() * data.x.row(ri).transpose();
      if (d.has_upper) hess(up, up) += d.daa;
      if (d.has_lower) hess(lo, lo) += d.dbb;
      if (d.has_upper && d.has_lower) {
        hess(up, lo) += d.dab;
        hess(lo, up) += d.dab;
      }
      if (P) {
        const auto xr = data.x.row(ri).transpose();
        if (d.has_upper) {
          const Eigen::VectorXd cross = -(d.daa + d.dab) * xr;
          hess.block(T, up, P, 1) += cross;
          hess.block(up, T, 1, P) += cross.transpose();
        }
        if (d.has_lower) {
          const Eigen::VectorXd cross = -(d.dab + d.dbb) * xr;
          hess.block(T, lo, P, 1) += cross;
          hess.block(lo, T, 1, P) += cross.transpose();
        }
        hess.bottomRightCorner(P, P) += d.d2lambda() * xr * xr.transpose();
      }
    }
  };

  ClmFit fit;
  double ll = loglik(params);
  const double J = static_cast<double>(data.rows());
  for (fit.iterations = 0; fit.iterations < 100; ++fit.iterations) {
    derivatives(params);
    fit.gradient_norm = grad.lpNorm<Eigen::Infinity>() / J;
    if (fit.gradient_norm < 1e-10) {
      fit.converged = true;
      break;
    }
    // Negative Hessian is positive semi-definite (log-concave likelihood);
    // a small ridge keeps zero-variance covariates solvable.
    Eigen::MatrixXd neg = -hess;
    neg.diagonal().array() += 1e-10 * std::max(1.0, neg.diagonal().cwiseAbs().maxCoeff());
    const Eigen::VectorXd step = neg.ldlt().solve(grad);
    double t = 1.0;
    bool improved = false;
    for (int k = 0; k < 40; ++k) {
      const Eigen::VectorXd trial = params + t * step;
      if (ordered(trial)) {
        const double ll_trial = loglik(trial);
        if (ll_trial >= ll) {
          improved = ll_trial > ll || t == 1.0;
          params = trial;
          ll = ll_trial;
          break;
        }
      }
      t *= 0.5;
    }
    if (!improved) {
      fit.converged = fit.gradient_norm < 1e-6;
      break;
    }
  }
  const auto [th, be] = split(params);
  fit.theta = th;
  fit.beta = be;
  fit.loglik = ll;
  if (fixed_effects) fit.feature_names = data.feature_names;
  for (Eigen::Index k = 0; k < P; ++k) {
    const auto col = data.x.col(k);
    const double mean = col.mean();
    const double sd = std::sqrt((col.array() - mean).square().sum() / std::max(1.0, J - 1.0));
    if (std::abs(be[k] * sd) > 30.0) fit.separation = true;
  }
  return fit;
}

Eigen::MatrixXd predict_probs(const ThresholdVector& theta, const Eigen::VectorXd& lambda) {
  const int C = theta.num_categories();
  Eigen::MatrixXd out(lambda.size(), C);
  for (Eigen::Index r = 0; r < lambda.size(); ++r) {
    const auto pi = category_probs(theta, lambda[r]);
    for (int c = 0; c < C; ++c) out(r, c) = pi[static_cast<std::size_t>(c)];
  }
  return out;
}

double icc(double sigma2_intercept) {
  if (sigma2_intercept < 0.0) throw ValidationError("icc: variance must be >= 0");
  return sigma2_intercept / (sigma2_intercept + LinkFunction::residual_variance);
}

// ---------------------------------------------------------------------------
// JSON

namespace {

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j, Eigen::Index cols) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(j.size()), cols);
  for (std::size_t r = 0; r < j.size(); ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(static_cast<Eigen::Index>(r), c) = j[r][static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

Eigen::VectorXd to_eigen(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

nlohmann::json ClmFit::to_json() const {
  return {{"thresholds", theta.values()}, {"coefficients", to_std(beta)}, {"feature_names", feature_names},
          {"loglik", loglik},             {"iterations", iterations},      {"converged", converged},
          {"gradient_norm", gradient_norm}, {"separation", separation}};
}

ClmFit ClmFit::from_json(const nlohmann::json& j) {
  ClmFit f;
  f.theta = ThresholdVector(j.at("thresholds").get<std::vector<double>>());
  f.beta = to_eigen(j.at("coefficients").get<std::vector<double>>());
  f.feature_names = j.value("feature_names", std::vector<std::string>{});
  f.loglik = j.value("loglik", 0.0);
  f.iterations = j.value("iterations", 0);
  f.converged = j.value("converged", false);
  f.gradient_norm = j.value("gradient_norm", 0.0);
  f.separation = j.value("separation", false);
  return f;
}

nlohmann::json ClmmFit::to_json() const {
  nlohmann::json groups = nlohmann::json::array();
  for (Eigen::Index i = 0; i < b_modes.rows(); ++i) {
    groups.push_back({{"group", group_labels.at(static_cast<std::size_t>(i))},
                      {"mode", to_std(b_modes.row(i).transpose())},
                      {"sd", to_std(b_sd.row(i).transpose())}});
  }
  return {{"thresholds", theta.values()},
          {"coefficients", to_std(beta)},
          {"feature_names", feature_names},
          {"slope_names", slope_names},
          {"variances", to_std(sigma2)},
          {"random_effects", std::move(groups)},
          {"marginal_loglik", marginal_loglik},
          {"offset_used", offset_used},
          {"converged", converged},
          {"iterations", iterations},
          {"function_evals", function_evals},
          {"starts_used", starts_used},
          {"single_group", single_group}};
}

ClmmFit ClmmFit::from_json(const nlohmann::json& j) {
  ClmmFit f;
  f.theta = ThresholdVector(j.at("thresholds").get<std::vector<double>>());
  f.beta = to_eigen(j.at("coefficients").get<std::vector<double>>());
  f.feature_names = j.value("feature_names", std::vector<std::string>{});
  f.slope_names = j.value("slope_names", std::vector<std::string>{});
  f.sigma2 = to_eigen(j.at("variances").get<std::vector<double>>());
  const auto K = f.sigma2.size();
  nlohmann::json modes = nlohmann::json::array(), sds = nlohmann::json::array();
  for (const auto& g : j.at("random_effects")) {
    f.group_labels.push_back(g.at("group").get<std::string>());
    modes.push_back(g.at("mode"));
    sds.push_back(g.at("sd"));
  }
  f.b_modes = matrix_from_json(modes, K);
  f.b_sd = matrix_from_json(sds, K);
  f.marginal_loglik = j.value("marginal_loglik", 0.0);
  f.offset_used = j.value("offset_used", false);
  f.converged = j.value("converged", false);
  f.iterations = j.value("iterations", 0);
  f.function_evals = j.value("function_evals", 0);
  f.starts_used = j.value("starts_used", 0);
  f.single_group = j.value("single_group", false);
  return f;
}

}  // namespace omerf
