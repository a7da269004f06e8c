#pragma once

#include "omerf/core.hpp"

#include "json.hpp"

#include <optional>
#include <vector>

namespace omerf {

/// Random intercept plus q_slopes random slopes with diagonal covariance.
/// The slopes use columns 1..q_slopes of the dataset's z matrix.
struct RandomEffectsSpec {
  int q_slopes = 0;
  int num_effects() const { return q_slopes + 1; }
};

struct ClmFit {
  ThresholdVector theta;
  Eigen::VectorXd beta;  // empty when fitted without fixed effects
  double loglik = 0.0;
  int iterations = 0;
  bool converged = false;
  double gradient_norm = 0.0;
  /// Some standardized coefficient exceeded 30 in absolute value.
  bool separation = false;
  std::vector<std::string> feature_names;

  nlohmann::json to_json() const;
  static ClmFit from_json(const nlohmann::json& j);
};

struct ClmmFit {
  ThresholdVector theta;
  Eigen::VectorXd beta;     // empty in offset-only mode
  Eigen::VectorXd sigma2;   // diagonal of Sigma_b
  Eigen::MatrixXd b_modes;  // I x (Q + 1)
  Eigen::MatrixXd b_sd;     // conditional sds from the inner curvature
  double marginal_loglik = 0.0;
  bool offset_used = false;
  bool converged = false;
  int iterations = 0;
  int function_evals = 0;
  int starts_used = 0;
  /// Fewer than two groups; the variance is weakly identified.
  bool single_group = false;
  std::vector<std::string> group_labels;
  std::vector<std::string> feature_names;
  std::vector<std::string> slope_names;

  int num_effects() const { return static_cast<int>(sigma2.size()); }

  nlohmann::json to_json() const;
  static ClmmFit from_json(const nlohmann::json& j);
};

/// Linear predictor lambda = x beta + z b_group + offset for every row. An
/// empty beta drops the fixed part; a negative group index means a group
/// without a random-effect estimate (b = 0).
Eigen::VectorXd linear_predictor(const GroupedOrdinalDataset& data, std::span<const int> group,
                                 const Eigen::VectorXd& beta, const Eigen::MatrixXd& b,
                                 const Eigen::VectorXd& offset);

/// Sum of log P(y_ij | lambda_ij) with lambda = x beta + z b_i + offset.
double conditional_loglik(const ThresholdVector& theta, const Eigen::VectorXd& beta,
                          const Eigen::MatrixXd& b, const GroupedOrdinalDataset& data,
                          const Eigen::VectorXd& offset);

struct ConditionalGradient {
  Eigen::VectorXd theta;
  Eigen::VectorXd beta;
  Eigen::MatrixXd b;
};

ConditionalGradient conditional_loglik_gradient(const ThresholdVector& theta,
                                                const Eigen::VectorXd& beta,
                                                const Eigen::MatrixXd& b,
                                                const GroupedOrdinalDataset& data,
                                                const Eigen::VectorXd& offset);

struct InnerModes {
  Eigen::MatrixXd modes;                     // I x (Q + 1)
  std::vector<Eigen::MatrixXd> neg_hessian;  // curvature at each mode
  std::vector<bool> converged;
  int max_iterations = 0;

  bool all_converged() const;
};

struct InnerOptions {
  int max_iterations = 50;
  int max_halvings = 30;
  double gradient_tolerance = 1e-8;
  int threads = 1;
};

/// Per-group Newton-Raphson for the conditional modes of the random effects:
/// b_i maximises log p(y_i | b) + log N(b; 0, diag(sigma2)).
InnerModes inner_newton_modes(const ThresholdVector& theta, const Eigen::VectorXd& beta,
                              const Eigen::VectorXd& sigma2, const GroupedOrdinalDataset& data,
                              const Eigen::VectorXd& offset, const Eigen::MatrixXd& start,
                              const InnerOptions& options = {});

struct LaplaceValue {
  double value = 0.0;
  InnerModes inner;
};

/// Laplace approximation to the marginal log-likelihood. Variance parameters
/// are log standard deviations; sigma is floored at exp(-12).
LaplaceValue laplace_marginal(const ThresholdVector& theta, const Eigen::VectorXd& beta,
                              const Eigen::VectorXd& log_sd, const GroupedOrdinalDataset& data,
                              const Eigen::VectorXd& offset,
                              const std::optional<Eigen::MatrixXd>& start = std::nullopt,
                              const InnerOptions& options = {});

double laplace_marginal_loglik(const ThresholdVector& theta, const Eigen::VectorXd& beta,
                               const Eigen::VectorXd& log_sd, const GroupedOrdinalDataset& data,
                               const Eigen::VectorXd& offset);

inline constexpr double kLogSdFloor = -12.0;

/// Threshold reparameterisation: theta_1 free, theta_c = theta_{c-1} + exp(u_c).
Eigen::VectorXd thresholds_to_unconstrained(const ThresholdVector& theta);
ThresholdVector thresholds_from_unconstrained(const Eigen::VectorXd& u);

struct ClmmOptions {
  std::vector<double> start_log_sd{std::log(0.5), 0.0, std::log(2.0)};
  int max_outer_iterations = 200;
  /// Convergence when max |gradient| < tolerance * max(1, |objective|).
  double gradient_tolerance = 1e-5;
  /// Central-difference step relative to max(1, |parameter|).
  double fd_step = 1e-6;
  int threads = 1;
  /// Optional warm start for theta, beta and log sd, tried before the
  /// standard starts.
  std::optional<ThresholdVector> warm_theta;
  std::optional<Eigen::VectorXd> warm_beta;
  std::optional<Eigen::VectorXd> warm_log_sd;
};

/// Thrown when no start converges; carries the best iterate found.
class ClmmConvergenceError : public ConvergenceError {
 public:
  ClmmConvergenceError(const std::string& what, ClmmFit best)
      : ConvergenceError(what), best_(std::move(best)) {}
  const ClmmFit& best() const { return best_; }

 private:
  ClmmFit best_;
};

/// Cumulative link mixed model by maximising the Laplace marginal likelihood.
/// With fixed_effects off, the linear predictor is z b + offset only.
ClmmFit fit_clmm(const GroupedOrdinalDataset& data, const RandomEffectsSpec& spec,
                 const Eigen::VectorXd& offset, bool fixed_effects,
                 const ClmmOptions& options = {});

/// Cumulative link model (no random effects) by Newton's method with an
/// analytic Hessian. An empty offset means zero.
ClmFit fit_clm(const GroupedOrdinalDataset& data, bool fixed_effects = true,
               const Eigen::VectorXd& offset = {});

/// Category probabilities for every row, one row per observation.
Eigen::MatrixXd predict_probs(const ThresholdVector& theta, const Eigen::VectorXd& lambda);

/// Intraclass correlation on the latent logistic scale.
double icc(double sigma2_intercept);

/// Clamped empirical cumulative logits, used as threshold starts.
ThresholdVector empirical_thresholds(const std::vector<int>& y, int num_categories);

}  // namespace omerf
