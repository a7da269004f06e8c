#pragma once

#include "omerf/clmm.hpp"
#include "omerf/core.hpp"
#include "omerf/forest.hpp"

#include "json.hpp"

#include <optional>
#include <string>
#include <vector>

namespace omerf {

/// Where the forest offset handed to the CLMM comes from.
enum class OffsetSource { InSample, OutOfBag };

struct OmerfConfig {
  double toll = 0.05;
  int itmax = 100;
  ForestConfig forest;
  /// Initializer forests; defaults to `forest` when unset.
  std::optional<ForestConfig> init_forest;
  double denominator_floor = 1e-4;
  OffsetSource offset_source = OffsetSource::OutOfBag;
  /// Class probabilities of the initializer are taken out-of-bag for the
  /// training rows when the initializer forests are bagged.
  bool init_out_of_bag = true;
  int threads = 1;
  ClmmOptions clmm;

  void validate() const;
  nlohmann::json to_json() const;
  static OmerfConfig from_json(const nlohmann::json& j);
};

/// One-vs-rest probability forest standing in for an ordinal forest: one
/// regression forest per class on the indicator 1{y = c}.
class ProbabilityForest {
 public:
  static ProbabilityForest fit(const GroupedOrdinalDataset& data, const ForestConfig& config);

  int num_categories() const { return static_cast<int>(class_forests_.size()); }
  /// J x C class probabilities, clamped and renormalised per row.
  Eigen::MatrixXd predict(const Eigen::MatrixXd& x) const;
  /// Same, out-of-bag for the training rows (in-sample where uncovered).
  Eigen::MatrixXd predict_oob(const Eigen::MatrixXd& x_train) const;
  std::vector<int> predict_class(const Eigen::MatrixXd& x) const;
  const std::vector<RandomForest>& class_forests() const { return class_forests_; }

  nlohmann::json to_json() const;
  static ProbabilityForest from_json(const nlohmann::json& j);

 private:
  std::vector<RandomForest> class_forests_;
};

/// Clamp-and-renormalise raw per-class scores into a probability row.
Eigen::RowVectorXd normalize_class_probs(const Eigen::Ref<const Eigen::RowVectorXd>& raw);

/// Scalar latent score from cumulative probabilities: mean over c of
/// theta0_c - logit(clamp(gamma_c)).
double latent_from_cumulative(const ThresholdVector& theta0, std::span<const double> gamma);

struct LatentInit {
  Eigen::VectorXd eta0;
  ThresholdVector theta0;
  Eigen::MatrixXd class_probs;  // J x C
};

/// Latent scores from class probabilities under the marginal thresholds of y.
LatentInit latent_from_class_probs(const Eigen::MatrixXd& class_probs, const std::vector<int>& y,
                                   int num_categories);

/// Fit the probability forest on x and turn its class probabilities into
/// initial latent scores. Higher scores mean stochastically higher classes.
LatentInit init_latent(const GroupedOrdinalDataset& data, const ForestConfig& forest_config,
                       bool out_of_bag = true);

struct OmerfModel {
  RandomForest forest;
  ClmmFit clmm;
  Eigen::VectorXd eta0;
  ThresholdVector theta0;
  /// Target the final forest was grown on.
  Eigen::VectorXd forest_target;
  std::vector<double> trace;
  bool converged = false;
  int iterations = 0;
  std::vector<std::string> warnings;
  OmerfConfig config;
  RandomEffectsSpec spec;

  nlohmann::json to_json() const;
  static OmerfModel from_json(const nlohmann::json& j);
};

/// Alternates a regression forest for the fixed part with an offset-only
/// CLMM for the random part until the largest relative change of the random
/// effects falls below toll. `b_start` warm-starts the random effects.
OmerfModel fit_omerf(const GroupedOrdinalDataset& data, const RandomEffectsSpec& spec,
                     const OmerfConfig& config,
                     const std::optional<Eigen::MatrixXd>& b_start = std::nullopt);

/// Relative change statistic: max |b - b_prev| divided by the guarded
/// magnitude of b_prev at the argmax entry.
double relative_change(const Eigen::MatrixXd& b, const Eigen::MatrixXd& b_prev, double floor);

struct OrdinalPrediction {
  Eigen::MatrixXd probs;  // rows x C
  std::vector<int> classes;
  Eigen::VectorXd latent;
};

/// Argmax with ties resolved to the lower category.
std::vector<int> argmax_classes(const Eigen::MatrixXd& probs);

/// Predict with known training-group indices (-1 for unseen groups).
OrdinalPrediction predict_omerf(const OmerfModel& model, const Eigen::MatrixXd& x, const Eigen::MatrixXd& z,
                                std::span<const int> group);

/// Predict rows of a dataset; groups are matched to training groups by label.
OrdinalPrediction predict_omerf(const OmerfModel& model, const GroupedOrdinalDataset& data);

struct RandomEffectRow {
  std::string group;
  std::string effect;  // "(Intercept)" or the slope covariate
  double estimate = 0.0;
  double sd = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

/// Per-group conditional modes with 95% intervals, sorted by group label.
std::vector<RandomEffectRow> extract_random_effects(const ClmmFit& fit);
inline std::vector<RandomEffectRow> extract_random_effects(const OmerfModel& model) {
  return extract_random_effects(model.clmm);
}

}  // namespace omerf
