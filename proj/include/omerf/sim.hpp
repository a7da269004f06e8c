#pragma once

#include "omerf/core.hpp"

#include "json.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace omerf::sim {

enum class FixedForm { PolynomialTree, Linear };

/// One simulation scenario. Variances are for the random intercept and, when
/// has_slope is set, an independent random slope on x1.
struct DgpSpec {
  int id = 1;
  FixedForm form = FixedForm::PolynomialTree;
  double alpha = 0.0;
  double beta = 0.0;
  double sigma2_intercept = 1.0;
  bool has_slope = false;
  double sigma2_slope = 0.0;
  int groups = 10;
  int per_group = 100;
  int categories = 3;
  std::uint64_t seed = 1;

  int num_effects() const { return has_slope ? 2 : 1; }
  nlohmann::json to_json() const;
};

/// The ten scenarios: (alpha, beta, sigma2_1, sigma2_2) per row.
DgpSpec scenario(int id, std::uint64_t seed = 1);
inline constexpr int kNumDgps = 10;

/// Axis-aligned tree over (x4, x5, x6). Internal nodes reference a covariate
/// by 0-based column index of the 7-column design.
struct TreeFunctionSpec {
  struct Node {
    int column = -1;  // -1 for leaves
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double value = 0.0;
  };
  std::vector<Node> nodes;

  /// x4 < 0 ? (x5 < 0 ? 0 : 4) : (x6 < 0 ? 8 : 12)
  static TreeFunctionSpec standard();
  double evaluate(const Eigen::Ref<const Eigen::RowVectorXd>& row) const;
  std::size_t num_leaves() const;
};

/// n x 7: x1..x3 ~ N(0,1), x4 ~ U(-3,3), x5 ~ U(-6,6), x6 ~ U(-5,5), x7 ~ U(-4,4).
Eigen::MatrixXd sample_covariates(int n, std::uint64_t seed);

Eigen::VectorXd fixed_effect_latent(const Eigen::MatrixXd& x, const DgpSpec& spec,
                                    const TreeFunctionSpec& tree = TreeFunctionSpec::standard());

/// groups x (1 or 2) independent normal draws.
Eigen::MatrixXd sample_random_effects(const DgpSpec& spec, std::uint64_t seed);

struct OrdinalDraw {
  std::vector<int> labels;
  ThresholdVector thresholds;
  /// Largest |mean_j F(theta_c - w_j) - c/C| over c.
  double max_residual = 0.0;
  /// All latent values equal.
  bool degenerate = false;
};

/// Thresholds giving balanced marginal categories for this latent sample,
/// then labels drawn from the logistic segment probabilities.
OrdinalDraw latent_to_ordinal(const Eigen::VectorXd& w, int categories, std::uint64_t seed);

/// Thresholds only, solved by bisection to 1e-12.
ThresholdVector balanced_thresholds(const Eigen::VectorXd& w, int categories, double* max_residual = nullptr);

struct TrainTestSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Per-group split: round(ratio * n_i) rows to train, at least one row on
/// each side when the group has two or more rows.
TrainTestSplit stratified_split(const std::vector<int>& group, int num_groups, double train_ratio,
                                std::uint64_t seed);

struct SimulatedData {
  GroupedOrdinalDataset data;
  Eigen::MatrixXd b_true;
  Eigen::VectorXd latent;
  ThresholdVector thresholds;
  TrainTestSplit split;
  DgpSpec spec;
  bool degenerate = false;
};

SimulatedData generate(const DgpSpec& spec, double train_ratio = 0.8,
                       const TreeFunctionSpec& tree = TreeFunctionSpec::standard());

/// Group label with zero padding so that lexicographic order is numeric order.
std::string group_label(int index, int num_groups);

}  // namespace omerf::sim
