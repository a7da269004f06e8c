#pragma once

#include "omerf/core.hpp"

#include "json.hpp"

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

namespace omerf {

struct ForestConfig {
  int num_trees = 500;
  /// 0 selects floor(P / 3), at least 1.
  int mtry = 0;
  int min_node_size = 5;
  bool bootstrap = true;
  /// 0 means unlimited depth.
  int max_depth = 0;
  std::uint64_t seed = 1;
  /// Never affects results.
  int num_threads = 1;

  int resolved_mtry(int num_features) const;
  void validate(int num_features) const;

  nlohmann::json to_json() const;
  static ForestConfig from_json(const nlohmann::json& j);
};

/// CART regression tree stored as a flat node array; node 0 is the root.
class RegressionTree {
 public:
  struct Node {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double value = 0.0;  // leaf mean

    bool is_leaf() const { return feature < 0; }
  };

  RegressionTree() = default;
  explicit RegressionTree(std::vector<Node> nodes) : nodes_(std::move(nodes)) {}

  template <typename Row>
  double predict(const Row& row) const {
    int k = 0;
    while (!nodes_[k].is_leaf()) {
      k = row(nodes_[k].feature) <= nodes_[k].threshold ? nodes_[k].left : nodes_[k].right;
    }
    return nodes_[k].value;
  }

  const std::vector<Node>& nodes() const { return nodes_; }
  std::size_t num_leaves() const;
  /// True if any internal node splits on the feature.
  bool uses_feature(int feature) const;

 private:
  std::vector<Node> nodes_;
};

struct OobPrediction {
  Eigen::VectorXd values;     // NaN where uncovered
  std::vector<bool> covered;  // row has at least one out-of-bag tree
  std::size_t num_covered() const;
};

class RandomForest {
 public:
  RandomForest() = default;

  const ForestConfig& config() const { return config_; }
  int num_features() const { return num_features_; }
  std::size_t num_trees() const { return trees_.size(); }
  std::size_t num_training_rows() const { return num_rows_; }
  const std::vector<RegressionTree>& trees() const { return trees_; }
  bool has_oob() const { return !oob_.empty(); }
  /// Rows excluded from the bootstrap sample of tree t.
  const std::vector<bool>& oob_mask(std::size_t t) const { return oob_.at(t); }

  Eigen::VectorXd predict(const Eigen::MatrixXd& x_new) const;
  double predict_row(const Eigen::MatrixXd& x, Eigen::Index row) const;

  nlohmann::json to_json() const;
  static RandomForest from_json(const nlohmann::json& j);

  static RandomForest assemble(ForestConfig config, int num_features, std::size_t num_rows,
                               std::vector<RegressionTree> trees,
                               std::vector<std::vector<bool>> oob_masks);

 private:
  friend RandomForest fit_forest(const Eigen::MatrixXd& x, const Eigen::VectorXd& target,
                                 const ForestConfig& config);

  ForestConfig config_;
  int num_features_ = 0;
  std::size_t num_rows_ = 0;
  std::vector<RegressionTree> trees_;
  std::vector<std::vector<bool>> oob_;
};

/// Bagged CART regression forest. Splits minimise the within-node sum of
/// squared errors over mtry candidate features drawn per node; cut points sit
/// midway between consecutive distinct values. Tree t draws from its own RNG
/// stream, so the fit is identical for any thread count.
RandomForest fit_forest(const Eigen::MatrixXd& x, const Eigen::VectorXd& target,
                        const ForestConfig& config);

/// Out-of-bag predictions over the training rows. Throws if the forest was
/// grown without bootstrap.
OobPrediction oob_predict(const RandomForest& forest, const Eigen::MatrixXd& x_train);

struct PermutationImportance {
  std::vector<double> importance;  // mean MSE increase per feature
  std::vector<double> permuted_mse;
  double baseline_mse = 0.0;
  bool used_oob = false;
};

/// Mean increase in MSE when one column is permuted. Uses out-of-bag
/// predictions when the forest was bagged and x holds its training rows.
PermutationImportance permutation_importance(const RandomForest& forest, const Eigen::MatrixXd& x,
                                             const Eigen::VectorXd& target, int repeats,
                                             std::uint64_t seed);

/// Average prediction over the rows of x with `feature` overwritten by each
/// grid value.
std::vector<std::pair<double, double>> partial_dependence(const RandomForest& forest,
                                                          const Eigen::MatrixXd& x, int feature,
                                                          const std::vector<double>& grid);

/// Evenly spaced grid over the observed range of a column.
std::vector<double> range_grid(const Eigen::MatrixXd& x, int feature, int points);

}  // namespace omerf
