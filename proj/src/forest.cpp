#include "omerf/forest.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <random>

namespace omerf {

int ForestConfig::resolved_mtry(int num_features) const {
  if (mtry > 0) return mtry;
  return std::max(1, num_features / 3);
}

void ForestConfig::validate(int num_features) const {
  if (num_trees < 1) throw ValidationError("forest: num_trees must be >= 1");
  if (min_node_size < 1) throw ValidationError("forest: min_node_size must be >= 1");
  if (max_depth < 0) throw ValidationError("forest: max_depth must be >= 0");
  if (num_features > 0 && resolved_mtry(num_features) > num_features) {
    throw ValidationError("forest: mtry exceeds the number of features");
  }
}

nlohmann::json ForestConfig::to_json() const {
  return {{"num_trees", num_trees}, {"mtry", mtry},         {"min_node_size", min_node_size},
          {"bootstrap", bootstrap}, {"max_depth", max_depth}, {"seed", seed}};
}

ForestConfig ForestConfig::from_json(const nlohmann::json& j) {
  ForestConfig c;
  c.num_trees = j.value("num_trees", c.num_trees);
  c.mtry = j.value("mtry", c.mtry);
  c.min_node_size = j.value("min_node_size", c.min_node_size);
  c.bootstrap = j.value("bootstrap", c.bootstrap);
  c.max_depth = j.value("max_depth", c.max_depth);
  c.seed = j.value("seed", c.seed);
  c.num_threads = j.value("num_threads", c.num_threads);
  return c;
}

std::size_t RegressionTree::num_leaves() const {
  return static_cast<std::size_t>(
      std::count_if(nodes_.begin(), nodes_.end(), [](const Node& n) { return n.is_leaf(); }));
}

bool RegressionTree::uses_feature(int feature) const {
  return std::any_of(nodes_.begin(), nodes_.end(), [&](const Node& n) { return n.feature == feature; });
}

std::size_t OobPrediction::num_covered() const {
  return static_cast<std::size_t>(std::count(covered.begin(), covered.end(), true));
}

namespace {

// Row-major view of the training matrix used while growing.
struct TrainingData {
  std::vector<double> values;
  Eigen::Index rows = 0;
  int cols = 0;

  explicit TrainingData(const Eigen::MatrixXd& x)
      : values(static_cast<std::size_t>(x.size())), rows(x.rows()), cols(static_cast<int>(x.cols())) {
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) values[static_cast<std::size_t>(r) * cols + c] = x(r, c);
    }
  }
  double at(std::size_t r, int c) const { return values[r * cols + c]; }
};

class TreeGrower {
 public:
  TreeGrower(const TrainingData& data, const Eigen::VectorXd& target, const ForestConfig& config,
             std::mt19937_64& rng)
      : data_(data), target_(target), config_(config), rng_(rng),
        mtry_(config.resolved_mtry(data.cols)) {}

  RegressionTree grow(std::vector<std::size_t> samples) {
    samples_ = std::move(samples);
    nodes_.clear();
    struct Pending {
      int node;
      std::size_t begin, end;
      int depth;
    };
    std::vector<Pending> stack;
    nodes_.emplace_back();
    stack.push_back({0, 0, samples_.size(), 0});
    while (!stack.empty()) {
      const Pending p = stack.back();
      stack.pop_back();
      const auto split = find_split(p.begin, p.end, p.depth);
      if (!split) {
        nodes_[p.node].value = node_mean(p.begin, p.end);
        continue;
      }
      const auto mid_it = std::partition(
          samples_.begin() + static_cast<std::ptrdiff_t>(p.begin),
          samples_.begin() + static_cast<std::ptrdiff_t>(p.end),
          [&](std::size_t r) { return data_.at(r, split->feature) <= split->threshold; });
      const auto mid = static_cast<std::size_t>(mid_it - samples_.begin());
      const int left = static_cast<int>(nodes_.size());
      nodes_.emplace_back();
      nodes_.emplace_back();
      auto& node = nodes_[p.node];
      node.feature = split->feature;
      node.threshold = split->threshold;
      node.left = left;
      node.right = left + 1;
      node.value = node_mean(p.begin, p.end);
      // Right pushed first so the left subtree is expanded first.
      stack.push_back({left + 1, mid, p.end, p.depth + 1});
      stack.push_back({left, p.begin, mid, p.depth + 1});
    }
    return RegressionTree(std::move(nodes_));
  }

 private:
  struct Split {
    int feature;
    double threshold;
  };

  double node_mean(std::size_t begin, std::size_t end) const {
    double s = 0.0;
    for (std::size_t k = begin; k < end; ++k) s += target_[static_cast<Eigen::Index>(samples_[k])];
    return s / static_cast<double>(end - begin);
  }

  std::optional<Split> find_split(std::size_t begin, std::size_t end, int depth) {
    const std::size_t n = end - begin;
    if (n <= static_cast<std::size_t>(config_.min_node_size) || n < 2) return std::nullopt;
    if (config_.max_depth > 0 && depth >= config_.max_depth) return std::nullopt;

    double lo = std::numeric_limits<double>::infinity(), hi = -lo, total = 0.0;
    for (std::size_t k = begin; k < end; ++k) {
      const double t = target_[static_cast<Eigen::Index>(samples_[k])];
      lo = std::min(lo, t);
      hi = std::max(hi, t);
      total += t;
    }
    if (lo == hi) return std::nullopt;

    // mtry candidates without replacement, examined in ascending index order
    // so that equal gains resolve to the lowest feature.
    features_.resize(static_cast<std::size_t>(data_.cols));
    std::iota(features_.begin(), features_.end(), 0);
    for (int k = 0; k < mtry_; ++k) {
      std::uniform_int_distribution<int> pick(k, data_.cols - 1);
      std::swap(features_[k], features_[pick(rng_)]);
    }
    std::sort(features_.begin(), features_.begin() + mtry_);

    const double parent = total * total / static_cast<double>(n);
    double best_gain = parent;
    std::optional<Split> best;
    pairs_.resize(n);
    for (int fi = 0; fi < mtry_; ++fi) {
      const int f = features_[fi];
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t r = samples_[begin + k];
        pairs_[k] = {data_.at(r, f), target_[static_cast<Eigen::Index>(r)]};
      }
      std::sort(pairs_.begin(), pairs_.end());
      double left_sum = 0.0;
      for (std::size_t k = 0; k + 1 < n; ++k) {
        left_sum += pairs_[k].second;
        if (pairs_[k].first == pairs_[k + 1].first) continue;
        const double nl = static_cast<double>(k + 1);
        const double nr = static_cast<double>(n - k - 1);
        const double right_sum = total - left_sum;
        const double gain = left_sum * left_sum / nl + right_sum * right_sum / nr;
        if (gain > best_gain * (1.0 + 1e-12) + 1e-300) {
          best_gain = gain;
          best = Split{f, 0.5 * (pairs_[k].first + pairs_[k + 1].first)};
        }
      }
    }
    return best;
  }

  const TrainingData& data_;
  const Eigen::VectorXd& target_;
  const ForestConfig& config_;
  std::mt19937_64& rng_;
  int mtry_;
  std::vector<std::size_t> samples_;
  std::vector<RegressionTree::Node> nodes_;
  std::vector<int> features_;
  std::vector<std::pair<double, double>> pairs_;
};

}  // namespace

RandomForest fit_forest(const Eigen::MatrixXd& x, const Eigen::VectorXd& target,
                        const ForestConfig& config) {
  if (x.rows() != target.size()) throw ValidationError("forest: rows of x differ from target length");
  if (x.rows() < 2) throw ValidationError("forest: need at least 2 rows");
  if (x.cols() < 1) throw ValidationError("forest: need at least 1 feature");
  if (!target.allFinite()) throw ValidationError("forest: target must be finite");
  config.validate(static_cast<int>(x.cols()));

  const TrainingData data(x);
  const auto J = static_cast<std::size_t>(x.rows());
  const auto K = static_cast<std::size_t>(config.num_trees);

  RandomForest forest;
  forest.config_ = config;
  forest.num_features_ = static_cast<int>(x.cols());
  forest.num_rows_ = J;
  forest.trees_.resize(K);
  if (config.bootstrap) forest.oob_.resize(K);

  parallel_for(K, config.num_threads, [&](std::size_t t) {
    std::mt19937_64 rng(derive_seed(config.seed, t));
    std::vector<std::size_t> samples(J);
    if (config.bootstrap) {
      std::vector<bool> oob(J, true);
      std::uniform_int_distribution<std::size_t> draw(0, J - 1);
      for (auto& s : samples) {
        s = draw(rng);
        oob[s] = false;
      }
      forest.oob_[t] = std::move(oob);
    } else {
      std::iota(samples.begin(), samples.end(), 0);
    }
    TreeGrower grower(data, target, config, rng);
    forest.trees_[t] = grower.grow(std::move(samples));
  });
  return forest;
}

double RandomForest::predict_row(const Eigen::MatrixXd& x, Eigen::Index row) const {
  const auto r = x.row(row);
  double s = 0.0;
  for (const auto& tree : trees_) s += tree.predict(r);
  return s / static_cast<double>(trees_.size());
}

Eigen::VectorXd RandomForest::predict(const Eigen::MatrixXd& x_new) const {
  if (x_new.rows() > 0 && x_new.cols() != num_features_) {
    throw ValidationError("forest: prediction matrix has " + std::to_string(x_new.cols()) +
                          " columns, expected " + std::to_string(num_features_));
  }
  Eigen::VectorXd out(x_new.rows());
  for (Eigen::Index r = 0; r < x_new.rows(); ++r) out[r] = predict_row(x_new, r);
  return out;
}

RandomForest RandomForest::assemble(ForestConfig config, int num_features, std::size_t num_rows,
                                    std::vector<RegressionTree> trees,
                                    std::vector<std::vector<bool>> oob_masks) {
  RandomForest f;
  f.config_ = config;
  f.num_features_ = num_features;
  f.num_rows_ = num_rows;
  f.trees_ = std::move(trees);
  f.oob_ = std::move(oob_masks);
  return f;
}

nlohmann::json RandomForest::to_json() const {
  nlohmann::json trees = nlohmann::json::array();
  for (const auto& tree : trees_) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& n : tree.nodes()) {
      if (n.is_leaf()) {
        nodes.push_back({n.value});
      } else {
        nodes.push_back({n.feature, n.threshold, n.left, n.right, n.value});
      }
    }
    trees.push_back(std::move(nodes));
  }
  nlohmann::json oob = nlohmann::json::array();
  for (const auto& mask : oob_) {
    std::string s(mask.size(), '0');
    for (std::size_t r = 0; r < mask.size(); ++r) s[r] = mask[r] ? '1' : '0';
    oob.push_back(std::move(s));
  }
  return {{"config", config_.to_json()},
          {"num_features", num_features_},
          {"num_rows", num_rows_},
          {"trees", std::move(trees)},
          {"oob", std::move(oob)}};
}

RandomForest RandomForest::from_json(const nlohmann::json& j) {
  std::vector<RegressionTree> trees;
  for (const auto& jt : j.at("trees")) {
    std::vector<RegressionTree::Node> nodes;
    for (const auto& jn : jt) {
      RegressionTree::Node n;
      if (jn.size() == 1) {
        n.value = jn[0].get<double>();
      } else {
        n.feature = jn[0].get<int>();
        n.threshold = jn[1].get<double>();
        n.left = jn[2].get<int>();
        n.right = jn[3].get<int>();
        n.value = jn[4].get<double>();
      }
      nodes.push_back(n);
    }
    trees.emplace_back(std::move(nodes));
  }
  std::vector<std::vector<bool>> oob;
  for (const auto& js : j.value("oob", nlohmann::json::array())) {
    const auto s = js.get<std::string>();
    std::vector<bool> mask(s.size());
    for (std::size_t r = 0; r < s.size(); ++r) mask[r] = s[r] == '1';
    oob.push_back(std::move(mask));
  }
  return assemble(ForestConfig::from_json(j.at("config")), j.at("num_features").get<int>(),
                  j.at("num_rows").get<std::size_t>(), std::move(trees), std::move(oob));
}

OobPrediction oob_predict(const RandomForest& forest, const Eigen::MatrixXd& x_train) {
  if (!forest.has_oob()) throw ValidationError("forest: OOB predictions need bootstrap sampling");
  const auto J = forest.num_training_rows();
  if (static_cast<std::size_t>(x_train.rows()) != J) {
    throw ValidationError("forest: OOB prediction needs the training rows");
  }
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(J));
  std::vector<int> count(J, 0);
  for (std::size_t t = 0; t < forest.num_trees(); ++t) {
    const auto& mask = forest.oob_mask(t);
    const auto& tree = forest.trees()[t];
    for (std::size_t r = 0; r < J; ++r) {
      if (!mask[r]) continue;
      sum[static_cast<Eigen::Index>(r)] += tree.predict(x_train.row(static_cast<Eigen::Index>(r)));
      ++count[r];
    }
  }
  OobPrediction out;
  out.values.resize(static_cast<Eigen::Index>(J));
  out.covered.resize(J);
  for (std::size_t r = 0; r < J; ++r) {
    const auto i = static_cast<Eigen::Index>(r);
    out.covered[r] = count[r] > 0;
    out.values[i] = count[r] > 0 ? sum[i] / count[r] : std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

namespace {

double covered_mse(const Eigen::VectorXd& pred, const Eigen::VectorXd& target,
                   const std::vector<bool>* covered) {
  double s = 0.0;
  std::size_t n = 0;
  for (Eigen::Index r = 0; r < target.size(); ++r) {
    if (covered && !(*covered)[static_cast<std::size_t>(r)]) continue;
    const double d = pred[r] - target[r];
    s += d * d;
    ++n;
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

}  // namespace

PermutationImportance permutation_importance(const RandomForest& forest, const Eigen::MatrixXd& x,
                                             const Eigen::VectorXd& target, int repeats,
                                             std::uint64_t seed) {
  if (repeats < 1) throw ValidationError("importance: repeats must be >= 1");
  if (x.cols() != forest.num_features()) throw ValidationError("importance: column count mismatch");
  if (x.rows() != target.size()) throw ValidationError("importance: rows of x differ from target");

  PermutationImportance out;
  out.used_oob = forest.has_oob() && static_cast<std::size_t>(x.rows()) == forest.num_training_rows();
  auto predict_all = [&](const Eigen::MatrixXd& m) {
    return out.used_oob ? oob_predict(forest, m).values : forest.predict(m);
  };
  std::vector<bool> covered;
  if (out.used_oob) covered = oob_predict(forest, x).covered;
  const std::vector<bool>* mask = out.used_oob ? &covered : nullptr;

  out.baseline_mse = covered_mse(predict_all(x), target, mask);
  const int P = forest.num_features();
  out.importance.assign(P, 0.0);
  out.permuted_mse.assign(P, 0.0);
  std::mt19937_64 rng(seed);
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(x.rows()));
  Eigen::MatrixXd shuffled = x;
  for (int p = 0; p < P; ++p) {
    double acc = 0.0;
    for (int rep = 0; rep < repeats; ++rep) {
      std::iota(perm.begin(), perm.end(), Eigen::Index{0});
      std::shuffle(perm.begin(), perm.end(), rng);
      for (Eigen::Index r = 0; r < x.rows(); ++r) shuffled(r, p) = x(perm[static_cast<std::size_t>(r)], p);
      acc += covered_mse(predict_all(shuffled), target, mask);
    }
    shuffled.col(p) = x.col(p);
    out.permuted_mse[p] = acc / repeats;
    out.importance[p] = out.permuted_mse[p] - out.baseline_mse;
  }
  return out;
}

std::vector<std::pair<double, double>> partial_dependence(const RandomForest& forest,
                                                          const Eigen::MatrixXd& x, int feature,
                                                          const std::vector<double>& grid) {
  if (feature < 0 || feature >= forest.num_features() || feature >= x.cols()) {
    throw ValidationError("partial dependence: feature index out of range");
  }
  if (grid.empty()) throw ValidationError("partial dependence: grid must be nonempty");
  std::vector<std::pair<double, double>> out;
  Eigen::MatrixXd work = x;
  for (double v : grid) {
    work.col(feature).setConstant(v);
    out.emplace_back(v, forest.predict(work).mean());
  }
  return out;
}

std::vector<double> range_grid(const Eigen::MatrixXd& x, int feature, int points) {
  if (feature < 0 || feature >= x.cols()) throw ValidationError("grid: feature index out of range");
  if (points < 1 || x.rows() == 0) throw ValidationError("grid: need points >= 1 and data");
  const double lo = x.col(feature).minCoeff();
  const double hi = x.col(feature).maxCoeff();
  std::vector<double> g(static_cast<std::size_t>(points));
  for (int k = 0; k < points; ++k) {
    g[k] = points == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * k / (points - 1);
  }
  return g;
}

}  // namespace omerf
