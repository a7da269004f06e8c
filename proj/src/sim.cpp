#include "omerf/sim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace omerf::sim {

nlohmann::json DgpSpec::to_json() const {
  nlohmann::json j = {{"id", id},
                      {"form", form == FixedForm::PolynomialTree ? "polynomial+tree" : "linear"},
                      {"sigma2_intercept", sigma2_intercept},
                      {"groups", groups},
                      {"per_group", per_group},
                      {"categories", categories},
                      {"seed", seed}};
  if (form == FixedForm::PolynomialTree) {
    j["alpha"] = alpha;
    j["beta"] = beta;
  }
  if (has_slope) j["sigma2_slope"] = sigma2_slope;
  return j;
}

DgpSpec scenario(int id, std::uint64_t seed) {
  struct Row {
    double alpha, beta, s1;
    double s2;  // < 0 when there is no slope
  };
  static constexpr Row rows[kNumDgps] = {
      {0.3, 0.7, 1.0, -1.0}, {0.7, 0.3, 1.0, -1.0}, {0.3, 0.7, 5.0, -1.0}, {0.7, 0.3, 5.0, -1.0},
      {0.3, 0.7, 0.3, 0.5},  {0.7, 0.3, 0.3, 0.5},  {0.3, 0.7, 1.0, 1.0},  {0.7, 0.3, 1.0, 1.0},
      {0.0, 0.0, 1.0, -1.0}, {0.0, 0.0, 5.0, -1.0},
  };
  if (id < 1 || id > kNumDgps) throw ValidationError("DGP id must be in 1..10");
  const Row& r = rows[id - 1];
  DgpSpec s;
  s.id = id;
  s.form = id <= 8 ? FixedForm::PolynomialTree : FixedForm::Linear;
  s.alpha = r.alpha;
  s.beta = r.beta;
  s.sigma2_intercept = r.s1;
  s.has_slope = r.s2 >= 0.0;
  s.sigma2_slope = s.has_slope ? r.s2 : 0.0;
  s.seed = seed;
  return s;
}

TreeFunctionSpec TreeFunctionSpec::standard() {
  TreeFunctionSpec t;
  // 0: x4 | 1: x5 | 2: x6 | leaves 3..6
  t.nodes = {
      {3, 0.0, 1, 2, 0.0}, {4, 0.0, 3, 4, 0.0}, {5, 0.0, 5, 6, 0.0},
      {-1, 0.0, -1, -1, 0.0}, {-1, 0.0, -1, -1, 4.0}, {-1, 0.0, -1, -1, 8.0}, {-1, 0.0, -1, -1, 12.0},
  };
  return t;
}

double TreeFunctionSpec::evaluate(const Eigen::Ref<const Eigen::RowVectorXd>& row) const {
  int k = 0;
  while (nodes[k].column >= 0) {
    k = row[nodes[k].column] < nodes[k].threshold ? nodes[k].left : nodes[k].right;
  }
  return nodes[k].value;
}

std::size_t TreeFunctionSpec::num_leaves() const {
  return static_cast<std::size_t>(std::count_if(nodes.begin(), nodes.end(), [](const Node& n) { return n.column < 0; }));
}

Eigen::MatrixXd sample_covariates(int n, std::uint64_t seed) {
  if (n < 1) throw ValidationError("sample_covariates: n must be >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double half_width[4] = {3.0, 6.0, 5.0, 4.0};
  Eigen::MatrixXd x(n, 7);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < 3; ++c) x(r, c) = normal(rng);
    for (int c = 0; c < 4; ++c) {
      std::uniform_real_distribution<double> unif(-half_width[c], half_width[c]);
      x(r, 3 + c) = unif(rng);
    }
  }
  return x;
}

Eigen::VectorXd fixed_effect_latent(const Eigen::MatrixXd& x, const DgpSpec& spec,
                                    const TreeFunctionSpec& tree) {
  Eigen::VectorXd f(x.rows());
  if (spec.form == FixedForm::Linear) {
    if (x.cols() < 3) throw ValidationError("linear DGP needs 3 covariates");
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      f[r] = 3.0 + 7.0 * x(r, 0) - 5.0 * x(r, 1) + x(r, 1) * x(r, 2);
    }
    return f;
  }
  if (x.cols() < 7) throw ValidationError("polynomial+tree DGP needs 7 covariates");
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double poly = 3.0 + 7.0 * x(r, 0) * x(r, 0) - 5.0 * x(r, 1) + x(r, 1) * x(r, 2) * x(r, 2);
    f[r] = spec.alpha * poly + spec.beta * tree.evaluate(x.row(r));
  }
  return f;
}

Eigen::MatrixXd sample_random_effects(const DgpSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double sd[2] = {std::sqrt(spec.sigma2_intercept), std::sqrt(spec.sigma2_slope)};
  Eigen::MatrixXd b(spec.groups, spec.num_effects());
  for (int i = 0; i < spec.groups; ++i) {
    for (int k = 0; k < spec.num_effects(); ++k) b(i, k) = sd[k] * normal(rng);
  }
  return b;
}

ThresholdVector balanced_thresholds(const Eigen::VectorXd& w, int categories, double* max_residual) {
  if (categories < 2) throw ValidationError("need at least 2 categories");
  if (w.size() < 1) throw ValidationError("latent vector is empty");
  const double wmin = w.minCoeff(), wmax = w.maxCoeff();
  const auto n = static_cast<double>(w.size());
  auto mean_cdf = [&](double theta) {
    double s = 0.0;
    for (Eigen::Index j = 0; j < w.size(); ++j) s += inv_logit(theta - w[j]);
    return s / n;
  };
  std::vector<double> theta(static_cast<std::size_t>(categories - 1));
  double worst = 0.0;
  for (int c = 1; c < categories; ++c) {
    const double target = static_cast<double>(c) / categories;
    // mean_cdf is increasing; these bounds bracket the root.
    double lo = wmin + logit(target) - 1.0;
    double hi = wmax + logit(target) + 1.0;
    for (int it = 0; it < 200 && hi - lo > 1e-12 * std::max(1.0, std::abs(lo)); ++it) {
      const double mid = 0.5 * (lo + hi);
      (mean_cdf(mid) < target ? lo : hi) = mid;
    }
    const double root = 0.5 * (lo + hi);
    theta[static_cast<std::size_t>(c - 1)] = root;
    worst = std::max(worst, std::abs(mean_cdf(root) - target));
  }
  if (max_residual) *max_residual = worst;
  return ThresholdVector(std::move(theta));
}

OrdinalDraw latent_to_ordinal(const Eigen::VectorXd& w, int categories, std::uint64_t seed) {
  if (w.size() < categories) throw ValidationError("latent_to_ordinal: need at least C values");
  OrdinalDraw out;
  out.thresholds = balanced_thresholds(w, categories, &out.max_residual);
  out.degenerate = w.maxCoeff() == w.minCoeff();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  out.labels.resize(static_cast<std::size_t>(w.size()));
  for (Eigen::Index j = 0; j < w.size(); ++j) {
    const double u = unif(rng);
    int y = 1;
    for (std::size_t c = 0; c < out.thresholds.size(); ++c) {
      if (u > inv_logit(out.thresholds[c] - w[j])) ++y;
    }
    out.labels[static_cast<std::size_t>(j)] = y;
  }
  return out;
}

TrainTestSplit stratified_split(const std::vector<int>& group, int num_groups, double train_ratio,
                                std::uint64_t seed) {
  if (!(train_ratio > 0.0 && train_ratio < 1.0)) throw ValidationError("split ratio must be in (0, 1)");
  std::vector<std::vector<std::size_t>> rows(static_cast<std::size_t>(num_groups));
  for (std::size_t r = 0; r < group.size(); ++r) rows.at(static_cast<std::size_t>(group[r])).push_back(r);
  std::mt19937_64 rng(seed);
  TrainTestSplit s;
  for (auto& g : rows) {
    std::shuffle(g.begin(), g.end(), rng);
    const auto n = static_cast<long>(g.size());
    long n_train = std::lround(train_ratio * static_cast<double>(n));
    if (n >= 2) n_train = std::clamp(n_train, 1L, n - 1);
    s.train.insert(s.train.end(), g.begin(), g.begin() + n_train);
    s.test.insert(s.test.end(), g.begin() + n_train, g.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

std::string group_label(int index, int num_groups) {
  const int width = static_cast<int>(std::to_string(num_groups).size());
  std::string digits = std::to_string(index + 1);
  return "g" + std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(digits.size()))), '0') + digits;
}

SimulatedData generate(const DgpSpec& spec, double train_ratio, const TreeFunctionSpec& tree) {
  if (spec.groups < 1 || spec.per_group < 1) throw ValidationError("DGP needs groups >= 1 and per_group >= 1");
  const int J = spec.groups * spec.per_group;
  SimulatedData out;
  out.spec = spec;
  const Eigen::MatrixXd x = sample_covariates(J, derive_seed(spec.seed, 0));
  out.b_true = sample_random_effects(spec, derive_seed(spec.seed, 1));

  auto& d = out.data;
  d.x = x;
  d.z = Eigen::MatrixXd::Ones(J, spec.num_effects());
  if (spec.has_slope) d.z.col(1) = x.col(0);
  d.group.resize(static_cast<std::size_t>(J));
  for (int r = 0; r < J; ++r) d.group[static_cast<std::size_t>(r)] = r / spec.per_group;
  for (int i = 0; i < spec.groups; ++i) d.group_labels.push_back(group_label(i, spec.groups));
  for (int p = 1; p <= 7; ++p) d.feature_names.push_back("x" + std::to_string(p));
  if (spec.has_slope) d.slope_names = {"x1"};
  d.num_categories = spec.categories;

  out.latent = fixed_effect_latent(x, spec, tree);
  for (int r = 0; r < J; ++r) {
    out.latent[r] += d.z.row(r).dot(out.b_true.row(d.group[static_cast<std::size_t>(r)]));
  }
  OrdinalDraw draw = latent_to_ordinal(out.latent, spec.categories, derive_seed(spec.seed, 2));
  d.y = std::move(draw.labels);
  out.thresholds = draw.thresholds;
  out.degenerate = draw.degenerate;
  out.split = stratified_split(d.group, spec.groups, train_ratio, derive_seed(spec.seed, 3));
  d.validate();
  return out;
}

}  // namespace omerf::sim
