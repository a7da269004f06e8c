#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace omerf {

// Error categories map onto CLI exit codes (1 I/O, 2 validation, 3 non-convergence).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class ConvergenceError : public Error {
 public:
  using Error::Error;
};

inline constexpr double kProbEps = 1e-6;

/// Cumulative-logit link. The latent residual of the logistic distribution
/// has standard deviation pi/sqrt(3), which is all the ICC needs.
struct LinkFunction {
  static constexpr double residual_variance = std::numbers::pi * std::numbers::pi / 3.0;
  static double residual_sd() { return std::sqrt(residual_variance); }
};

/// log(p / (1 - p)). Throws ValidationError outside (0, 1).
double logit(double p);

/// Logistic cdf, evaluated without overflow for large |u|.
inline double inv_logit(double u) {
  if (u >= 0.0) return 1.0 / (1.0 + std::exp(-u));
  const double e = std::exp(u);
  return e / (1.0 + e);
}

/// Logistic density F(u)(1 - F(u)).
inline double logistic_pdf(double u) {
  const double f = inv_logit(u);
  return f * (1.0 - f);
}

double clamp_prob(double p, double eps = kProbEps);

/// Strictly increasing cut-points theta_1 < ... < theta_{C-1}. The sentinels
/// -inf and +inf are implicit.
class ThresholdVector {
 public:
  ThresholdVector() = default;
  explicit ThresholdVector(std::vector<double> theta);

  std::size_t size() const { return theta_.size(); }
  int num_categories() const { return static_cast<int>(theta_.size()) + 1; }
  double operator[](std::size_t c) const { return theta_[c]; }
  const std::vector<double>& values() const { return theta_; }

  ThresholdVector shifted(double delta) const;

 private:
  std::vector<double> theta_;
};

/// P(y = c | lambda) for c = 1..C, returned 0-based.
std::vector<double> category_probs(const ThresholdVector& theta, double lambda);

/// P(y <= c | lambda) for c = 1..C-1.
std::vector<double> cumulative_probs(const ThresholdVector& theta, double lambda);

/// log P(y = category | lambda) with the probability clamped away from 0.
double category_log_prob(const ThresholdVector& theta, double lambda, int category);

/// First and second derivatives of log P(y = c) with respect to the upper
/// argument a = theta_c - lambda and the lower argument b = theta_{c-1} - lambda.
/// Missing sentinel sides carry zero derivatives.
struct CategoryDerivs {
  double log_prob = 0.0;
  double da = 0.0, db = 0.0;
  double daa = 0.0, dbb = 0.0, dab = 0.0;
  bool has_upper = false, has_lower = false;

  double dlambda() const { return -(da + db); }
  double d2lambda() const { return daa + 2.0 * dab + dbb; }
};

CategoryDerivs category_derivs(const ThresholdVector& theta, double lambda, int category);

/// Column roles for CSV ingestion.
struct Schema {
  std::string label;
  std::string group;
  std::vector<std::string> fixed;
  std::vector<std::string> random_slopes;
  /// Declared category count; 0 means max observed label.
  int categories = 0;
  /// Categorical columns expanded into one-hot indicators, keyed by column
  /// name with the declared level list. The first level is the reference.
  std::vector<std::pair<std::string, std::vector<std::string>>> categorical;
  bool drop_missing = false;

  static Schema from_json_file(const std::string& path);
  static Schema from_json_text(const std::string& text);
  std::string to_json_text() const;
};

/// Rows carry a dense 0-based group index into group_labels; the labels are
/// sorted lexicographically so index i corresponds to group i + 1.
struct GroupedOrdinalDataset {
  Eigen::MatrixXd x;  // J x P
  Eigen::MatrixXd z;  // J x (Q + 1), first column all ones
  std::vector<int> group;
  std::vector<int> y;  // 1..C; empty when labels are absent
  int num_categories = 0;
  std::vector<std::string> feature_names;
  std::vector<std::string> slope_names;
  std::vector<std::string> group_labels;

  std::size_t rows() const { return group.size(); }
  int num_groups() const { return static_cast<int>(group_labels.size()); }
  int num_random() const { return static_cast<int>(z.cols()); }
  bool has_labels() const { return !y.empty(); }

  /// Throws ValidationError if any invariant is broken.
  void validate() const;

  /// Rows restricted to the given indices; group labels and the label
  /// alphabet are preserved so that group indices keep their meaning.
  GroupedOrdinalDataset subset(std::span<const std::size_t> rows) const;

  /// Number of distinct labels actually present.
  int observed_categories() const;
};

/// Load a CSV file under the given schema. When require_label is false the
/// label column may be absent (prediction inputs).
GroupedOrdinalDataset load_dataset(const std::string& csv_path, const Schema& schema,
                                   bool require_label = true);
GroupedOrdinalDataset parse_dataset(std::istream& in, const Schema& schema,
                                    bool require_label = true);

/// Map a dataset onto a fixed list of known group labels. Rows whose label is
/// unknown get group index -1.
std::vector<int> remap_groups(const GroupedOrdinalDataset& data,
                              const std::vector<std::string>& known_labels);

/// Runs body(i) for i in [0, n) on up to `threads` workers. Work is split
/// into contiguous index blocks, so any per-index result is independent of
/// the thread count.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& body);

/// 64-bit stream seed derived from a master seed and a stream index.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream);

}  // namespace omerf
