#pragma once

#include "omerf/core.hpp"

#include "json.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace omerf::metrics {

/// Rows are truth, columns are predictions; labels 1..C.
class ConfusionMatrix {
 public:
  ConfusionMatrix(std::span<const int> truth, std::span<const int> pred, int num_categories);

  int num_categories() const { return static_cast<int>(counts_.size()); }
  long count(int truth, int pred) const { return counts_[truth - 1][pred - 1]; }
  long total() const { return total_; }
  long row_total(int truth) const;
  long col_total(int pred) const;

 private:
  std::vector<std::vector<long>> counts_;
  long total_ = 0;
};

double accuracy(std::span<const int> truth, std::span<const int> pred);

/// Mean squared difference of the integer category codes.
double mse_ordinal(std::span<const int> truth, std::span<const int> pred);

/// Hubert-Arabie adjusted Rand index. Returns 1 when the chance-corrected
/// denominator vanishes, which includes inputs with fewer than two items.
double adjusted_rand_index(std::span<const int> a, std::span<const int> b);

struct Kappa {
  double value = 0.0;
  /// Expected agreement equals 1, so kappa is 0/0; value is set to 0.
  bool degenerate = false;
};

Kappa cohens_kappa_detail(std::span<const int> truth, std::span<const int> pred);
inline double cohens_kappa(std::span<const int> truth, std::span<const int> pred) {
  return cohens_kappa_detail(truth, pred).value;
}

struct MetricsReport {
  double accuracy = 0.0;
  double mse = 0.0;
  double ari = 0.0;
  double kappa = 0.0;
  bool kappa_degenerate = false;
  std::size_t n = 0;
  std::string model;
  std::string dataset;
  /// Slots for indices computed elsewhere (e.g. other ordinal indices).
  std::map<std::string, double> extra;

  nlohmann::json to_json() const;
};

MetricsReport evaluate(std::span<const int> truth, std::span<const int> pred, const std::string& model = {},
                       const std::string& dataset = {});

inline const std::vector<std::string> kMetricNames{"accuracy", "mse", "ari", "kappa"};

double metric_value(const MetricsReport& r, const std::string& name);

struct Summary {
  double mean = 0.0;
  double variance = 0.0;  // unbiased; 0 for a single value
  std::size_t n = 0;
};

Summary summarize(std::span<const double> values);

}  // namespace omerf::metrics
