#include "omerf/metrics.hpp"

#include <algorithm>
#include <numeric>

namespace omerf::metrics {

namespace {

void check_lengths(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) throw ValidationError("metrics: length mismatch");
  if (a.empty()) throw ValidationError("metrics: empty input");
}

double choose2(double n) { return n * (n - 1.0) / 2.0; }

}  // namespace

ConfusionMatrix::ConfusionMatrix(std::span<const int> truth, std::span<const int> pred, int num_categories) {
  check_lengths(truth, pred);
  if (num_categories < 1) throw ValidationError("confusion matrix needs at least one category");
  counts_.assign(static_cast<std::size_t>(num_categories), std::vector<long>(static_cast<std::size_t>(num_categories), 0));
  for (std::size_t k = 0; k < truth.size(); ++k) {
    if (truth[k] < 1 || truth[k] > num_categories || pred[k] < 1 || pred[k] > num_categories) {
      throw ValidationError("label outside 1..C");
    }
    ++counts_[static_cast<std::size_t>(truth[k] - 1)][static_cast<std::size_t>(pred[k] - 1)];
  }
  total_ = static_cast<long>(truth.size());
}

long ConfusionMatrix::row_total(int truth) const {
  const auto& row = counts_[static_cast<std::size_t>(truth - 1)];
  return std::accumulate(row.begin(), row.end(), 0L);
}

long ConfusionMatrix::col_total(int pred) const {
  long s = 0;
  for (const auto& row : counts_) s += row[static_cast<std::size_t>(pred - 1)];
  return s;
}

double accuracy(std::span<const int> truth, std::span<const int> pred) {
  check_lengths(truth, pred);
  std::size_t hits = 0;
  for (std::size_t k = 0; k < truth.size(); ++k) hits += truth[k] == pred[k];
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

double mse_ordinal(std::span<const int> truth, std::span<const int> pred) {
  check_lengths(truth, pred);
  double s = 0.0;
  for (std::size_t k = 0; k < truth.size(); ++k) {
    const double d = truth[k] - pred[k];
    s += d * d;
  }
  return s / static_cast<double>(truth.size());
}

double adjusted_rand_index(std::span<const int> a, std::span<const int> b) {
  check_lengths(a, b);
  if (a.size() < 2) return 1.0;  // no pairs to compare
  std::map<std::pair<int, int>, double> cells;
  std::map<int, double> rows, cols;
  for (std::size_t k = 0; k < a.size(); ++k) {
    cells[{a[k], b[k]}] += 1.0;
    rows[a[k]] += 1.0;
    cols[b[k]] += 1.0;
  }
  double index = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (const auto& [key, n] : cells) index += choose2(n);
  for (const auto& [key, n] : rows) sum_a += choose2(n);
  for (const auto& [key, n] : cols) sum_b += choose2(n);
  const double expected = sum_a * sum_b / choose2(static_cast<double>(a.size()));
  const double max_index = 0.5 * (sum_a + sum_b);
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

Kappa cohens_kappa_detail(std::span<const int> truth, std::span<const int> pred) {
  check_lengths(truth, pred);
  std::map<int, double> row, col;
  double agree = 0.0;
  for (std::size_t k = 0; k < truth.size(); ++k) {
    row[truth[k]] += 1.0;
    col[pred[k]] += 1.0;
    agree += truth[k] == pred[k];
  }
  const double n = static_cast<double>(truth.size());
  double pe = 0.0;
  for (const auto& [label, count] : row) {
    auto it = col.find(label);
    if (it != col.end()) pe += (count / n) * (it->second / n);
  }
  const double po = agree / n;
  Kappa k;
  if (pe >= 1.0) {
    k.degenerate = true;
    return k;
  }
  k.value = (po - pe) / (1.0 - pe);
  return k;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j = {{"model", model},   {"dataset", dataset}, {"n", n},
                      {"accuracy", accuracy}, {"mse", mse},   {"ari", ari},
                      {"kappa", kappa},   {"kappa_degenerate", kappa_degenerate}};
  for (const auto& [name, v] : extra) j[name] = v;
  return j;
}

MetricsReport evaluate(std::span<const int> truth, std::span<const int> pred, const std::string& model,
                       const std::string& dataset) {
  MetricsReport r;
  r.accuracy = accuracy(truth, pred);
  r.mse = mse_ordinal(truth, pred);
  r.ari = adjusted_rand_index(truth, pred);
  const Kappa k = cohens_kappa_detail(truth, pred);
  r.kappa = k.value;
  r.kappa_degenerate = k.degenerate;
  r.n = truth.size();
  r.model = model;
  r.dataset = dataset;
  return r;
}

double metric_value(const MetricsReport& r, const std::string& name) {
  if (name == "accuracy") return r.accuracy;
  if (name == "mse") return r.mse;
  if (name == "ari") return r.ari;
  if (name == "kappa") return r.kappa;
  auto it = r.extra.find(name);
  if (it == r.extra.end()) throw ValidationError("unknown metric " + name);
  return it->second;
}

Summary summarize(std::span<const double> values) {
  Summary s;
  s.n = values.size();
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.variance = ss / static_cast<double>(s.n - 1);
  }
  return s;
}

}  // namespace omerf::metrics
