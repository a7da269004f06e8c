#include "omerf/core.hpp"

#include "json.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <thread>

namespace omerf {

namespace {

constexpr double kTinyProb = std::numeric_limits<double>::min();

// log F(u) for the logistic cdf.
double log_inv_logit(double u) {
  if (u >= 0.0) return -std::log1p(std::exp(-u));
  return u - std::log1p(std::exp(u));
}

// f'(u) = f(u)(1 - 2F(u))
double logistic_pdf_deriv(double u) {
  const double f = inv_logit(u);
  return f * (1.0 - f) * (1.0 - 2.0 * f);
}

}  // namespace

double logit(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw ValidationError("logit: probability " + std::to_string(p) + " outside (0, 1)");
  }
  return std::log(p / (1.0 - p));
}

double clamp_prob(double p, double eps) { return std::min(std::max(p, eps), 1.0 - eps); }

ThresholdVector::ThresholdVector(std::vector<double> theta) : theta_(std::move(theta)) {
  if (theta_.empty()) throw ValidationError("threshold vector needs at least one cut-point");
  for (std::size_t c = 0; c < theta_.size(); ++c) {
    if (!std::isfinite(theta_[c])) throw ValidationError("threshold is not finite");
    if (c > 0 && !(theta_[c] > theta_[c - 1])) {
      throw ValidationError("thresholds must be strictly increasing");
    }
  }
}

ThresholdVector ThresholdVector::shifted(double delta) const {
  std::vector<double> t = theta_;
  for (double& v : t) v += delta;
  return ThresholdVector(std::move(t));
}

std::vector<double> cumulative_probs(const ThresholdVector& theta, double lambda) {
  std::vector<double> gamma(theta.size());
  for (std::size_t c = 0; c < theta.size(); ++c) gamma[c] = inv_logit(theta[c] - lambda);
  return gamma;
}

namespace {

// P(y = c) for 1-based c, computed on whichever tail avoids cancellation.
double category_prob(const ThresholdVector& theta, double lambda, int c) {
  const int C = theta.num_categories();
  const bool upper = c <= C - 1;
  const bool lower = c >= 2;
  if (upper && !lower) return inv_logit(theta[0] - lambda);
  if (lower && !upper) return inv_logit(lambda - theta[C - 2]);
  const double a = theta[c - 1] - lambda;
  const double b = theta[c - 2] - lambda;
  if (b > 0.0) return inv_logit(-b) - inv_logit(-a);
  return inv_logit(a) - inv_logit(b);
}

}  // namespace

std::vector<double> category_probs(const ThresholdVector& theta, double lambda) {
  const int C = theta.num_categories();
  std::vector<double> pi(C);
  for (int c = 1; c <= C; ++c) pi[c - 1] = std::max(category_prob(theta, lambda, c), 0.0);
  return pi;
}

double category_log_prob(const ThresholdVector& theta, double lambda, int category) {
  const int C = theta.num_categories();
  if (category == 1) return log_inv_logit(theta[0] - lambda);
  if (category == C) return log_inv_logit(lambda - theta[C - 2]);
  return std::log(std::max(category_prob(theta, lambda, category), kTinyProb));
}

CategoryDerivs category_derivs(const ThresholdVector& theta, double lambda, int category) {
  const int C = theta.num_categories();
  CategoryDerivs d;
  d.has_upper = category <= C - 1;
  d.has_lower = category >= 2;
  d.log_prob = category_log_prob(theta, lambda, category);
  if (d.has_upper && !d.has_lower) {
    const double a = theta[0] - lambda;
    d.da = inv_logit(-a);
    d.daa = -logistic_pdf(a);
    return d;
  }
  if (d.has_lower && !d.has_upper) {
    const double b = theta[C - 2] - lambda;
    d.db = -inv_logit(b);
    d.dbb = -logistic_pdf(b);
    return d;
  }
  const double a = theta[category - 1] - lambda;
  const double b = theta[category - 2] - lambda;
  const double pi = std::max(category_prob(theta, lambda, category), kTinyProb);
  d.da = logistic_pdf(a) / pi;
  d.db = -logistic_pdf(b) / pi;
  d.daa = logistic_pdf_deriv(a) / pi - d.da * d.da;
  d.dbb = -logistic_pdf_deriv(b) / pi - d.db * d.db;
  d.dab = -d.da * d.db;
  return d;
}

// ---------------------------------------------------------------------------
// Schema

Schema Schema::from_json_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("schema: invalid JSON: ") + e.what());
  }
  Schema s;
  try {
    s.label = j.value("label", std::string{});
    s.group = j.at("group").get<std::string>();
    s.fixed = j.value("fixed", std::vector<std::string>{});
    s.random_slopes = j.value("random_slopes", std::vector<std::string>{});
    s.categories = j.value("categories", 0);
    s.drop_missing = j.value("drop_missing", false);
    if (j.contains("categorical")) {
      for (const auto& [name, levels] : j.at("categorical").items()) {
        s.categorical.emplace_back(name, levels.get<std::vector<std::string>>());
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("schema: ") + e.what());
  }
  if (s.group.empty()) throw ValidationError("schema: group column must be declared");
  return s;
}

Schema Schema::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open schema file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

std::string Schema::to_json_text() const {
  nlohmann::ordered_json j;
  j["label"] = label;
  j["group"] = group;
  j["fixed"] = fixed;
  j["random_slopes"] = random_slopes;
  if (categories > 0) j["categories"] = categories;
  if (!categorical.empty()) {
    nlohmann::ordered_json cat = nlohmann::ordered_json::object();
    for (const auto& [name, levels] : categorical) cat[name] = levels;
    j["categorical"] = cat;
  }
  if (drop_missing) j["drop_missing"] = true;
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Dataset

void GroupedOrdinalDataset::validate() const {
  const std::size_t J = rows();
  if (static_cast<std::size_t>(x.rows()) != J || static_cast<std::size_t>(z.rows()) != J) {
    throw ValidationError("dataset: row counts of x, z and group differ");
  }
  if (has_labels() && y.size() != J) throw ValidationError("dataset: label count differs from rows");
  if (z.cols() < 1) throw ValidationError("dataset: z needs the intercept column");
  if (static_cast<std::size_t>(z.cols()) != slope_names.size() + 1) {
    throw ValidationError("dataset: z column count must equal number of slopes + 1");
  }
  if (static_cast<std::size_t>(x.cols()) != feature_names.size()) {
    throw ValidationError("dataset: feature name count differs from x columns");
  }
  std::vector<int> count(group_labels.size(), 0);
  for (std::size_t r = 0; r < J; ++r) {
    const int g = group[r];
    if (g < 0 || g >= num_groups()) throw ValidationError("dataset: invalid group index");
    ++count[g];
    if (z(r, 0) != 1.0) throw ValidationError("dataset: first column of z must be 1");
    if (has_labels() && (y[r] < 1 || y[r] > num_categories)) {
      throw ValidationError("label outside 1..C");
    }
  }
  for (int c : count) {
    if (c == 0) throw ValidationError("dataset: every group needs at least one row");
  }
  if (!x.allFinite() || !z.allFinite()) throw ValidationError("dataset: non-finite covariate");
  if (num_categories < 2) throw ValidationError("dataset: need C >= 2 categories");
}

GroupedOrdinalDataset GroupedOrdinalDataset::subset(std::span<const std::size_t> idx) const {
  GroupedOrdinalDataset out;
  out.x.resize(static_cast<Eigen::Index>(idx.size()), x.cols());
  out.z.resize(static_cast<Eigen::Index>(idx.size()), z.cols());
  out.group.reserve(idx.size());
  if (has_labels()) out.y.reserve(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto r = static_cast<Eigen::Index>(idx[k]);
    out.x.row(static_cast<Eigen::Index>(k)) = x.row(r);
    out.z.row(static_cast<Eigen::Index>(k)) = z.row(r);
    out.group.push_back(group[idx[k]]);
    if (has_labels()) out.y.push_back(y[idx[k]]);
  }
  out.num_categories = num_categories;
  out.feature_names = feature_names;
  out.slope_names = slope_names;
  out.group_labels = group_labels;
  return out;
}

int GroupedOrdinalDataset::observed_categories() const {
  std::set<int> s(y.begin(), y.end());
  return static_cast<int>(s.size());
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

bool is_missing(const std::string& s) { return s.empty() || s == "NA" || s == "NaN" || s == "nan"; }

std::string location(std::size_t line, const std::string& column) {
  return "line " + std::to_string(line) + ", column '" + column + "'";
}

double parse_number(const std::string& s, std::size_t line, const std::string& column) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) {
    throw ValidationError("parse error at " + location(line, column) + ": '" + s + "' is not a number");
  }
  return v;
}

}  // namespace

GroupedOrdinalDataset parse_dataset(std::istream& in, const Schema& schema, bool require_label) {
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("CSV is empty; header row required");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);  // BOM
  const auto header = split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t k = 0; k < header.size(); ++k) col[header[k]] = k;

  auto find = [&](const std::string& name, bool required) -> long {
    auto it = col.find(name);
    if (it == col.end()) {
      if (required) throw ValidationError("schema mismatch: column '" + name + "' not in CSV header");
      return -1;
    }
    return static_cast<long>(it->second);
  };

  const long group_col = find(schema.group, true);
  const long label_col = schema.label.empty() ? -1 : find(schema.label, require_label);
  if (require_label && label_col < 0) throw ValidationError("schema mismatch: label column not declared");

  std::map<std::string, std::vector<std::string>> categorical(schema.categorical.begin(),
                                                               schema.categorical.end());

  // Expand fixed columns; categorical ones become indicator columns for every
  // level but the first.
  struct FixedCol {
    long src;
    std::string level;  // empty for numeric
  };
  std::vector<FixedCol> fixed_cols;
  std::vector<std::string> feature_names;
  for (const auto& name : schema.fixed) {
    const long src = find(name, true);
    auto it = categorical.find(name);
    if (it == categorical.end()) {
      fixed_cols.push_back({src, {}});
      feature_names.push_back(name);
    } else {
      if (it->second.size() < 2) throw ValidationError("categorical column '" + name + "' needs >= 2 levels");
      for (std::size_t l = 1; l < it->second.size(); ++l) {
        fixed_cols.push_back({src, it->second[l]});
        feature_names.push_back(name + "=" + it->second[l]);
      }
    }
  }
  std::vector<long> slope_cols;
  for (const auto& name : schema.random_slopes) {
    if (categorical.count(name)) throw ValidationError("random slope '" + name + "' must be numeric");
    slope_cols.push_back(find(name, true));
  }

  std::vector<std::vector<double>> xrows, zrows;
  std::vector<std::string> group_raw;
  std::vector<int> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != header.size()) {
      throw ValidationError("parse error at line " + std::to_string(line_no) + ": expected " +
                            std::to_string(header.size()) + " fields, got " +
                            std::to_string(fields.size()));
    }
    bool missing = false;
    auto check_missing = [&](long c, const std::string& name) {
      if (is_missing(fields[c])) {
        if (!schema.drop_missing) throw ValidationError("missing value at " + location(line_no, name));
        missing = true;
      }
    };
    check_missing(group_col, schema.group);
    if (label_col >= 0) check_missing(label_col, schema.label);
    for (std::size_t k = 0; k < fixed_cols.size(); ++k) check_missing(fixed_cols[k].src, header[fixed_cols[k].src]);
    for (long c : slope_cols) check_missing(c, header[c]);
    if (missing) continue;

    std::vector<double> xr;
    xr.reserve(fixed_cols.size());
    for (const auto& fc : fixed_cols) {
      const std::string& v = fields[fc.src];
      if (fc.level.empty()) {
        xr.push_back(parse_number(v, line_no, header[fc.src]));
      } else {
        const auto& levels = categorical.at(header[fc.src]);
        if (std::find(levels.begin(), levels.end(), v) == levels.end()) {
          throw ValidationError("undeclared level '" + v + "' at " + location(line_no, header[fc.src]));
        }
        xr.push_back(v == fc.level ? 1.0 : 0.0);
      }
    }
    std::vector<double> zr{1.0};
    for (long c : slope_cols) zr.push_back(parse_number(fields[c], line_no, header[c]));
    if (label_col >= 0) {
      const double lv = parse_number(fields[label_col], line_no, schema.label);
      if (lv != std::floor(lv)) throw ValidationError("label at " + location(line_no, schema.label) + " is not an integer");
      const int li = static_cast<int>(lv);
      if (li < 1 || (schema.categories > 0 && li > schema.categories)) {
        throw ValidationError("label outside 1..C at " + location(line_no, schema.label));
      }
      labels.push_back(li);
    }
    xrows.push_back(std::move(xr));
    zrows.push_back(std::move(zr));
    group_raw.push_back(fields[group_col]);
  }
  if (xrows.empty()) throw ValidationError("CSV has no data rows");

  GroupedOrdinalDataset d;
  const auto J = static_cast<Eigen::Index>(xrows.size());
  d.x.resize(J, static_cast<Eigen::Index>(fixed_cols.size()));
  d.z.resize(J, static_cast<Eigen::Index>(slope_cols.size() + 1));
  for (Eigen::Index r = 0; r < J; ++r) {
    for (Eigen::Index c = 0; c < d.x.cols(); ++c) d.x(r, c) = xrows[r][c];
    for (Eigen::Index c = 0; c < d.z.cols(); ++c) d.z(r, c) = zrows[r][c];
  }
  std::set<std::string> uniq(group_raw.begin(), group_raw.end());
  d.group_labels.assign(uniq.begin(), uniq.end());
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < d.group_labels.size(); ++i) index[d.group_labels[i]] = static_cast<int>(i);
  for (const auto& g : group_raw) d.group.push_back(index[g]);
  d.y = std::move(labels);
  d.feature_names = std::move(feature_names);
  d.slope_names = schema.random_slopes;
  if (schema.categories > 0) {
    d.num_categories = schema.categories;
  } else if (!d.y.empty()) {
    d.num_categories = std::max(2, *std::max_element(d.y.begin(), d.y.end()));
  } else {
    d.num_categories = 2;
  }
  d.validate();
  return d;
}

GroupedOrdinalDataset load_dataset(const std::string& csv_path, const Schema& schema, bool require_label) {
  std::ifstream in(csv_path);
  if (!in) throw IoError("cannot open data file " + csv_path);
  return parse_dataset(in, schema, require_label);
}

std::vector<int> remap_groups(const GroupedOrdinalDataset& data, const std::vector<std::string>& known) {
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < known.size(); ++i) index[known[i]] = static_cast<int>(i);
  std::vector<int> out(data.rows(), -1);
  for (std::size_t r = 0; r < data.rows(); ++r) {
    auto it = index.find(data.group_labels[data.group[r]]);
    if (it != index.end()) out[r] = it->second;
  }
  return out;
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& body) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(threads, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w * n / workers; i < (w + 1) * n / workers; ++i) body(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  // splitmix64 finalizer over a golden-ratio stride
  std::uint64_t z = master + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace omerf
