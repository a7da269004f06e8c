#include "omerf/cli.hpp"

#include "omerf/clmm.hpp"
#include "omerf/forest.hpp"
#include "omerf/sim.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>

namespace omerf::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kModelFormatVersion = 1;

// ---------------------------------------------------------------------------
// Files

std::ofstream open_out(const fs::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  return f;
}

void write_text(const fs::path& path, const std::string& text) {
  auto f = open_out(path);
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

json read_json_file(const std::string& path) {
  const std::string text = read_text(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(path + ": invalid JSON: " + e.what());
  }
}

fs::path prepare_out_dir(const std::string& out) {
  fs::path dir = out.empty() ? fs::path(".") : fs::path(out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
  return dir;
}

std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += (c == '\n' || c == '\r') ? ' ' : c;
  }
  return q + "\"";
}

double parse_double(const std::string& s, const std::string& what) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw ValidationError(what + ": not a number: '" + s + "'");
  return v;
}

long parse_long(const std::string& s, const std::string& what) {
  char* end = nullptr;
  const long v = std::strtol(s.c_str(), &end, 10);
  if (s.empty() || end != s.c_str() + s.size()) throw ValidationError(what + ": not an integer: '" + s + "'");
  return v;
}

std::vector<std::string> read_csv_lines(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

// ---------------------------------------------------------------------------
// Config resolution: defaults < config file < explicit flags.

json resolve_config(const std::string& command, const json& defaults, const std::string& config_path,
                    const json& flags) {
  json resolved = defaults;
  if (!config_path.empty()) {
    json file = read_json_file(config_path);
    if (!file.is_object()) throw ValidationError("config: top level must be an object");
    if (file.contains("command")) {
      if (file["command"] != command) {
        throw ValidationError("config: written for command '" + file["command"].dump() + "', not '" + command + "'");
      }
      file.erase("command");
    }
    for (const auto& [key, value] : file.items()) {
      if (!defaults.contains(key)) throw ValidationError("config: unknown key '" + key + "'");
    }
    resolved.merge_patch(file);
  }
  resolved.merge_patch(flags);
  return resolved;
}

void write_manifest(const fs::path& dir, const std::string& command, const json& resolved) {
  json m = resolved;
  m["command"] = command;
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

json common_defaults() { return {{"seed", 1}, {"threads", 1}, {"out", "."}}; }

std::uint64_t cfg_seed(const json& cfg) { return cfg.at("seed").get<std::uint64_t>(); }

int cfg_threads(const json& cfg) {
  const int t = cfg.at("threads").get<int>();
  if (t < 1) throw ValidationError("threads must be >= 1");
  return t;
}

OmerfConfig omerf_config(const json& cfg, std::uint64_t seed, int threads) {
  OmerfConfig c = OmerfConfig::from_json(cfg.value("omerf", json::object()));
  c.validate();
  c.forest.seed = seed;
  if (c.init_forest) c.init_forest->seed = seed;
  c.threads = threads;
  c.forest.num_threads = threads;
  if (c.init_forest) c.init_forest->num_threads = threads;
  c.clmm.threads = threads;
  return c;
}

// ---------------------------------------------------------------------------
// Inputs

struct Input {
  GroupedOrdinalDataset data;
  std::vector<std::size_t> row_ids;
  Schema schema;
};

std::vector<std::size_t> select_rows(const std::string& split_path, const std::string& set, std::size_t n) {
  std::vector<std::size_t> rows;
  if (split_path.empty() || set == "all") {
    rows.resize(n);
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    return rows;
  }
  if (set != "train" && set != "test") throw ValidationError("set must be train, test or all");
  const auto lines = read_csv_lines(split_path);
  if (lines.empty() || split_csv_line(lines[0]) != std::vector<std::string>{"row_id", "set"}) {
    throw ValidationError(split_path + ": expected header row_id,set");
  }
  for (std::size_t k = 1; k < lines.size(); ++k) {
    const auto f = split_csv_line(lines[k]);
    if (f.size() != 2) throw ValidationError(split_path + ": line " + std::to_string(k + 1) + ": expected 2 fields");
    const long id = parse_long(f[0], split_path + " line " + std::to_string(k + 1));
    if (id < 0 || static_cast<std::size_t>(id) >= n) {
      throw ValidationError(split_path + ": row_id " + f[0] + " outside the data");
    }
    if (f[1] == set) rows.push_back(static_cast<std::size_t>(id));
  }
  std::sort(rows.begin(), rows.end());
  if (rows.empty()) throw ValidationError(split_path + ": no rows in set '" + set + "'");
  return rows;
}

Input load_input(const std::string& data_path, const Schema& schema, const std::string& split_path,
                 const std::string& set, bool require_label) {
  if (data_path.empty()) throw ValidationError("--data is required");
  Input in;
  in.schema = schema;
  GroupedOrdinalDataset full = load_dataset(data_path, schema, require_label);
  in.row_ids = select_rows(split_path, set, full.rows());
  in.data = in.row_ids.size() == full.rows() ? std::move(full) : full.subset(in.row_ids);
  return in;
}

Schema schema_for(const std::string& schema_path, const std::string& data_path) {
  if (!schema_path.empty()) return Schema::from_json_file(schema_path);
  const fs::path guess = fs::path(data_path).parent_path() / "schema.json";
  if (fs::exists(guess)) return Schema::from_json_file(guess.string());
  throw ValidationError("--schema is required (no schema.json next to the data)");
}

RandomEffectsSpec effects_for(const GroupedOrdinalDataset& data) {
  return RandomEffectsSpec{static_cast<int>(data.slope_names.size())};
}

// ---------------------------------------------------------------------------
// Model files

struct LoadedModel {
  std::string kind;
  Schema schema;
  int num_categories = 0;
  std::vector<std::string> feature_names;
  json body;
};

json model_envelope(const std::string& kind, const Schema& schema, const GroupedOrdinalDataset& data,
                    json body) {
  return {{"format", "omerf-model"},
          {"version", kModelFormatVersion},
          {"kind", kind},
          {"schema", json::parse(schema.to_json_text())},
          {"num_categories", data.num_categories},
          {"feature_names", data.feature_names},
          {"model", std::move(body)}};
}

LoadedModel load_model(const std::string& path) {
  if (path.empty()) throw ValidationError("--model is required");
  const json j = read_json_file(path);
  LoadedModel m;
  try {
    if (j.at("format") != "omerf-model") throw ValidationError(path + ": not a model file");
    if (j.at("version").get<int>() != kModelFormatVersion) {
      throw ValidationError(path + ": unsupported model version " + j.at("version").dump());
    }
    m.kind = j.at("kind").get<std::string>();
    m.schema = Schema::from_json_text(j.at("schema").dump());
    m.num_categories = j.at("num_categories").get<int>();
    m.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    m.body = j.at("model");
  } catch (const json::exception& e) {
    throw ValidationError(path + ": " + e.what());
  }
  if (std::find(kModelKinds.begin(), kModelKinds.end(), m.kind) == kModelKinds.end()) {
    throw ValidationError(path + ": unknown model kind " + m.kind);
  }
  return m;
}

Input load_input_for_model(const LoadedModel& model, const std::string& data_path, const std::string& split_path,
                           const std::string& set, bool require_label) {
  Input in = load_input(data_path, model.schema, split_path, set, require_label);
  if (in.data.feature_names != model.feature_names) {
    throw ValidationError("schema mismatch: data features differ from the model's");
  }
  if (in.data.has_labels()) {
    for (int y : in.data.y) {
      if (y > model.num_categories) throw ValidationError("label outside 1.." + std::to_string(model.num_categories));
    }
  }
  in.data.num_categories = model.num_categories;
  return in;
}

Eigen::MatrixXd predict_model(const LoadedModel& model, const GroupedOrdinalDataset& data) {
  if (model.kind == "clm") {
    const ClmFit fit = ClmFit::from_json(model.body);
    return predict_probs(fit.theta, data.x * fit.beta);
  }
  if (model.kind == "clmm") {
    const ClmmFit fit = ClmmFit::from_json(model.body);
    const std::vector<int> group = remap_groups(data, fit.group_labels);
    return predict_probs(fit.theta, linear_predictor(data, group, fit.beta, fit.b_modes, {}));
  }
  if (model.kind == "omerf") return predict_omerf(OmerfModel::from_json(model.body), data).probs;
  return ProbabilityForest::from_json(model.body).predict(data.x);
}

// ---------------------------------------------------------------------------
// Commands

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> threads;
};

json global_flags(const Globals& g) {
  json f = json::object();
  if (g.seed) f["seed"] = *g.seed;
  if (g.out) f["out"] = *g.out;
  if (g.threads) f["threads"] = *g.threads;
  return f;
}

void write_csv_header(std::ostream& f, const std::vector<std::string>& names) {
  for (std::size_t k = 0; k < names.size(); ++k) f << (k ? "," : "") << csv_quote(names[k]);
  f << "\n";
}

int cmd_simulate(const json& cfg, std::ostream& out) {
  const int dgp = cfg.at("dgp").get<int>();
  sim::DgpSpec spec = sim::scenario(dgp, cfg_seed(cfg));
  spec.groups = cfg.at("groups").get<int>();
  spec.per_group = cfg.at("per_group").get<int>();
  if (spec.groups < 1 || spec.per_group < 1) throw ValidationError("groups and per_group must be >= 1");
  const double ratio = cfg.at("ratio").get<double>();
  if (!(ratio > 0.0 && ratio < 1.0)) throw ValidationError("ratio must be in (0, 1)");
  const fs::path dir = prepare_out_dir(cfg.at("out"));
  write_manifest(dir, "simulate", cfg);

  const sim::SimulatedData s = sim::generate(spec, ratio);
  const auto& d = s.data;
  {
    auto f = open_out(dir / "data.csv");
    std::vector<std::string> header{"group", "y"};
    header.insert(header.end(), d.feature_names.begin(), d.feature_names.end());
    write_csv_header(f, header);
    for (std::size_t r = 0; r < d.rows(); ++r) {
      f << d.group_labels[static_cast<std::size_t>(d.group[r])] << ',' << d.y[r];
      for (Eigen::Index p = 0; p < d.x.cols(); ++p) f << ',' << format_double(d.x(static_cast<Eigen::Index>(r), p));
      f << '\n';
    }
  }
  {
    std::vector<std::string> set(d.rows());
    for (auto r : s.split.train) set[r] = "train";
    for (auto r : s.split.test) set[r] = "test";
    auto f = open_out(dir / "split.csv");
    f << "row_id,set\n";
    for (std::size_t r = 0; r < set.size(); ++r) f << r << ',' << set[r] << '\n';
  }
  Schema schema;
  schema.label = "y";
  schema.group = "group";
  schema.fixed = d.feature_names;
  if (spec.has_slope) schema.random_slopes = {"x1"};
  schema.categories = spec.categories;
  write_text(dir / "schema.json", schema.to_json_text() + "\n");

  json b = json::array();
  for (Eigen::Index i = 0; i < s.b_true.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index k = 0; k < s.b_true.cols(); ++k) row.push_back(s.b_true(i, k));
    b.push_back(row);
  }
  const json truth = {{"b_true", b},
                      {"group_labels", d.group_labels},
                      {"theta_sim", s.thresholds.values()},
                      {"spec", spec.to_json()},
                      {"seed", spec.seed},
                      {"degenerate", s.degenerate}};
  write_text(dir / "truth.json", truth.dump(2) + "\n");
  out << "wrote " << d.rows() << " rows to " << (dir / "data.csv").string() << "\n";
  return kExitOk;
}

int cmd_fit(const json& cfg, std::ostream& out, std::ostream& err) {
  const std::string kind = cfg.at("model");
  if (std::find(kModelKinds.begin(), kModelKinds.end(), kind) == kModelKinds.end()) {
    throw ValidationError("unknown model '" + kind + "' (clm, clmm, omerf, ordforest-init)");
  }
  const std::uint64_t seed = cfg_seed(cfg);
  const int threads = cfg_threads(cfg);
  const OmerfConfig ocfg = omerf_config(cfg, seed, threads);
  const std::string data_path = cfg.at("data");
  const Schema schema = schema_for(cfg.at("schema"), data_path);
  const Input in = load_input(data_path, schema, cfg.at("split"), cfg.at("set"), true);
  const fs::path dir = prepare_out_dir(cfg.at("out"));
  write_manifest(dir, "fit", cfg);

  json body, summary{{"kind", kind}, {"n", in.data.rows()}, {"num_categories", in.data.num_categories}};
  int code = kExitOk;
  if (kind == "clm") {
    const ClmFit fit = fit_clm(in.data, true);
    body = fit.to_json();
    summary.update({{"loglik", fit.loglik},
                    {"converged", fit.converged},
                    {"iterations", fit.iterations},
                    {"separation", fit.separation},
                    {"theta", fit.theta.values()},
                    {"beta", std::vector<double>(fit.beta.data(), fit.beta.data() + fit.beta.size())}});
    if (!fit.converged) code = kExitConvergence;
  } else if (kind == "clmm") {
    ClmmOptions opts;
    opts.threads = threads;
    const ClmmFit fit = fit_clmm(in.data, effects_for(in.data), {}, true, opts);
    body = fit.to_json();
    summary.update({{"loglik", fit.marginal_loglik},
                    {"sigma2", std::vector<double>(fit.sigma2.data(), fit.sigma2.data() + fit.sigma2.size())},
                    {"icc", icc(fit.sigma2[0])},
                    {"converged", fit.converged},
                    {"iterations", fit.iterations},
                    {"single_group", fit.single_group}});
  } else if (kind == "omerf") {
    const OmerfModel m = fit_omerf(in.data, effects_for(in.data), ocfg);
    body = m.to_json();
    const auto& s2 = m.clmm.sigma2;
    summary.update({{"loglik", m.clmm.marginal_loglik},
                    {"sigma2", std::vector<double>(s2.data(), s2.data() + s2.size())},
                    {"icc", icc(s2[0])},
                    {"converged", m.converged},
                    {"iterations", m.iterations},
                    {"trace", m.trace},
                    {"warnings", m.warnings}});
    for (const auto& w : m.warnings) err << "warning: " << w << "\n";
  } else {
    const ProbabilityForest pf = ProbabilityForest::fit(in.data, ocfg.init_forest.value_or(ocfg.forest));
    body = pf.to_json();
    summary.update({{"converged", true}, {"iterations", 0}});
  }
  write_text(dir / "model.json", model_envelope(kind, schema, in.data, std::move(body)).dump() + "\n");
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  out << "fitted " << kind << " on " << in.data.rows() << " rows\n";
  if (code == kExitConvergence) err << "error: " << kind << " did not converge\n";
  return code;
}

void write_predictions(const fs::path& path, const std::vector<std::size_t>& row_ids, const Eigen::MatrixXd& probs) {
  const std::vector<int> cls = argmax_classes(probs);
  auto f = open_out(path);
  f << "row_id,class";
  for (Eigen::Index c = 0; c < probs.cols(); ++c) f << ",p" << c + 1;
  f << '\n';
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    f << row_ids[static_cast<std::size_t>(r)] << ',' << cls[static_cast<std::size_t>(r)];
    for (Eigen::Index c = 0; c < probs.cols(); ++c) f << ',' << format_double(probs(r, c));
    f << '\n';
  }
}

int cmd_predict(const json& cfg, std::ostream& out) {
  const LoadedModel model = load_model(cfg.at("model"));
  const Input in = load_input_for_model(model, cfg.at("data"), cfg.at("split"), cfg.at("set"), false);
  const fs::path dir = prepare_out_dir(cfg.at("out"));
  write_manifest(dir, "predict", cfg);
  write_predictions(dir / "predictions.csv", in.row_ids, predict_model(model, in.data));
  out << "predicted " << in.data.rows() << " rows\n";
  return kExitOk;
}

std::vector<int> read_prediction_classes(const std::string& path, const std::vector<std::size_t>& row_ids) {
  const auto lines = read_csv_lines(path);
  if (lines.empty()) throw ValidationError(path + ": empty predictions file");
  const auto header = split_csv_line(lines[0]);
  if (header.size() < 2 || header[0] != "row_id" || header[1] != "class") {
    throw ValidationError(path + ": expected header row_id,class,...");
  }
  std::map<std::size_t, int> by_row;
  for (std::size_t k = 1; k < lines.size(); ++k) {
    const auto f = split_csv_line(lines[k]);
    const std::string where = path + " line " + std::to_string(k + 1);
    if (f.size() < 2) throw ValidationError(where + ": too few fields");
    by_row[static_cast<std::size_t>(parse_long(f[0], where))] = static_cast<int>(parse_long(f[1], where));
  }
  std::vector<int> cls;
  cls.reserve(row_ids.size());
  for (auto r : row_ids) {
    auto it = by_row.find(r);
    if (it == by_row.end()) throw ValidationError(path + ": no prediction for row " + std::to_string(r));
    cls.push_back(it->second);
  }
  return cls;
}

int cmd_evaluate(const json& cfg, std::ostream& out) {
  const std::string model_path = cfg.at("model"), pred_path = cfg.at("predictions");
  if (model_path.empty() == pred_path.empty()) throw ValidationError("give exactly one of --model or --predictions");
  const std::string data_path = cfg.at("data");
  Input in;
  std::vector<int> predicted;
  std::string label;
  if (!model_path.empty()) {
    const LoadedModel model = load_model(model_path);
    in = load_input_for_model(model, data_path, cfg.at("split"), cfg.at("set"), true);
    predicted = argmax_classes(predict_model(model, in.data));
    label = model.kind;
  } else {
    in = load_input(data_path, schema_for(cfg.at("schema"), data_path), cfg.at("split"), cfg.at("set"), true);
    predicted = read_prediction_classes(pred_path, in.row_ids);
    label = "predictions";
  }
  const fs::path dir = prepare_out_dir(cfg.at("out"));
  write_manifest(dir, "evaluate", cfg);
  const metrics::MetricsReport report = metrics::evaluate(in.data.y, predicted, label, data_path);
  write_text(dir / "metrics.json", report.to_json().dump(2) + "\n");
  auto f = open_out(dir / "metrics.csv");
  f << "model,dataset,n,accuracy,mse,ari,kappa,kappa_degenerate\n"
    << csv_quote(report.model) << ',' << csv_quote(report.dataset) << ',' << report.n << ','
    << format_double(report.accuracy) << ',' << format_double(report.mse) << ',' << format_double(report.ari) << ','
    << format_double(report.kappa) << ',' << (report.kappa_degenerate ? 1 : 0) << '\n';
  out << report.to_json().dump(2) << "\n";
  return kExitOk;
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> v;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) v.push_back(static_cast<int>(parse_long(item, "list")));
  return v;
}

std::vector<std::string> parse_string_list(const std::string& s) {
  std::vector<std::string> v;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) v.push_back(item);
  return v;
}

int cmd_benchmark(const json& cfg, std::ostream& out, std::ostream& err) {
  BenchmarkPlan plan;
  plan.dgps = cfg.at("dgps").get<std::vector<int>>();
  plan.replications = cfg.at("replications").get<int>();
  plan.models = cfg.at("models").get<std::vector<std::string>>();
  plan.ratio = cfg.at("ratio").get<double>();
  plan.groups = cfg.at("groups").get<int>();
  plan.per_group = cfg.at("per_group").get<int>();
  plan.omerf = omerf_config(cfg, cfg_seed(cfg), 1);
  plan.validate();
  const fs::path dir = prepare_out_dir(cfg.at("out"));
  write_manifest(dir, "benchmark", cfg);

  const auto rows = run_benchmark(plan, cfg_seed(cfg), cfg_threads(cfg));
  write_replication_rows((dir / "replications.csv").string(), rows);
  // Aggregation works from the persisted rows only.
  const auto table = aggregate(read_replication_rows((dir / "replications.csv").string()));
  write_aggregate((dir / "table.csv").string(), table);
  std::size_t failures = 0;
  for (const auto& r : rows) failures += !r.ok;
  out << "benchmark: " << rows.size() << " fits, " << failures << " failed\n";
  for (const auto& r : rows) {
    if (!r.ok) err << "failed: dgp " << r.dgp << " rep " << r.replication << " " << r.model << ": " << r.message << "\n";
  }
  return kExitOk;
}

// Fixed-part predictor of a fitted model on a design matrix.
std::function<Eigen::VectorXd(const Eigen::MatrixXd&)> fixed_part(const LoadedModel& model,
                                                                   OmerfModel* omerf_model,
                                                                   ClmmFit* clmm_fit) {
  if (model.kind == "omerf") {
    return [omerf_model](const Eigen::MatrixXd& x) { return omerf_model->forest.predict(x); };
  }
  return [clmm_fit](const Eigen::MatrixXd& x) -> Eigen::VectorXd { return x * clmm_fit->beta; };
}

int cmd_explain(const json& cfg, std::ostream& out) {
  const LoadedModel model = load_model(cfg.at("model"));
  if (model.kind != "omerf" && model.kind != "clmm") {
    throw ValidationError("explain supports omerf and clmm models, not " + model.kind);
  }
  const int grid_points = cfg.at("grid_points").get<int>();
  const int repeats = cfg.at("repeats").get<int>();
  if (grid_points < 2) throw ValidationError("grid_points must be >= 2");
  if (repeats < 1) throw ValidationError("repeats must be >= 1");
  const Input in = load_input_for_model(model, cfg.at("data"), cfg.at("split"), cfg.at("set"), false);
  const fs::path dir = prepare_out_dir(cfg.at("out"));
  write_manifest(dir, "explain", cfg);

  OmerfModel om;
  ClmmFit cf;
  if (model.kind == "omerf") {
    om = OmerfModel::from_json(model.body);
    cf = om.clmm;
  } else {
    cf = ClmmFit::from_json(model.body);
  }
  const auto f = fixed_part(model, &om, &cf);
  const Eigen::MatrixXd& x = in.data.x;
  const int P = static_cast<int>(x.cols());

  std::vector<double> importance(static_cast<std::size_t>(P), 0.0);
  const bool training_rows = model.kind == "omerf" && static_cast<Eigen::Index>(x.rows()) == om.forest_target.size();
  if (training_rows) {
    importance = permutation_importance(om.forest, x, om.forest_target, repeats, cfg_seed(cfg)).importance;
  } else {
    // Sensitivity form: the unpermuted predictions serve as the target.
    const Eigen::VectorXd base = f(x);
    std::mt19937_64 rng(cfg_seed(cfg));
    std::vector<Eigen::Index> perm(static_cast<std::size_t>(x.rows()));
    Eigen::MatrixXd shuffled = x;
    for (int p = 0; p < P; ++p) {
      double acc = 0.0;
      for (int rep = 0; rep < repeats; ++rep) {
        std::iota(perm.begin(), perm.end(), Eigen::Index{0});
        std::shuffle(perm.begin(), perm.end(), rng);
        for (Eigen::Index r = 0; r < x.rows(); ++r) shuffled(r, p) = x(perm[static_cast<std::size_t>(r)], p);
        acc += (f(shuffled) - base).squaredNorm() / static_cast<double>(x.rows());
      }
      shuffled.col(p) = x.col(p);
      importance[static_cast<std::size_t>(p)] = acc / repeats;
    }
  }
  std::vector<int> order(static_cast<std::size_t>(P));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return importance[static_cast<std::size_t>(a)] > importance[static_cast<std::size_t>(b)];
  });
  std::vector<int> rank(static_cast<std::size_t>(P));
  for (int k = 0; k < P; ++k) rank[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = k + 1;
  {
    auto fo = open_out(dir / "importance.csv");
    fo << "feature,importance,rank\n";
    for (int p = 0; p < P; ++p) {
      fo << csv_quote(in.data.feature_names[static_cast<std::size_t>(p)]) << ','
         << format_double(importance[static_cast<std::size_t>(p)]) << ',' << rank[static_cast<std::size_t>(p)] << '\n';
    }
  }
  {
    auto fo = open_out(dir / "partial_dependence.csv");
    fo << "feature,grid_value,pd_value\n";
    for (int p = 0; p < P; ++p) {
      const std::vector<double> grid = range_grid(x, p, grid_points);
      std::vector<std::pair<double, double>> pd;
      if (model.kind == "omerf") {
        pd = partial_dependence(om.forest, x, p, grid);
      } else {
        Eigen::MatrixXd xg = x;
        for (double g : grid) {
          xg.col(p).setConstant(g);
          pd.emplace_back(g, f(xg).mean());
        }
      }
      for (const auto& [g, v] : pd) {
        fo << csv_quote(in.data.feature_names[static_cast<std::size_t>(p)]) << ',' << format_double(g) << ','
           << format_double(v) << '\n';
      }
    }
  }
  {
    auto fo = open_out(dir / "random_effects.csv");
    fo << "group,effect,estimate,sd,lower,upper\n";
    for (const auto& r : extract_random_effects(cf)) {
      fo << csv_quote(r.group) << ',' << csv_quote(r.effect) << ',' << format_double(r.estimate) << ','
         << format_double(r.sd) << ',' << format_double(r.lower) << ',' << format_double(r.upper) << '\n';
    }
  }
  out << "wrote importance, partial dependence and random effects to " << dir.string() << "\n";
  return kExitOk;
}

}  // namespace

// ---------------------------------------------------------------------------
// Benchmark

void BenchmarkPlan::validate() const {
  if (dgps.empty()) throw ValidationError("benchmark: no DGPs");
  for (int d : dgps) {
    if (d < 1 || d > sim::kNumDgps) throw ValidationError("DGP id must be in 1..10");
  }
  if (replications < 1) throw ValidationError("benchmark: replications must be >= 1");
  if (models.empty()) throw ValidationError("benchmark: no models");
  for (const auto& m : models) {
    if (std::find(kModelKinds.begin(), kModelKinds.end(), m) == kModelKinds.end()) {
      throw ValidationError("benchmark: unknown model '" + m + "'");
    }
  }
  if (!(ratio > 0.0 && ratio < 1.0)) throw ValidationError("benchmark: ratio must be in (0, 1)");
  if (groups < 1 || per_group < 2) throw ValidationError("benchmark: need groups >= 1 and per_group >= 2");
  omerf.validate();
}

std::uint64_t replication_seed(std::uint64_t master, int dgp, int rep) {
  return derive_seed(derive_seed(master, static_cast<std::uint64_t>(dgp)), static_cast<std::uint64_t>(rep));
}

namespace {

ReplicationRow fit_and_score(const std::string& kind, const GroupedOrdinalDataset& train,
                             const GroupedOrdinalDataset& test, const OmerfConfig& ocfg) {
  ReplicationRow row;
  row.model = kind;
  std::vector<int> predicted;
  if (kind == "clm") {
    const ClmFit fit = fit_clm(train, true);
    if (!fit.converged) throw ConvergenceError("clm did not converge");
    predicted = argmax_classes(predict_probs(fit.theta, test.x * fit.beta));
    row.iterations = fit.iterations;
    row.converged = fit.converged;
  } else if (kind == "clmm") {
    const ClmmFit fit = fit_clmm(train, effects_for(train), {}, true);
    const std::vector<int> group = remap_groups(test, fit.group_labels);
    predicted = argmax_classes(predict_probs(fit.theta, linear_predictor(test, group, fit.beta, fit.b_modes, {})));
    row.iterations = fit.iterations;
    row.converged = fit.converged;
  } else if (kind == "omerf") {
    const OmerfModel m = fit_omerf(train, effects_for(train), ocfg);
    predicted = predict_omerf(m, test).classes;
    row.iterations = m.iterations;
    row.converged = m.converged;
  } else {
    const ProbabilityForest pf = ProbabilityForest::fit(train, ocfg.init_forest.value_or(ocfg.forest));
    predicted = pf.predict_class(test.x);
    row.converged = true;
  }
  const metrics::MetricsReport r = metrics::evaluate(test.y, predicted);
  row.ok = true;
  row.accuracy = r.accuracy;
  row.mse = r.mse;
  row.ari = r.ari;
  row.kappa = r.kappa;
  row.kappa_degenerate = r.kappa_degenerate;
  return row;
}

}  // namespace

std::vector<ReplicationRow> run_benchmark(const BenchmarkPlan& plan, std::uint64_t master_seed, int threads) {
  plan.validate();
  const std::size_t reps = static_cast<std::size_t>(plan.replications);
  const std::size_t tasks = plan.dgps.size() * reps;
  std::vector<std::vector<ReplicationRow>> results(tasks);
  parallel_for(tasks, threads, [&](std::size_t t) {
    const int dgp = plan.dgps[t / reps];
    const int rep = static_cast<int>(t % reps);
    const std::uint64_t seed = replication_seed(master_seed, dgp, rep);
    std::vector<ReplicationRow>& out = results[t];
    auto fail_all = [&](const std::string& msg) {
      for (const auto& m : plan.models) {
        ReplicationRow r;
        r.model = m;
        r.message = msg;
        out.push_back(r);
      }
    };
    try {
      sim::DgpSpec spec = sim::scenario(dgp, seed);
      spec.groups = plan.groups;
      spec.per_group = plan.per_group;
      const sim::SimulatedData s = sim::generate(spec, plan.ratio);
      const GroupedOrdinalDataset train = s.data.subset(s.split.train);
      const GroupedOrdinalDataset test = s.data.subset(s.split.test);
      OmerfConfig ocfg = plan.omerf;
      ocfg.threads = 1;
      ocfg.forest.num_threads = 1;
      ocfg.forest.seed = derive_seed(seed, 1);
      if (ocfg.init_forest) {
        ocfg.init_forest->num_threads = 1;
        ocfg.init_forest->seed = derive_seed(seed, 1);
      }
      ocfg.clmm.threads = 1;
      for (const auto& m : plan.models) {
        try {
          out.push_back(fit_and_score(m, train, test, ocfg));
        } catch (const std::exception& e) {
          ReplicationRow r;
          r.model = m;
          r.message = e.what();
          out.push_back(r);
        }
      }
    } catch (const std::exception& e) {
      out.clear();
      fail_all(std::string("simulation failed: ") + e.what());
    }
    for (auto& r : out) {
      r.dgp = dgp;
      r.replication = rep;
    }
  });
  std::vector<ReplicationRow> rows;
  for (auto& v : results) rows.insert(rows.end(), v.begin(), v.end());
  return rows;
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t k = 0; k < line.size(); ++k) {
    const char c = line[k];
    if (quoted) {
      if (c == '"' && k + 1 < line.size() && line[k + 1] == '"') {
        cur += '"';
        ++k;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

namespace {
const char* kRowHeader = "dgp,replication,model,status,accuracy,mse,ari,kappa,kappa_degenerate,iterations,converged,message";
}

void write_replication_rows(const std::string& path, const std::vector<ReplicationRow>& rows) {
  auto f = open_out(path);
  f << kRowHeader << '\n';
  for (const auto& r : rows) {
    const double nan = std::nan("");
    f << r.dgp << ',' << r.replication << ',' << csv_quote(r.model) << ',' << (r.ok ? "ok" : "failed") << ','
      << format_double(r.ok ? r.accuracy : nan) << ',' << format_double(r.ok ? r.mse : nan) << ','
      << format_double(r.ok ? r.ari : nan) << ',' << format_double(r.ok ? r.kappa : nan) << ','
      << (r.kappa_degenerate ? 1 : 0) << ',' << r.iterations << ',' << (r.converged ? 1 : 0) << ','
      << csv_quote(r.message) << '\n';
  }
  if (!f) throw IoError("write failed: " + path);
}

std::vector<ReplicationRow> read_replication_rows(const std::string& path) {
  const auto lines = read_csv_lines(path);
  if (lines.empty() || lines[0] != kRowHeader) throw ValidationError(path + ": unexpected header");
  std::vector<ReplicationRow> rows;
  for (std::size_t k = 1; k < lines.size(); ++k) {
    const auto f = split_csv_line(lines[k]);
    const std::string where = path + " line " + std::to_string(k + 1);
    if (f.size() != 12) throw ValidationError(where + ": expected 12 fields");
    ReplicationRow r;
    r.dgp = static_cast<int>(parse_long(f[0], where));
    r.replication = static_cast<int>(parse_long(f[1], where));
    r.model = f[2];
    r.ok = f[3] == "ok";
    r.accuracy = parse_double(f[4], where);
    r.mse = parse_double(f[5], where);
    r.ari = parse_double(f[6], where);
    r.kappa = parse_double(f[7], where);
    r.kappa_degenerate = f[8] == "1";
    r.iterations = static_cast<int>(parse_long(f[9], where));
    r.converged = f[10] == "1";
    r.message = f[11];
    rows.push_back(r);
  }
  return rows;
}

std::vector<AggregateRow> aggregate(const std::vector<ReplicationRow>& rows) {
  std::vector<std::pair<int, std::string>> keys;
  std::map<std::pair<int, std::string>, std::vector<const ReplicationRow*>> groups;
  for (const auto& r : rows) {
    const auto key = std::make_pair(r.dgp, r.model);
    if (!groups.count(key)) keys.push_back(key);
    groups[key].push_back(&r);
  }
  std::vector<AggregateRow> out;
  for (const auto& key : keys) {
    const auto& members = groups[key];
    std::size_t failures = 0;
    for (const auto* r : members) failures += !r->ok;
    for (const auto& metric : metrics::kMetricNames) {
      std::vector<double> values;
      for (const auto* r : members) {
        if (!r->ok) continue;
        metrics::MetricsReport rep;
        rep.accuracy = r->accuracy;
        rep.mse = r->mse;
        rep.ari = r->ari;
        rep.kappa = r->kappa;
        values.push_back(metrics::metric_value(rep, metric));
      }
      const metrics::Summary s = metrics::summarize(values);
      AggregateRow a;
      a.dgp = key.first;
      a.model = key.second;
      a.metric = metric;
      a.n = s.n;
      a.failures = failures;
      a.mean = s.n ? s.mean : std::nan("");
      a.variance = s.n ? s.variance : std::nan("");
      out.push_back(a);
    }
  }
  return out;
}

void write_aggregate(const std::string& path, const std::vector<AggregateRow>& rows) {
  auto f = open_out(path);
  f << "dgp,model,metric,mean,variance,n,failures\n";
  for (const auto& a : rows) {
    f << a.dgp << ',' << csv_quote(a.model) << ',' << a.metric << ',' << format_double(a.mean) << ','
      << format_double(a.variance) << ',' << a.n << ',' << a.failures << '\n';
  }
  if (!f) throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Entry point

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Ordinal mixed-effects random forest toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "JSON config file (flags override it)");
  std::uint64_t seed = 0;
  std::string out_dir;
  int threads = 1;
  auto* o_seed = app.add_option("--seed", seed, "Master seed");
  auto* o_out = app.add_option("--out", out_dir, "Output directory");
  auto* o_threads = app.add_option("--threads", threads, "Worker threads (results do not depend on it)");

  // Per-command flag storage; only flags actually given enter the config.
  std::map<std::string, std::string> strings;
  std::map<std::string, double> numbers;
  std::vector<std::pair<CLI::Option*, std::function<void(json&)>>> setters;
  auto str_flag = [&](CLI::App* sub, const std::string& flag, const std::string& key, const std::string& help) {
    auto* o = sub->add_option(flag, strings[key], help);
    setters.emplace_back(o, [&strings, key](json& j) { j[key] = strings[key]; });
  };
  auto int_flag = [&](CLI::App* sub, const std::string& flag, const std::string& key, const std::string& help) {
    auto* o = sub->add_option(flag, numbers[key], help);
    setters.emplace_back(o, [&numbers, key](json& j) {
      const double v = numbers[key];
      if (v != std::floor(v)) throw ValidationError(key + " must be an integer");
      j[key] = static_cast<long>(v);
    });
  };
  auto num_flag = [&](CLI::App* sub, const std::string& flag, const std::string& key, const std::string& help) {
    auto* o = sub->add_option(flag, numbers[key], help);
    setters.emplace_back(o, [&numbers, key](json& j) { j[key] = numbers[key]; });
  };

  auto* simulate = app.add_subcommand("simulate", "Simulate one scenario with its split");
  int_flag(simulate, "--dgp", "dgp", "Scenario 1..10");
  num_flag(simulate, "--ratio", "ratio", "Training fraction per group");
  int_flag(simulate, "--groups", "groups", "Number of groups");
  int_flag(simulate, "--per-group", "per_group", "Rows per group");

  auto* fit = app.add_subcommand("fit", "Fit clm, clmm, omerf or ordforest-init");
  str_flag(fit, "--model", "model", "Model kind");
  str_flag(fit, "--data", "data", "Data CSV");
  str_flag(fit, "--schema", "schema", "Schema JSON");
  str_flag(fit, "--split", "split", "Split CSV (row_id,set)");
  str_flag(fit, "--set", "set", "Rows used: train, test or all");

  auto* predict = app.add_subcommand("predict", "Class probabilities for new rows");
  str_flag(predict, "--model", "model", "Model JSON");
  str_flag(predict, "--data", "data", "Data CSV");
  str_flag(predict, "--split", "split", "Split CSV (row_id,set)");
  str_flag(predict, "--set", "set", "Rows used: train, test or all");

  auto* evaluate = app.add_subcommand("evaluate", "Metrics of a model or a predictions file");
  str_flag(evaluate, "--model", "model", "Model JSON");
  str_flag(evaluate, "--predictions", "predictions", "Predictions CSV");
  str_flag(evaluate, "--data", "data", "Data CSV with labels");
  str_flag(evaluate, "--schema", "schema", "Schema JSON (with --predictions)");
  str_flag(evaluate, "--split", "split", "Split CSV (row_id,set)");
  str_flag(evaluate, "--set", "set", "Rows used: train, test or all");

  auto* benchmark = app.add_subcommand("benchmark", "Replicated simulation benchmark");
  str_flag(benchmark, "--dgps", "dgps", "Comma-separated scenario ids");
  int_flag(benchmark, "--replications", "replications", "Replications per scenario");
  str_flag(benchmark, "--models", "models", "Comma-separated model kinds");
  num_flag(benchmark, "--ratio", "ratio", "Training fraction per group");
  int_flag(benchmark, "--groups", "groups", "Number of groups");
  int_flag(benchmark, "--per-group", "per_group", "Rows per group");

  auto* explain = app.add_subcommand("explain", "Importance, partial dependence and random effects");
  str_flag(explain, "--model", "model", "Model JSON (omerf or clmm)");
  str_flag(explain, "--data", "data", "Data CSV");
  str_flag(explain, "--split", "split", "Split CSV (row_id,set)");
  str_flag(explain, "--set", "set", "Rows used: train, test or all");
  int_flag(explain, "--grid-points", "grid_points", "Partial dependence grid size");
  int_flag(explain, "--repeats", "repeats", "Permutations per feature");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (o_seed->count()) g.seed = seed;
    if (o_out->count()) g.out = out_dir;
    if (o_threads->count()) g.threads = threads;
    json flags = global_flags(g);
    for (auto& [opt, set] : setters) {
      if (opt->count()) set(flags);
    }
    CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    json defaults = common_defaults();
    const json omerf_defaults = OmerfConfig{}.to_json();
    if (name == "simulate") {
      defaults.update({{"dgp", 1}, {"ratio", 0.8}, {"groups", 10}, {"per_group", 100}});
      if (!flags.contains("dgp") && g.config.empty()) throw ValidationError("simulate: --dgp is required");
    } else if (name == "fit") {
      defaults.update({{"model", "omerf"}, {"data", ""}, {"schema", ""}, {"split", ""}, {"set", "train"},
                       {"omerf", omerf_defaults}});
    } else if (name == "predict") {
      defaults.update({{"model", ""}, {"data", ""}, {"split", ""}, {"set", "test"}});
    } else if (name == "evaluate") {
      defaults.update({{"model", ""}, {"predictions", ""}, {"data", ""}, {"schema", ""}, {"split", ""},
                       {"set", "test"}});
    } else if (name == "benchmark") {
      defaults.update({{"dgps", json::array({1})},
                       {"replications", 20},
                       {"models", kModelKinds},
                       {"ratio", 0.8},
                       {"groups", 10},
                       {"per_group", 100},
                       {"omerf", omerf_defaults}});
      if (flags.contains("dgps")) flags["dgps"] = parse_int_list(flags["dgps"].get<std::string>());
      if (flags.contains("models")) flags["models"] = parse_string_list(flags["models"].get<std::string>());
    } else if (name == "explain") {
      defaults.update({{"model", ""}, {"data", ""}, {"split", ""}, {"set", "train"}, {"grid_points", 20},
                       {"repeats", 5}});
    }
    const json cfg = resolve_config(name, defaults, g.config, flags);
    cfg_threads(cfg);
    if (name == "simulate") return cmd_simulate(cfg, out);
    if (name == "fit") return cmd_fit(cfg, out, err);
    if (name == "predict") return cmd_predict(cfg, out);
    if (name == "evaluate") return cmd_evaluate(cfg, out);
    if (name == "benchmark") return cmd_benchmark(cfg, out, err);
    return cmd_explain(cfg, out);
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ConvergenceError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConvergence;
  } catch (const nlohmann::json::exception& e) {
    err << "error: invalid config or model value: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int k = 1; k < argc; ++k) args.emplace_back(argv[k]);
  return run(args, std::cout, std::cerr);
}

}  // namespace omerf::cli
