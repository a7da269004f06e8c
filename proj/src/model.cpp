#include "omerf/model.hpp"

#include <algorithm>
#include <cmath>

namespace omerf {

void OmerfConfig::validate() const {
  if (!(toll > 0.0)) throw ValidationError("omerf: toll must be > 0");
  if (itmax < 1) throw ValidationError("omerf: itmax must be >= 1");
  if (!(denominator_floor > 0.0)) throw ValidationError("omerf: denominator_floor must be > 0");
}

nlohmann::json OmerfConfig::to_json() const {
  nlohmann::json j = {{"toll", toll},
                      {"itmax", itmax},
                      {"forest", forest.to_json()},
                      {"denominator_floor", denominator_floor},
                      {"offset_source", offset_source == OffsetSource::InSample ? "in_sample" : "oob"},
                      {"init_out_of_bag", init_out_of_bag},
                      {"clmm_gradient_tolerance", clmm.gradient_tolerance},
                      {"clmm_max_outer_iterations", clmm.max_outer_iterations}};
  if (init_forest) j["init_forest"] = init_forest->to_json();
  return j;
}

OmerfConfig OmerfConfig::from_json(const nlohmann::json& j) {
  OmerfConfig c;
  c.toll = j.value("toll", c.toll);
  c.itmax = j.value("itmax", c.itmax);
  if (j.contains("forest")) c.forest = ForestConfig::from_json(j.at("forest"));
  if (j.contains("init_forest")) c.init_forest = ForestConfig::from_json(j.at("init_forest"));
  c.denominator_floor = j.value("denominator_floor", c.denominator_floor);
  const std::string src = j.value("offset_source", std::string("oob"));
  if (src != "in_sample" && src != "oob") throw ValidationError("offset_source must be in_sample or oob");
  c.offset_source = src == "oob" ? OffsetSource::OutOfBag : OffsetSource::InSample;
  c.init_out_of_bag = j.value("init_out_of_bag", c.init_out_of_bag);
  c.threads = j.value("threads", c.threads);
  c.clmm.gradient_tolerance = j.value("clmm_gradient_tolerance", c.clmm.gradient_tolerance);
  c.clmm.max_outer_iterations = j.value("clmm_max_outer_iterations", c.clmm.max_outer_iterations);
  return c;
}

// ---------------------------------------------------------------------------
// Initializer

Eigen::RowVectorXd normalize_class_probs(const Eigen::Ref<const Eigen::RowVectorXd>& raw) {
  Eigen::RowVectorXd p(raw.size());
  for (Eigen::Index c = 0; c < raw.size(); ++c) p[c] = clamp_prob(raw[c]);
  return p / p.sum();
}

ProbabilityForest ProbabilityForest::fit(const GroupedOrdinalDataset& data, const ForestConfig& config) {
  if (!data.has_labels()) throw ValidationError("initializer needs labels");
  ProbabilityForest pf;
  const int C = data.num_categories;
  for (int c = 1; c <= C; ++c) {
    Eigen::VectorXd indicator(static_cast<Eigen::Index>(data.rows()));
    for (std::size_t r = 0; r < data.rows(); ++r) indicator[static_cast<Eigen::Index>(r)] = data.y[r] == c ? 1.0 : 0.0;
    ForestConfig fc = config;
    fc.seed = derive_seed(config.seed, 7000 + static_cast<std::uint64_t>(c));
    pf.class_forests_.push_back(fit_forest(data.x, indicator, fc));
  }
  return pf;
}

Eigen::MatrixXd ProbabilityForest::predict(const Eigen::MatrixXd& x) const {
  Eigen::MatrixXd raw(x.rows(), num_categories());
  for (int c = 0; c < num_categories(); ++c) raw.col(c) = class_forests_[static_cast<std::size_t>(c)].predict(x);
  for (Eigen::Index r = 0; r < raw.rows(); ++r) raw.row(r) = normalize_class_probs(raw.row(r));
  return raw;
}

Eigen::MatrixXd ProbabilityForest::predict_oob(const Eigen::MatrixXd& x_train) const {
  Eigen::MatrixXd raw(x_train.rows(), num_categories());
  for (int c = 0; c < num_categories(); ++c) {
    const auto& f = class_forests_[static_cast<std::size_t>(c)];
    const OobPrediction oob = oob_predict(f, x_train);
    for (Eigen::Index r = 0; r < x_train.rows(); ++r) {
      raw(r, c) = oob.covered[static_cast<std::size_t>(r)] ? oob.values[r] : f.predict_row(x_train, r);
    }
  }
  for (Eigen::Index r = 0; r < raw.rows(); ++r) raw.row(r) = normalize_class_probs(raw.row(r));
  return raw;
}

std::vector<int> ProbabilityForest::predict_class(const Eigen::MatrixXd& x) const {
  return argmax_classes(predict(x));
}

nlohmann::json ProbabilityForest::to_json() const {
  nlohmann::json forests = nlohmann::json::array();
  for (const auto& f : class_forests_) forests.push_back(f.to_json());
  return {{"class_forests", std::move(forests)}};
}

ProbabilityForest ProbabilityForest::from_json(const nlohmann::json& j) {
  ProbabilityForest pf;
  for (const auto& f : j.at("class_forests")) pf.class_forests_.push_back(RandomForest::from_json(f));
  return pf;
}

double latent_from_cumulative(const ThresholdVector& theta0, std::span<const double> gamma) {
  if (gamma.size() != theta0.size()) throw ValidationError("cumulative probability length differs from thresholds");
  double s = 0.0;
  for (std::size_t c = 0; c < gamma.size(); ++c) s += theta0[c] - logit(clamp_prob(gamma[c]));
  return s / static_cast<double>(gamma.size());
}

LatentInit latent_from_class_probs(const Eigen::MatrixXd& class_probs, const std::vector<int>& y,
                                   int num_categories) {
  if (class_probs.cols() != num_categories) throw ValidationError("class probability width differs from C");
  LatentInit out;
  out.theta0 = empirical_thresholds(y, num_categories);
  out.class_probs = class_probs;
  out.eta0.resize(class_probs.rows());
  std::vector<double> gamma(static_cast<std::size_t>(num_categories - 1));
  for (Eigen::Index r = 0; r < class_probs.rows(); ++r) {
    double cum = 0.0;
    for (int c = 0; c < num_categories - 1; ++c) {
      cum += class_probs(r, c);
      gamma[static_cast<std::size_t>(c)] = cum;
    }
    out.eta0[r] = latent_from_cumulative(out.theta0, gamma);
  }
  return out;
}

LatentInit init_latent(const GroupedOrdinalDataset& data, const ForestConfig& forest_config, bool out_of_bag) {
  if (!data.has_labels() || data.observed_categories() < 2) {
    throw ValidationError("response has fewer than 2 observed categories");
  }
  const ProbabilityForest pf = ProbabilityForest::fit(data, forest_config);
  const Eigen::MatrixXd probs = out_of_bag && forest_config.bootstrap ? pf.predict_oob(data.x) : pf.predict(data.x);
  return latent_from_class_probs(probs, data.y, data.num_categories);
}

// ---------------------------------------------------------------------------
// Fit loop

double relative_change(const Eigen::MatrixXd& b, const Eigen::MatrixXd& b_prev, double floor) {
  if (b.rows() != b_prev.rows() || b.cols() != b_prev.cols()) throw ValidationError("random-effect shapes differ");
  if (b.size() == 0) return 0.0;
  Eigen::Index r = 0, c = 0;
  const double m = (b - b_prev).cwiseAbs().maxCoeff(&r, &c);
  return m / std::max(std::abs(b_prev(r, c)), floor);
}

namespace {

Eigen::VectorXd random_part(const GroupedOrdinalDataset& data, const Eigen::MatrixXd& b) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(data.rows()));
  const Eigen::Index K = b.cols();
  for (std::size_t r = 0; r < data.rows(); ++r) {
    const auto ri = static_cast<Eigen::Index>(r);
    out[ri] = data.z.row(ri).head(K).dot(b.row(data.group[r]));
  }
  return out;
}

}  // namespace

OmerfModel fit_omerf(const GroupedOrdinalDataset& data, const RandomEffectsSpec& spec,
                     const OmerfConfig& config, const std::optional<Eigen::MatrixXd>& b_start) {
  config.validate();
  data.validate();
  if (!data.has_labels() || data.observed_categories() < 2) {
    throw ValidationError("response has fewer than 2 observed categories");
  }
  const int K = spec.num_effects();
  if (K > data.z.cols()) throw ValidationError("random-effects spec asks for more slopes than the data provides");

  OmerfModel model;
  model.config = config;
  model.spec = spec;

  ForestConfig init_cfg = config.init_forest.value_or(config.forest);
  init_cfg.num_threads = config.threads;
  const LatentInit init = init_latent(data, init_cfg, config.init_out_of_bag);
  model.eta0 = init.eta0;
  model.theta0 = init.theta0;

  Eigen::MatrixXd b_prev = Eigen::MatrixXd::Zero(data.num_groups(), K);
  if (b_start) {
    if (b_start->rows() != b_prev.rows() || b_start->cols() != K) {
      throw ValidationError("warm-start random effects have the wrong shape");
    }
    b_prev = *b_start;
  }

  ClmmOptions clmm_opt = config.clmm;
  clmm_opt.threads = config.threads;

  for (int it = 1; it <= config.itmax; ++it) {
    const Eigen::VectorXd target = model.eta0 + random_part(data, b_prev);
    // Same bootstrap draws every iteration, so the update is a fixed map of b.
    ForestConfig fc = config.forest;
    fc.num_threads = config.threads;
    RandomForest forest = fit_forest(data.x, target, fc);

    Eigen::VectorXd offset = forest.predict(data.x);
    if (config.offset_source == OffsetSource::OutOfBag && forest.has_oob()) {
      const OobPrediction oob = oob_predict(forest, data.x);
      for (Eigen::Index r = 0; r < offset.size(); ++r) {
        if (oob.covered[static_cast<std::size_t>(r)]) offset[r] = oob.values[r];
      }
    }

    ClmmFit clmm;
    try {
      clmm = fit_clmm(data, spec, offset, false, clmm_opt);
    } catch (const ClmmConvergenceError& e) {
      throw ConvergenceError("OMERF iteration " + std::to_string(it) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError("OMERF iteration " + std::to_string(it) + ": " + e.what());
    }
    clmm_opt.warm_theta = clmm.theta;
    Eigen::VectorXd ls(K);
    for (int k = 0; k < K; ++k) ls[k] = clmm.sigma2[k] > 0.0 ? 0.5 * std::log(clmm.sigma2[k]) : kLogSdFloor;
    clmm_opt.warm_log_sd = ls;

    const double tr = relative_change(clmm.b_modes, b_prev, config.denominator_floor);
    model.trace.push_back(tr);
    model.iterations = it;
    model.forest = std::move(forest);
    model.forest_target = target;
    model.clmm = std::move(clmm);
    b_prev = model.clmm.b_modes;
    if (tr < config.toll) {
      model.converged = true;
      break;
    }
  }
  if (!model.converged) {
    model.warnings.push_back("OMERF reached itmax = " + std::to_string(config.itmax) + " without convergence");
  }
  return model;
}

// ---------------------------------------------------------------------------
// Prediction

std::vector<int> argmax_classes(const Eigen::MatrixXd& probs) {
  std::vector<int> out(static_cast<std::size_t>(probs.rows()));
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < probs.cols(); ++c) {
      if (probs(r, c) > probs(r, best)) best = c;
    }
    out[static_cast<std::size_t>(r)] = static_cast<int>(best) + 1;
  }
  return out;
}

OrdinalPrediction predict_omerf(const OmerfModel& model, const Eigen::MatrixXd& x, const Eigen::MatrixXd& z,
                                std::span<const int> group) {
  if (x.cols() != model.forest.num_features()) {
    throw ValidationError("feature mismatch: model expects " + std::to_string(model.forest.num_features()) +
                          " covariates, got " + std::to_string(x.cols()));
  }
  const Eigen::MatrixXd& b = model.clmm.b_modes;
  const Eigen::Index K = b.cols();
  if (z.cols() < K || z.rows() != x.rows() || static_cast<Eigen::Index>(group.size()) != x.rows()) {
    throw ValidationError("random-effect design does not match the model");
  }
  OrdinalPrediction out;
  out.latent = model.forest.predict(x);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const int g = group[static_cast<std::size_t>(r)];
    if (g >= 0) out.latent[r] += z.row(r).head(K).dot(b.row(g));
  }
  out.probs = predict_probs(model.clmm.theta, out.latent);
  out.classes = argmax_classes(out.probs);
  return out;
}

OrdinalPrediction predict_omerf(const OmerfModel& model, const GroupedOrdinalDataset& data) {
  const std::vector<int> group = remap_groups(data, model.clmm.group_labels);
  return predict_omerf(model, data.x, data.z, group);
}

std::vector<RandomEffectRow> extract_random_effects(const ClmmFit& fit) {
  std::vector<RandomEffectRow> rows;
  for (Eigen::Index i = 0; i < fit.b_modes.rows(); ++i) {
    for (Eigen::Index k = 0; k < fit.b_modes.cols(); ++k) {
      RandomEffectRow row;
      row.group = fit.group_labels.at(static_cast<std::size_t>(i));
      row.effect = k == 0 ? "(Intercept)" : fit.slope_names.at(static_cast<std::size_t>(k - 1));
      row.estimate = fit.b_modes(i, k);
      row.sd = fit.b_sd(i, k);
      row.lower = row.estimate - 1.96 * row.sd;
      row.upper = row.estimate + 1.96 * row.sd;
      rows.push_back(std::move(row));
    }
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const RandomEffectRow& a, const RandomEffectRow& b) { return a.group < b.group; });
  return rows;
}

// ---------------------------------------------------------------------------
// JSON

namespace {

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

Eigen::VectorXd to_eigen(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

nlohmann::json OmerfModel::to_json() const {
  return {{"config", config.to_json()},
          {"q_slopes", spec.q_slopes},
          {"forest", forest.to_json()},
          {"clmm", clmm.to_json()},
          {"eta0", to_std(eta0)},
          {"theta0", theta0.values()},
          {"forest_target", to_std(forest_target)},
          {"trace", trace},
          {"converged", converged},
          {"iterations", iterations},
          {"warnings", warnings}};
}

OmerfModel OmerfModel::from_json(const nlohmann::json& j) {
  OmerfModel m;
  m.config = OmerfConfig::from_json(j.at("config"));
  m.spec.q_slopes = j.value("q_slopes", 0);
  m.forest = RandomForest::from_json(j.at("forest"));
  m.clmm = ClmmFit::from_json(j.at("clmm"));
  m.eta0 = to_eigen(j.at("eta0").get<std::vector<double>>());
  m.theta0 = ThresholdVector(j.at("theta0").get<std::vector<double>>());
  m.forest_target = to_eigen(j.value("forest_target", std::vector<double>{}));
  m.trace = j.at("trace").get<std::vector<double>>();
  m.converged = j.at("converged").get<bool>();
  m.iterations = j.at("iterations").get<int>();
  m.warnings = j.value("warnings", std::vector<std::string>{});
  return m;
}

}  // namespace omerf
