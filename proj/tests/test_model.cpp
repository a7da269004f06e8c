#include "doctest.h"

#include "omerf/cli.hpp"
#include "omerf/model.hpp"
#include "omerf/sim.hpp"

#include <cmath>

using namespace omerf;
using doctest::Approx;

namespace {

OmerfConfig small_config(std::uint64_t seed, int trees = 100) {
  OmerfConfig cfg;
  cfg.forest.num_trees = trees;
  cfg.forest.seed = seed;
  return cfg;
}

// Model with a forest that predicts 0 everywhere and the given thresholds.
OmerfModel constant_model(const std::vector<double>& theta, const Eigen::MatrixXd& b) {
  OmerfModel m;
  const Eigen::MatrixXd x = Eigen::MatrixXd::Random(20, 2);
  ForestConfig fc;
  fc.num_trees = 3;
  m.forest = fit_forest(x, Eigen::VectorXd::Zero(20), fc);
  m.clmm.theta = ThresholdVector(theta);
  m.clmm.b_modes = b;
  m.clmm.sigma2 = Eigen::VectorXd::Ones(b.cols());
  return m;
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("latent initialisation from cumulative probabilities") {
    const ThresholdVector theta0({-0.693, 0.693});
    const std::vector<double> gamma{0.9, 0.99};
    CHECK(latent_from_cumulative(theta0, gamma) == Approx(-3.396).epsilon(1e-3 / 3.396));

    // Rows that output the marginal class frequencies give eta0 = 0.
    const std::vector<int> y{1, 1, 2, 3, 3, 3};
    Eigen::MatrixXd probs(6, 3);
    for (int r = 0; r < 6; ++r) probs.row(r) << 2.0 / 6, 1.0 / 6, 3.0 / 6;
    const LatentInit init = latent_from_class_probs(probs, y, 3);
    CHECK(init.eta0.cwiseAbs().maxCoeff() < 1e-12);

    // Stochastically higher classes give higher scores.
    Eigen::MatrixXd skew(2, 3);
    skew << 0.7, 0.2, 0.1, 0.1, 0.2, 0.7;
    const LatentInit s = latent_from_class_probs(skew, y, 3);
    CHECK(s.eta0[1] > s.eta0[0]);

    const sim::SimulatedData d = sim::generate(sim::scenario(1, 3));
    GroupedOrdinalDataset data = d.data;
    data.x.row(1) = data.x.row(0);
    ForestConfig fc;
    fc.num_trees = 50;
    const LatentInit a = init_latent(data, fc, false);
    CHECK(a.eta0[0] == a.eta0[1]);
  }

  TEST_CASE("relative change statistic") {
    Eigen::MatrixXd prev(2, 1), cur(2, 1);
    prev << 0.0, 2.0;
    cur << 0.5, 2.1;
    const double tr = relative_change(cur, prev, 1e-4);
    CHECK(std::isfinite(tr));
    CHECK(tr == Approx(0.5 / 1e-4));
    prev << -1.0, 2.0;
    cur << -1.5, 2.0;
    CHECK(relative_change(cur, prev, 1e-4) == Approx(0.5));
    CHECK_THROWS_AS(relative_change(cur, Eigen::MatrixXd::Zero(3, 1), 1e-4), ValidationError);
  }

  TEST_CASE("prediction for an unseen group") {
    const OmerfModel m = constant_model({-1.0, 1.0}, Eigen::MatrixXd::Constant(1, 1, 3.0));
    const Eigen::MatrixXd x = Eigen::MatrixXd::Zero(1, 2);
    const std::vector<int> group{-1};
    const OrdinalPrediction p = predict_omerf(m, x, Eigen::MatrixXd::Ones(1, 1), group);
    CHECK(p.probs(0, 0) == Approx(0.26894).epsilon(1e-4));
    CHECK(p.probs(0, 1) == Approx(0.46212).epsilon(1e-4));
    CHECK(p.probs(0, 2) == Approx(0.26894).epsilon(1e-4));
    CHECK(p.classes[0] == 2);
  }

  TEST_CASE("probabilities shift upward as the random effect grows") {
    const Eigen::MatrixXd x = Eigen::MatrixXd::Zero(1, 2);
    const std::vector<int> group{0};
    Eigen::RowVectorXd prev_cum = Eigen::RowVectorXd::Constant(2, 2.0);
    int prev_class = 1;
    for (double b = -4.0; b <= 4.0; b += 0.5) {
      const OmerfModel m = constant_model({-1.0, 1.0}, Eigen::MatrixXd::Constant(1, 1, b));
      const OrdinalPrediction p = predict_omerf(m, x, Eigen::MatrixXd::Ones(1, 1), group);
      const Eigen::RowVectorXd cum{{p.probs(0, 0), p.probs(0, 0) + p.probs(0, 1)}};
      CHECK(cum[0] < prev_cum[0]);
      CHECK(cum[1] < prev_cum[1]);
      CHECK(p.classes[0] >= prev_class);
      prev_cum = cum;
      prev_class = p.classes[0];
    }
    CHECK(prev_class == 3);
  }

  TEST_CASE("identifiability shift leaves predictions unchanged") {
    const Eigen::VectorXd lambda = Eigen::VectorXd::LinSpaced(25, -4.0, 4.0);
    const ThresholdVector theta({-0.7, 0.4, 1.9});
    const double delta = 1.37;
    const ThresholdVector shifted({-0.7 + delta, 0.4 + delta, 1.9 + delta});
    const Eigen::MatrixXd a = predict_probs(theta, lambda);
    const Eigen::MatrixXd b = predict_probs(shifted, (lambda.array() + delta).matrix());
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-10);
    CHECK(argmax_classes(a) == argmax_classes(b));
  }

  TEST_CASE("no group effect gives small random effects" * doctest::timeout(300)) {
    for (std::uint64_t s = 0; s < 5; ++s) {
      sim::DgpSpec spec = sim::scenario(1, derive_seed(900, s));
      spec.sigma2_intercept = 0.0;
      const sim::SimulatedData d = sim::generate(spec);
      const OmerfModel m = fit_omerf(d.data, RandomEffectsSpec{0}, small_config(derive_seed(901, s)));
      INFO("seed " << s << " sigma2 " << m.clmm.sigma2[0] << " iterations " << m.iterations);
      CHECK(m.converged);
      CHECK(m.clmm.b_modes.cwiseAbs().maxCoeff() < 0.2);
      CHECK(m.clmm.sigma2[0] < 0.1);
      for (const auto& row : extract_random_effects(m)) {
        CHECK(row.lower <= 0.0);
        CHECK(row.upper >= 0.0);
      }
    }
  }

  TEST_CASE("warm start at the fixed point stops at once" * doctest::timeout(300)) {
    const sim::SimulatedData d = sim::generate(sim::scenario(3, 21));
    const OmerfConfig cfg = small_config(5, 200);
    const OmerfModel m = fit_omerf(d.data, RandomEffectsSpec{0}, cfg);
    REQUIRE(m.converged);
    const OmerfModel again = fit_omerf(d.data, RandomEffectsSpec{0}, cfg, m.clmm.b_modes);
    INFO("first trace entry " << again.trace.front());
    CHECK(again.iterations == 1);
    CHECK(again.trace.front() < cfg.toll);
    // Restarting from the effects that fed the last iteration replays it, up
    // to the optimiser tolerance (the CLMM warm starts differ).
    if (m.iterations >= 2) {
      OmerfConfig stop = cfg;
      stop.itmax = m.iterations - 1;
      const OmerfModel before = fit_omerf(d.data, RandomEffectsSpec{0}, stop);
      const OmerfModel replay = fit_omerf(d.data, RandomEffectsSpec{0}, cfg, before.clmm.b_modes);
      CHECK(replay.trace.front() == Approx(m.trace.back()).epsilon(0.01));
      CHECK((replay.clmm.b_modes - m.clmm.b_modes).cwiseAbs().maxCoeff() < 1e-3);
    }
    CHECK_THROWS_AS(fit_omerf(d.data, RandomEffectsSpec{0}, cfg, Eigen::MatrixXd::Zero(3, 1)), ValidationError);
  }

  TEST_CASE("trace and predictions are reproducible across thread counts" * doctest::timeout(300)) {
    const sim::SimulatedData d = sim::generate(sim::scenario(5, 8));
    OmerfConfig one = small_config(3);
    OmerfConfig four = one;
    four.threads = 4;
    const OmerfModel a = fit_omerf(d.data, RandomEffectsSpec{1}, one);
    const OmerfModel b = fit_omerf(d.data, RandomEffectsSpec{1}, four);
    CHECK(a.trace == b.trace);
    CHECK(a.clmm.b_modes == b.clmm.b_modes);
    const auto pa = predict_omerf(a, d.data);
    CHECK(pa.probs == predict_omerf(b, d.data).probs);
    CHECK(pa.probs == predict_omerf(a, d.data).probs);
    for (Eigen::Index r = 0; r < pa.probs.rows(); ++r) CHECK(pa.probs.row(r).sum() == Approx(1.0));
  }

  TEST_CASE("serialisation round trip") {
    const sim::SimulatedData d = sim::generate(sim::scenario(1, 30));
    const OmerfModel m = fit_omerf(d.data, RandomEffectsSpec{0}, small_config(2, 30));
    const OmerfModel back = OmerfModel::from_json(nlohmann::json::parse(m.to_json().dump()));
    CHECK(predict_omerf(back, d.data).probs == predict_omerf(m, d.data).probs);
    CHECK(back.trace == m.trace);
    CHECK(back.config.to_json() == m.config.to_json());
  }

  TEST_CASE("random-effect table") {
    ClmmFit fit;
    fit.b_modes.resize(2, 2);
    fit.b_modes << 0.5, -0.1, -0.2, 0.3;
    fit.b_sd = Eigen::MatrixXd::Constant(2, 2, 0.1);
    fit.sigma2 = Eigen::VectorXd::Ones(2);
    fit.group_labels = {"b", "a"};
    fit.slope_names = {"x1"};
    const auto rows = extract_random_effects(fit);
    REQUIRE(rows.size() == 4);
    CHECK(rows[0].group == "a");
    CHECK(rows[0].effect == "(Intercept)");
    CHECK(rows[0].estimate == -0.2);
    CHECK(rows[1].effect == "x1");
    CHECK(rows[2].group == "b");
    CHECK(rows[2].lower == Approx(0.5 - 1.96 * 0.1));
    CHECK(rows[2].upper == Approx(0.5 + 1.96 * 0.1));
  }

  TEST_CASE("scenario 1 converges before itmax" * doctest::timeout(900)) {
    int converged = 0;
    for (int rep = 0; rep < 20; ++rep) {
      const std::uint64_t seed = cli::replication_seed(3, 1, rep);
      const sim::SimulatedData d = sim::generate(sim::scenario(1, seed));
      OmerfConfig cfg;
      cfg.forest.seed = seed;
      cfg.threads = 4;
      const OmerfModel m = fit_omerf(d.data.subset(d.split.train), RandomEffectsSpec{0}, cfg);
      converged += m.converged;
    }
    CHECK(converged >= 18);
  }
}
