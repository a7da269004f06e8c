#include "doctest.h"

#include "oracles.hpp"

#include "omerf/clmm.hpp"
#include "omerf/sim.hpp"

#include <random>

using namespace omerf;
using doctest::Approx;

namespace {

GroupedOrdinalDataset make_data(const std::vector<int>& y, const std::vector<int>& group, int C,
                                Eigen::MatrixXd x = {}) {
  GroupedOrdinalDataset d;
  const auto J = static_cast<Eigen::Index>(y.size());
  d.x = x.size() ? x : Eigen::MatrixXd(J, 0);
  d.z = Eigen::MatrixXd::Ones(J, 1);
  d.y = y;
  d.group = group;
  d.num_categories = C;
  int I = 0;
  for (int g : group) I = std::max(I, g + 1);
  for (int i = 0; i < I; ++i) d.group_labels.push_back("g" + std::to_string(i));
  for (Eigen::Index p = 0; p < d.x.cols(); ++p) d.feature_names.push_back("x" + std::to_string(p + 1));
  d.validate();
  return d;
}

double bisect(const std::function<double(double)>& f, double lo, double hi) {
  for (int k = 0; k < 200; ++k) {
    const double mid = 0.5 * (lo + hi);
    ((f(lo) < 0) == (f(mid) < 0) ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

sim::SimulatedData linear_data(double sigma2, int groups, int per_group, std::uint64_t seed) {
  sim::DgpSpec spec = sim::scenario(9, seed);
  spec.sigma2_intercept = sigma2;
  spec.groups = groups;
  spec.per_group = per_group;
  return sim::generate(spec);
}

}  // namespace

TEST_SUITE("clmm") {
  TEST_CASE("conditional log-likelihood values") {
    const Eigen::MatrixXd b0 = Eigen::MatrixXd::Zero(1, 1);
    const auto bin = make_data({2}, {0}, 2);
    CHECK(conditional_loglik(ThresholdVector({0.0}), {}, b0, bin, {}) == Approx(std::log(0.5)));
    const auto three = make_data({3}, {0}, 3);
    CHECK(conditional_loglik(ThresholdVector({-1.0, 1.0}), {}, b0, three, {}) ==
          Approx(std::log(0.26894)).epsilon(1e-4));

    const auto d = make_data({1, 2, 3, 2}, {0, 0, 1, 1}, 3);
    const auto dd = make_data({1, 2, 3, 2, 1, 2, 3, 2}, {0, 0, 1, 1, 0, 0, 1, 1}, 3);
    Eigen::MatrixXd b(2, 1);
    b << 0.3, -0.7;
    const ThresholdVector t({-0.5, 0.8});
    CHECK(conditional_loglik(t, {}, b, dd, {}) == 2.0 * conditional_loglik(t, {}, b, d, {}));
  }

  TEST_CASE("linear predictor and unseen groups") {
    Eigen::MatrixXd x(3, 1);
    x << 1, 2, 3;
    const auto d = make_data({1, 2, 3}, {0, 0, 1}, 3, x);
    Eigen::VectorXd beta(1);
    beta << 2.0;
    Eigen::MatrixXd b(2, 1);
    b << 0.5, -1.0;
    Eigen::VectorXd off(3);
    off << 0.1, 0.2, 0.3;
    const std::vector<int> group{0, -1, 1};
    const Eigen::VectorXd lam = linear_predictor(d, group, beta, b, off);
    CHECK(lam[0] == Approx(2.6));
    CHECK(lam[1] == Approx(4.2));
    CHECK(lam[2] == Approx(5.3));
  }

  TEST_CASE("inner modes") {
    // Prior dominates as sigma2 -> 0.
    const auto d = make_data({1, 1, 3, 3, 2}, {0, 0, 1, 1, 1}, 3);
    const ThresholdVector t({-0.5, 0.5});
    const Eigen::MatrixXd start = Eigen::MatrixXd::Zero(2, 1);
    const auto tiny = inner_newton_modes(t, {}, Eigen::VectorXd::Constant(1, 1e-10), d, {}, start);
    CHECK(tiny.modes.cwiseAbs().maxCoeff() < 1e-4);

    // Single binary observation: the mode solves F(b) - 1 + b = 0.
    const auto one = make_data({2}, {0}, 2);
    const auto m = inner_newton_modes(ThresholdVector({0.0}), {}, Eigen::VectorXd::Constant(1, 1.0), one, {},
                                      Eigen::MatrixXd::Zero(1, 1));
    const double root = bisect([](double b) { return oracle::logistic_cdf(b) - 1.0 + b; }, -5.0, 5.0);
    CHECK(m.modes(0, 0) == Approx(root).epsilon(1e-6));
    CHECK(m.modes(0, 0) == Approx(0.4011).epsilon(1e-3));
    CHECK(m.all_converged());
  }

  TEST_CASE("inner modes are separable across groups") {
    const auto d = make_data({1, 2, 3, 3, 1, 2}, {0, 0, 0, 1, 1, 1}, 3);
    const auto swapped = make_data({3, 1, 2, 1, 2, 3}, {0, 0, 0, 1, 1, 1}, 3);
    const ThresholdVector t({-0.2, 0.9});
    const Eigen::VectorXd s2 = Eigen::VectorXd::Constant(1, 1.7);
    const Eigen::MatrixXd start = Eigen::MatrixXd::Zero(2, 1);
    const auto a = inner_newton_modes(t, {}, s2, d, {}, start);
    const auto b = inner_newton_modes(t, {}, s2, swapped, {}, start);
    CHECK(std::abs(a.modes(0, 0) - b.modes(1, 0)) < 1e-12);
    CHECK(std::abs(a.modes(1, 0) - b.modes(0, 0)) < 1e-12);

    const auto block = make_data({1, 2, 3}, {0, 0, 0}, 3);
    const auto alone = inner_newton_modes(t, {}, s2, block, {}, Eigen::MatrixXd::Zero(1, 1));
    CHECK(std::abs(alone.modes(0, 0) - a.modes(0, 0)) < 1e-8);
  }

  TEST_CASE("laplace approximation limits and shift equivariance") {
    const auto d = make_data({1, 2, 3, 3, 1, 2, 2}, {0, 0, 0, 1, 1, 1, 1}, 3);
    const ThresholdVector t({-0.4, 0.7});
    const Eigen::VectorXd small = Eigen::VectorXd::Constant(1, 0.5 * std::log(1e-10));
    const double lap = laplace_marginal_loglik(t, {}, small, d, {});
    CHECK(lap == Approx(conditional_loglik(t, {}, Eigen::MatrixXd::Zero(2, 1), d, {})).epsilon(1e-3));

    Eigen::VectorXd off(7);
    off << 0.3, -0.1, 0.2, 0.0, 0.5, -0.4, 0.1;
    const Eigen::VectorXd ls = Eigen::VectorXd::Constant(1, 0.3);
    const double base = laplace_marginal_loglik(t, {}, ls, d, off);
    const double delta = 1.75;
    const double moved = laplace_marginal_loglik(t.shifted(delta), {}, ls, d, (off.array() + delta).matrix());
    CHECK(std::abs(base - moved) < 1e-10);
  }

  TEST_CASE("laplace value matches an independent computation") {
    const auto d = make_data({1, 1, 2, 2, 3, 3}, {0, 0, 0, 1, 1, 1}, 3);
    std::vector<oracle::Cluster> cl(2);
    for (std::size_t r = 0; r < d.rows(); ++r) {
      cl[static_cast<std::size_t>(d.group[r])].y.push_back(d.y[r]);
      cl[static_cast<std::size_t>(d.group[r])].eta.push_back(0.0);
    }
    const ThresholdVector t({-0.6, 0.9});
    for (double sd : {0.3, 1.0, 2.0}) {
      const double lap = laplace_marginal_loglik(t, {}, Eigen::VectorXd::Constant(1, std::log(sd)), d, {});
      CHECK(lap == Approx(oracle::laplace_loglik(cl, t.values(), sd)).epsilon(1e-7));
    }
    // Small random-effect variance: the approximation is close to quadrature.
    const double lap = laplace_marginal_loglik(t, {}, Eigen::VectorXd::Constant(1, std::log(0.3)), d, {});
    CHECK(std::abs(lap - oracle::agq_loglik(cl, t.values(), 0.3)) / std::abs(lap) < 1e-3);
  }

  TEST_CASE("laplace error against quadrature shrinks with cluster size") {
    const ThresholdVector t({-0.6, 0.9});
    double previous = 1.0;
    for (int n : {3, 12, 48}) {
      std::vector<int> y, g;
      std::vector<oracle::Cluster> cl(2);
      for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < n; ++j) {
          const int label = 1 + (j + i) % 3;
          y.push_back(label);
          g.push_back(i);
          cl[static_cast<std::size_t>(i)].y.push_back(label);
          cl[static_cast<std::size_t>(i)].eta.push_back(0.0);
        }
      }
      const auto d = make_data(y, g, 3);
      const double lap = laplace_marginal_loglik(t, {}, Eigen::VectorXd::Constant(1, 0.0), d, {});
      const double rel = std::abs(lap - oracle::agq_loglik(cl, t.values(), 1.0)) / std::abs(lap);
      CHECK(rel < previous);
      previous = rel;
    }
    CHECK(previous < 1e-3);
  }

  TEST_CASE("threshold reparameterisation round trip") {
    const ThresholdVector t({-2.0, -0.5, 1.0, 4.0});
    const ThresholdVector back = thresholds_from_unconstrained(thresholds_to_unconstrained(t));
    for (std::size_t c = 0; c < t.size(); ++c) CHECK(back[c] == Approx(t[c]).epsilon(1e-14));
    Eigen::VectorXd u(3);
    u << 0.0, -50.0, 3.0;
    const ThresholdVector any = thresholds_from_unconstrained(u);
    CHECK(any[1] > any[0]);
  }

  TEST_CASE("icc") {
    CHECK(icc(1.695) == Approx(0.340).epsilon(5e-4 / 0.34));
    CHECK(icc(0.0) == 0.0);
    CHECK(icc(LinkFunction::residual_variance) == Approx(0.5));
  }

  TEST_CASE("clm intercept-only recovers empirical cumulative logits") {
    const auto d = make_data({1, 2, 3, 1, 2, 3, 1, 2, 3}, {0, 0, 0, 0, 0, 0, 0, 0, 0}, 3);
    const ClmFit fit = fit_clm(d, false);
    CHECK(fit.converged);
    CHECK(fit.theta[0] == Approx(-0.6931).epsilon(1e-4));
    CHECK(fit.theta[1] == Approx(0.6931).epsilon(1e-4));

    const auto flat = make_data({1, 2, 3, 1, 2, 3}, {0, 0, 0, 0, 0, 0}, 3, Eigen::MatrixXd::Zero(6, 1));
    const ClmFit f2 = fit_clm(flat, true);
    CHECK(f2.beta[0] == 0.0);
    CHECK(f2.theta[0] == Approx(-0.6931).epsilon(1e-4));
  }

  TEST_CASE("clm flags separation") {
    Eigen::MatrixXd x(6, 1);
    x << -3, -2, -1, 1, 2, 3;
    const auto d = make_data({1, 1, 1, 2, 2, 2}, {0, 0, 0, 0, 0, 0}, 2, x);
    const ClmFit fit = fit_clm(d, true);
    CHECK(fit.separation);
  }

  TEST_CASE("fit_clm rejects a single observed category") {
    const auto d = make_data({2, 2, 2}, {0, 0, 0}, 3);
    CHECK_THROWS_WITH_AS(fit_clm(d, false), doctest::Contains("fewer than 2 observed categories"), ValidationError);
    CHECK_THROWS_AS(fit_clmm(d, {0}, {}, false), ValidationError);
  }

  TEST_CASE("no group effect gives a small variance") {
    for (std::uint64_t s = 0; s < 5; ++s) {
      const auto sd = linear_data(0.0, 10, 200, 300 + s);
      const ClmmFit fit = fit_clmm(sd.data, {0}, {}, true);
      CHECK(fit.converged);
      CHECK(fit.sigma2[0] < 0.05);
    }
  }

  TEST_CASE("variance recovery on linear data" * doctest::timeout(300)) {
    // Correctly specified design (x1, x2, x2*x3). With only ten groups the
    // realised variance of the sampled intercepts swings widely, so the
    // envelope is applied to the estimate relative to that realised variance.
    double mean_sigma2 = 0.0;
    for (std::uint64_t s = 0; s < 10; ++s) {
      auto sd = linear_data(1.0, 10, 1000, 500 + s);
      Eigen::MatrixXd x(sd.data.x.rows(), 3);
      x << sd.data.x.col(0), sd.data.x.col(1), sd.data.x.col(1).cwiseProduct(sd.data.x.col(2));
      sd.data.x = x;
      sd.data.feature_names = {"x1", "x2", "x2:x3"};
      const ClmmFit fit = fit_clmm(sd.data, {0}, {}, true);
      const Eigen::ArrayXd b = sd.b_true.col(0).array();
      const double realised = (b - b.mean()).square().sum() / 9.0;
      INFO("seed " << s << " sigma2 " << fit.sigma2[0] << " realised " << realised);
      CHECK(fit.sigma2[0] / realised >= 0.5);
      CHECK(fit.sigma2[0] / realised <= 1.7);
      mean_sigma2 += fit.sigma2[0] / 10.0;
    }
    CHECK(mean_sigma2 >= 0.5);
    CHECK(mean_sigma2 <= 1.7);
  }

  TEST_CASE("offset-only fit recovers threshold spacing") {
    const auto sd = linear_data(1.0, 10, 300, 700);
    const Eigen::VectorXd f = sim::fixed_effect_latent(sd.data.x, sd.spec);
    const ClmmFit fit = fit_clmm(sd.data, {0}, f, false);
    CHECK(fit.beta.size() == 0);
    CHECK(fit.offset_used);
    const double truth = sd.thresholds[1] - sd.thresholds[0];
    CHECK(std::abs((fit.theta[1] - fit.theta[0]) - truth) <= 0.15 * truth);
  }

  TEST_CASE("identifiability shift of the offset") {
    const auto sd = linear_data(1.0, 6, 60, 800);
    const Eigen::VectorXd f = sim::fixed_effect_latent(sd.data.x, sd.spec) * 0.5;
    const ClmmFit a = fit_clmm(sd.data, {0}, f, false);
    const ClmmFit b = fit_clmm(sd.data, {0}, (f.array() + 2.0).matrix(), false);
    for (std::size_t c = 0; c < a.theta.size(); ++c) CHECK(std::abs(b.theta[c] - (a.theta[c] + 2.0)) < 1e-4);
    const std::vector<int> g = sd.data.group;
    const Eigen::MatrixXd pa = predict_probs(a.theta, linear_predictor(sd.data, g, {}, a.b_modes, f));
    const Eigen::MatrixXd pb =
        predict_probs(b.theta, linear_predictor(sd.data, g, {}, b.b_modes, (f.array() + 2.0).matrix()));
    CHECK((pa - pb).cwiseAbs().maxCoeff() < 1e-6);
  }

  TEST_CASE("random slope fit and serialisation") {
    sim::DgpSpec spec = sim::scenario(7, 900);
    const auto sd = sim::generate(spec);
    const ClmmFit fit = fit_clmm(sd.data, {1}, {}, true);
    CHECK(fit.sigma2.size() == 2);
    CHECK(fit.b_modes.cols() == 2);
    CHECK((fit.b_sd.array() > 0).all());
    const ClmmFit back = ClmmFit::from_json(nlohmann::json::parse(fit.to_json().dump()));
    CHECK(back.theta.values() == fit.theta.values());
    CHECK(back.b_modes == fit.b_modes);
    CHECK(back.sigma2 == fit.sigma2);
    CHECK(back.group_labels == fit.group_labels);
    CHECK(back.slope_names == fit.slope_names);
  }

  TEST_CASE("single group is flagged") {
    const auto d = make_data({1, 2, 3, 2, 1, 3}, {0, 0, 0, 0, 0, 0}, 3);
    const ClmmFit fit = fit_clmm(d, {0}, {}, false);
    CHECK(fit.single_group);
  }

  TEST_CASE("empirical thresholds") {
    const ThresholdVector t = empirical_thresholds({1, 1, 2, 3}, 3);
    CHECK(t[0] == Approx(0.0).epsilon(1e-12));
    CHECK(t[1] == Approx(std::log(3.0)));
    const ThresholdVector gap = empirical_thresholds({1, 3}, 3);
    CHECK(gap[1] > gap[0]);
  }
}
