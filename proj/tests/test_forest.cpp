#include "doctest.h"

#include "omerf/forest.hpp"

#include <random>

using namespace omerf;

namespace {

ForestConfig single_tree() {
  ForestConfig c;
  c.num_trees = 1;
  c.bootstrap = false;
  c.min_node_size = 1;
  c.mtry = 0;
  return c;
}

Eigen::MatrixXd random_matrix(int n, int p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd x(n, p);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < p; ++c) x(r, c) = normal(rng);
  return x;
}

}  // namespace

TEST_SUITE("forest") {
  TEST_CASE("fully grown single tree memorises distinct rows") {
    const Eigen::MatrixXd x = random_matrix(60, 3, 1);
    Eigen::VectorXd y = Eigen::VectorXd::NullaryExpr(60, [&](Eigen::Index r) { return std::sin(3 * x(r, 0)) + x(r, 2); });
    ForestConfig c = single_tree();
    c.mtry = 3;
    const RandomForest f = fit_forest(x, y, c);
    CHECK((f.predict(x) - y).squaredNorm() == 0.0);
  }

  TEST_CASE("constant target gives constant predictions") {
    const Eigen::MatrixXd x = random_matrix(40, 2, 2);
    const Eigen::VectorXd y = Eigen::VectorXd::Constant(40, 2.5);
    ForestConfig c;
    c.num_trees = 20;
    const RandomForest f = fit_forest(x, y, c);
    const Eigen::VectorXd p = f.predict(random_matrix(15, 2, 3));
    CHECK((p.array() == 2.5).all());
    for (const auto& t : f.trees()) CHECK(t.num_leaves() == 1);
  }

  TEST_CASE("two-point dataset splits at the midpoint") {
    Eigen::MatrixXd x(2, 1);
    x << 0.0, 1.0;
    Eigen::VectorXd y(2);
    y << 0.0, 1.0;
    const RandomForest f = fit_forest(x, y, single_tree());
    REQUIRE(f.trees()[0].nodes()[0].threshold == 0.5);
    Eigen::MatrixXd q(3, 1);
    q << 0.9, 0.5, 0.49;
    const Eigen::VectorXd p = f.predict(q);
    CHECK(p[0] == 1.0);
    CHECK(p[1] == 0.0);
    CHECK(p[2] == 0.0);
  }

  TEST_CASE("ties prefer the lowest feature index") {
    Eigen::MatrixXd x(4, 2);
    x << 0, 0, 0, 0, 1, 1, 1, 1;
    Eigen::VectorXd y(4);
    y << 0, 0, 1, 1;
    ForestConfig c = single_tree();
    c.mtry = 2;
    const RandomForest f = fit_forest(x, y, c);
    CHECK(f.trees()[0].nodes()[0].feature == 0);
  }

  TEST_CASE("prediction is the mean of the trees") {
    RegressionTree one({RegressionTree::Node{-1, 0.0, -1, -1, 1.0}});
    RegressionTree three({RegressionTree::Node{-1, 0.0, -1, -1, 3.0}});
    ForestConfig c;
    c.num_trees = 2;
    const RandomForest f = RandomForest::assemble(c, 1, 0, {one, three}, {});
    Eigen::MatrixXd q(1, 1);
    q << 0.0;
    CHECK(f.predict(q)[0] == 2.0);
    CHECK(f.predict(Eigen::MatrixXd(0, 1)).size() == 0);
    const RandomForest single = RandomForest::assemble(c, 1, 0, {three}, {});
    CHECK(single.predict(q)[0] == 3.0);

    const Eigen::MatrixXd x = random_matrix(80, 4, 4);
    const Eigen::VectorXd y = x.col(0) + x.col(1).cwiseAbs();
    ForestConfig k;
    k.num_trees = 8;
    const RandomForest g = fit_forest(x, y, k);
    const Eigen::MatrixXd xq = random_matrix(10, 4, 5);
    const Eigen::VectorXd p = g.predict(xq);
    for (Eigen::Index r = 0; r < xq.rows(); ++r) {
      double s = 0.0;
      for (const auto& t : g.trees()) s += t.predict(xq.row(r));
      CHECK(p[r] == s / 8.0);
    }
  }

  TEST_CASE("min node size follows the leaf-if-at-most rule") {
    const Eigen::MatrixXd x = random_matrix(200, 2, 6);
    const Eigen::VectorXd y = x.col(0);
    ForestConfig c = single_tree();
    c.min_node_size = 20;
    const RandomForest f = fit_forest(x, y, c);
    const auto& nodes = f.trees()[0].nodes();
    std::vector<int> visits(nodes.size(), 0);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      int k = 0;
      while (true) {
        ++visits[static_cast<std::size_t>(k)];
        if (nodes[static_cast<std::size_t>(k)].is_leaf()) break;
        const auto& n = nodes[static_cast<std::size_t>(k)];
        k = x(r, n.feature) <= n.threshold ? n.left : n.right;
      }
    }
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (!nodes[k].is_leaf()) CHECK(visits[k] > 20);
    }
    c.max_depth = 1;
    CHECK(fit_forest(x, y, c).trees()[0].num_leaves() == 2);
  }

  TEST_CASE("out-of-bag coverage") {
    const Eigen::MatrixXd x = random_matrix(100, 3, 7);
    const Eigen::VectorXd y = x.col(0);
    ForestConfig c;
    c.num_trees = 1;
    c.seed = 99;
    const RandomForest one = fit_forest(x, y, c);
    const OobPrediction o1 = oob_predict(one, x);
    for (std::size_t r = 0; r < 100; ++r) {
      CHECK(o1.covered[r] == one.oob_mask(0)[r]);
      if (o1.covered[r]) CHECK(o1.values[static_cast<Eigen::Index>(r)] == one.trees()[0].predict(x.row(static_cast<Eigen::Index>(r))));
    }
    c.num_trees = 500;
    CHECK(oob_predict(fit_forest(x, y, c), x).num_covered() == 100);

    // J = 2: replay each tree's bootstrap draw from its stream seed.
    Eigen::MatrixXd x2(2, 1);
    x2 << 0.0, 1.0;
    Eigen::VectorXd y2(2);
    y2 << 0.0, 1.0;
    c.num_trees = 16;
    c.min_node_size = 1;
    const RandomForest f2 = fit_forest(x2, y2, c);
    for (std::size_t t = 0; t < 16; ++t) {
      std::mt19937_64 rng(derive_seed(c.seed, t));
      std::uniform_int_distribution<std::size_t> draw(0, 1);
      std::vector<bool> oob(2, true);
      for (int k = 0; k < 2; ++k) oob[draw(rng)] = false;
      CHECK(f2.oob_mask(t) == oob);
    }
    ForestConfig nb = single_tree();
    CHECK_THROWS_AS(oob_predict(fit_forest(x2, y2, nb), x2), ValidationError);
  }

  TEST_CASE("determinism across runs and thread counts") {
    const Eigen::MatrixXd x = random_matrix(150, 5, 8);
    const Eigen::VectorXd y = x.col(1).array().square() + x.col(3).array();
    ForestConfig c;
    c.num_trees = 40;
    c.num_threads = 1;
    const auto a = fit_forest(x, y, c).to_json().dump();
    c.num_threads = 4;
    const auto b = fit_forest(x, y, c).to_json().dump();
    CHECK(a == b);
    c.seed = 2;
    CHECK(fit_forest(x, y, c).to_json().dump() != a);
  }

  TEST_CASE("json round trip preserves predictions") {
    const Eigen::MatrixXd x = random_matrix(90, 3, 9);
    const Eigen::VectorXd y = x.col(2) * 2.0;
    ForestConfig c;
    c.num_trees = 12;
    const RandomForest f = fit_forest(x, y, c);
    const RandomForest g = RandomForest::from_json(nlohmann::json::parse(f.to_json().dump()));
    const Eigen::MatrixXd q = random_matrix(20, 3, 10);
    CHECK((f.predict(q) - g.predict(q)).cwiseAbs().maxCoeff() == 0.0);
    CHECK(oob_predict(f, x).values.isApprox(oob_predict(g, x).values));
  }

  TEST_CASE("config validation") {
    const Eigen::MatrixXd x = random_matrix(10, 2, 11);
    const Eigen::VectorXd y = x.col(0);
    ForestConfig c;
    c.num_trees = 0;
    CHECK_THROWS_AS(fit_forest(x, y, c), ValidationError);
    c.num_trees = 5;
    c.mtry = 3;
    CHECK_THROWS_AS(fit_forest(x, y, c), ValidationError);
    CHECK(ForestConfig{}.resolved_mtry(7) == 2);
    CHECK(ForestConfig{}.resolved_mtry(2) == 1);
    CHECK_THROWS_AS(fit_forest(x, Eigen::VectorXd::Zero(3), ForestConfig{}), ValidationError);
  }

  TEST_CASE("permutation importance") {
    // x1 drives the target; x2 is never used by the tree.
    Eigen::MatrixXd x(4, 2);
    x << 0, 5, 1, 5, 2, 5, 3, 5;
    const Eigen::VectorXd y = x.col(0);
    ForestConfig both = single_tree();
    both.mtry = 2;
    const RandomForest f = fit_forest(x, y, both);
    const PermutationImportance imp = permutation_importance(f, x, y, 10, 3);
    CHECK_FALSE(imp.used_oob);
    CHECK(imp.baseline_mse == 0.0);
    CHECK(imp.importance[1] == 0.0);
    CHECK(imp.importance[0] > 0.0);
    // Hand check: a permutation p gives MSE mean (x[p] - x)^2; averaged over
    // random permutations of (0,1,2,3) that expectation is 2 * Var = 2.5.
    CHECK(imp.importance[0] == doctest::Approx(2.5).epsilon(0.6));

    const Eigen::MatrixXd xb = random_matrix(300, 4, 12);
    const Eigen::VectorXd yb = 2.0 * xb.col(0);
    ForestConfig c;
    c.num_trees = 100;
    c.mtry = 1;
    const RandomForest g = fit_forest(xb, yb, c);
    const PermutationImportance ib = permutation_importance(g, xb, yb, 10, 4);
    CHECK(ib.used_oob);
    const double var = (yb.array() - yb.mean()).square().mean();
    for (int p = 1; p < 4; ++p) CHECK(std::abs(ib.importance[static_cast<std::size_t>(p)]) < 0.05 * var);
    CHECK(ib.importance[0] > 1.0);
  }

  TEST_CASE("duplicated columns share importance") {
    int within = 0;
    for (std::uint64_t s = 0; s < 20; ++s) {
      const Eigen::MatrixXd base = random_matrix(200, 2, 100 + s);
      const Eigen::VectorXd y = base.col(0) * 3.0;
      ForestConfig c;
      c.num_trees = 60;
      c.mtry = 1;
      c.seed = s + 1;
      const double single = permutation_importance(fit_forest(base, y, c), base, y, 3, s).importance[0];
      Eigen::MatrixXd dup(200, 3);
      dup << base.col(0), base.col(0), base.col(1);
      const auto imp = permutation_importance(fit_forest(dup, y, c), dup, y, 3, s).importance;
      const double sum = imp[0] + imp[1];
      within += sum > single / 2.0 && sum < single * 2.0;
    }
    CHECK(within == 20);
  }

  TEST_CASE("partial dependence") {
    const Eigen::MatrixXd x = random_matrix(50, 2, 13);
    const RandomForest flat = fit_forest(x, Eigen::VectorXd::Constant(50, -1.0), single_tree());
    for (const auto& [g, v] : partial_dependence(flat, x, 0, {-1.0, 0.0, 1.0})) CHECK(v == -1.0);

    Eigen::MatrixXd x4(4, 1);
    x4 << 0, 1, 2, 3;
    const RandomForest id = fit_forest(x4, x4.col(0), single_tree());
    const auto pd = partial_dependence(id, x4, 0, {-1.0, 0.4, 0.6, 1.4, 2.5, 9.0});
    const double expect[] = {0.0, 0.0, 1.0, 1.0, 2.0, 3.0};  // 2.5 sits on a cut point and goes left
    for (std::size_t k = 0; k < pd.size(); ++k) CHECK(pd[k].second == expect[k]);

    ForestConfig c;
    c.num_trees = 30;
    const RandomForest f = fit_forest(x, x.col(0) + x.col(1), c);
    const auto one = partial_dependence(f, x, 1, {0.3});
    Eigen::MatrixXd xo = x;
    xo.col(1).setConstant(0.3);
    CHECK(one[0].second == doctest::Approx(f.predict(xo).mean()).epsilon(1e-14));
  }

  TEST_CASE("partial dependence recovers a monotone response") {
    std::mt19937_64 rng(14);
    std::normal_distribution<double> noise(0.0, 0.1);
    const Eigen::MatrixXd x = random_matrix(500, 3, 15);
    Eigen::VectorXd y(500);
    for (int r = 0; r < 500; ++r) y[r] = 3.0 * x(r, 0) + noise(rng);
    ForestConfig c;
    c.num_trees = 100;
    const RandomForest f = fit_forest(x, y, c);
    const auto grid = range_grid(x, 0, 10);
    CHECK(grid.size() == 10);
    CHECK(grid.front() == x.col(0).minCoeff());
    CHECK(grid.back() == doctest::Approx(x.col(0).maxCoeff()));
    const auto pd = partial_dependence(f, x, 0, grid);
    int inversions = 0;
    for (std::size_t k = 1; k < pd.size(); ++k) inversions += pd[k].second < pd[k - 1].second;
    CHECK(inversions <= 1);
  }
}
