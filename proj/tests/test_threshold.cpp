#include "cat/threshold.hpp"

#include <catch_amalgamated.hpp>

using namespace cat;
using Catch::Approx;

namespace {

Matrix rows(std::initializer_list<std::initializer_list<double>> r) {
  Matrix m(static_cast<Eigen::Index>(r.size()), static_cast<Eigen::Index>(r.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& row : r) {
    Eigen::Index j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

Matrix random_distributions(Eigen::Index n, int c, Rng& rng, double sharp = 3.0) {
  std::normal_distribution<double> g(0, sharp);
  Matrix m(n, c);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int k = 0; k < c; ++k) m(i, k) = std::exp(g(rng));
    m.row(i) /= m.row(i).sum();
  }
  return m;
}

}  // namespace

TEST_CASE("initial state is uniform", "[threshold]") {
  const auto s7 = ThresholdState::initial(7, 0.99);
  CHECK(s7.tau_g == Approx(1.0 / 7).epsilon(1e-15));
  CHECK(std::abs(s7.tau_g - 0.142857) < 1e-6);
  const auto s4 = ThresholdState::initial(4, 0.99);
  for (int c = 0; c < 4; ++c) CHECK(s4.expectations[c] == 0.25);
  CHECK_THROWS_AS(ThresholdState::initial(3, 1.0), ConfigError);
}

TEST_CASE("global threshold EMA step", "[threshold]") {
  auto s = ThresholdState::initial(2, 0.9);
  s.tau_g = 0.5;
  const std::vector<double> conf{0.7, 0.9};
  REQUIRE(update_global(s, conf));
  CHECK(s.tau_g == Approx(0.53).epsilon(1e-14));
  CHECK(s.step == 1);
}

TEST_CASE("empty batches leave the state untouched", "[threshold]") {
  auto s = ThresholdState::initial(3, 0.9);
  const auto before = s;
  CHECK_FALSE(update_global(s, std::vector<double>{}));
  CHECK_FALSE(update_expectations(s, Matrix(0, 3)));
  CHECK(s == before);
  ThresholdController ctl({0}, 3, 0.9);
  ctl.update(0, Matrix(0, 3));
  CHECK(ctl.state(0) == before);
  CHECK(ctl.warnings().size() == 1);
}

TEST_CASE("constant confidence stream follows the geometric closed form", "[threshold]") {
  const double lambda = 0.9, c = 0.8;
  auto s = ThresholdState::initial(5, lambda);
  const double gap0 = std::abs(s.tau_g - c);
  const std::vector<double> conf(16, c);
  for (int t = 1; t <= 100; ++t) {
    update_global(s, conf);
    CHECK(std::abs(std::abs(s.tau_g - c) - std::pow(lambda, t) * gap0) <= 1e-12);
  }
}

TEST_CASE("class expectation EMA step", "[threshold]") {
  auto s = ThresholdState::initial(2, 0.5);
  s.expectations << 0.2, 0.8;
  REQUIRE(update_expectations(s, rows({{0.7, 0.3}, {0.5, 0.5}})));
  CHECK(s.expectations[0] == Approx(0.4).epsilon(1e-14));
  CHECK(s.expectations[1] == Approx(0.6).epsilon(1e-14));
}

TEST_CASE("expectations stay a distribution", "[threshold]") {
  Rng rng(1);
  auto s = ThresholdState::initial(6, 0.7);
  for (int t = 0; t < 200; ++t) {
    update_expectations(s, random_distributions(8, 6, rng));
    CHECK(std::abs(s.expectations.sum() - 1.0) <= 1e-12);
    CHECK(s.expectations.minCoeff() >= 0.0);
    CHECK(s.expectations.maxCoeff() <= 1.0);
  }
}

TEST_CASE("local thresholds scale tau_g by normalised expectations", "[threshold]") {
  auto s = ThresholdState::initial(3, 0.9);
  s.tau_g = 0.6;
  s.expectations << 0.2, 0.4, 0.4;
  const Vector t = local_thresholds(s);
  CHECK(t[0] == Approx(0.3).epsilon(1e-14));
  CHECK(t[1] == 0.6);
  CHECK(t[2] == 0.6);
  s.expectations.setConstant(1.0 / 3);
  CHECK(local_thresholds(s) == Vector::Constant(3, 0.6));
}

TEST_CASE("argmax class gets exactly tau_g on random states", "[threshold]") {
  Rng rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    auto s = ThresholdState::initial(2 + trial % 9, 0.9);
    s.tau_g = u(rng);
    for (int c = 0; c < s.num_classes; ++c) s.expectations[c] = u(rng);
    Eigen::Index top = 0;
    s.expectations.maxCoeff(&top);
    const Vector t = local_thresholds(s);
    CHECK(t[top] == s.tau_g);
    CHECK(t.maxCoeff() <= s.tau_g);
  }
}

TEST_CASE("all-zero expectations are degenerate", "[threshold]") {
  ThresholdController ctl({1, 2}, 3, 0.9);
  auto s = ThresholdState::initial(3, 0.9);
  s.expectations.setZero();
  bool degenerate = false;
  CHECK(local_thresholds(s, &degenerate) == Vector::Constant(3, s.tau_g));
  CHECK(degenerate);
}

TEST_CASE("selection compares confidence with the argmax class threshold", "[threshold]") {
  Vector t(2);
  t << 0.6, 0.8;
  const auto b = select_with(t, rows({{0.1, 0.9}, {0.55, 0.45}, {0.2, 0.8}}), 3);
  CHECK(b.selected == std::vector<bool>{true, false, false});
  CHECK(b.pseudo_label == std::vector<int>{1, 0, 1});
  CHECK(b.threshold == std::vector<double>{0.8, 0.6, 0.8});
  CHECK(b.domain_id == std::vector<int>{3, 3, 3});
  CHECK(b.num_selected() == 1);
}

TEST_CASE("argmax ties go to the lowest class", "[threshold]") {
  const auto b = fixed_select(0.3, rows({{0.4, 0.4, 0.2}}));
  CHECK(b.pseudo_label[0] == 0);
}

TEST_CASE("fixed threshold selection", "[threshold]") {
  CHECK(fixed_select(0.95, rows({{0.96, 0.04}})).selected[0]);
  CHECK_FALSE(fixed_select(0.95, rows({{0.95, 0.05}})).selected[0]);
  Rng rng(2);
  const Matrix q = random_distributions(200, 4, rng);
  CHECK(fixed_select(1.0 - 1e-12, q).num_selected() == 0);
  std::size_t last = q.rows();
  for (double tau = 0.05; tau < 1.0; tau += 0.05) {
    const std::size_t n = fixed_select(tau, q).num_selected();
    CHECK(n <= last);
    last = n;
  }
  CHECK_THROWS_AS(fixed_select(1.0, q), ConfigError);
}

TEST_CASE("adaptive selection contains fixed selection when thresholds are lower", "[threshold]") {
  Rng rng(11);
  std::uniform_real_distribution<double> u(0.05, 0.9);
  for (int trial = 0; trial < 300; ++trial) {
    const int c = 2 + trial % 6;
    Vector t(c);
    for (int k = 0; k < c; ++k) t[k] = u(rng);
    const double tau = t.maxCoeff() + 0.05;
    const Matrix q = random_distributions(30, c, rng);
    const auto adaptive = select_with(t, q, 0);
    const auto fixed = fixed_select(std::min(tau, 0.99), q);
    for (std::size_t i = 0; i < fixed.size(); ++i)
      if (fixed.selected[i]) CHECK(adaptive.selected[i]);
  }
}

TEST_CASE("per-domain states evolve independently", "[threshold]") {
  ThresholdController ctl({0, 2}, 2, 0.5);
  ctl.update(0, rows({{0.9, 0.1}}));
  CHECK(ctl.state(0).tau_g == Approx(0.7));
  CHECK(ctl.state(2).tau_g == 0.5);
  CHECK(ctl.state(2).step == 0);
  CHECK_THROWS_AS(ctl.select(rows({{0.5, 0.5}}), 1), ContractViolation);
  CHECK_THROWS_AS(ctl.update(7, rows({{0.5, 0.5}})), ContractViolation);
}

TEST_CASE("shared mode keeps a single state", "[threshold]") {
  ThresholdController ctl({0, 2}, 2, 0.5, false);
  ctl.update(0, rows({{0.9, 0.1}}));
  CHECK(ctl.state(2).tau_g == Approx(0.7));
  CHECK(&ctl.state(0) == &ctl.state(2));
}
