#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "mdnf/dists.hpp"
#include "test_helpers.hpp"

using namespace mdnf;

namespace {

Eigen::VectorXd vec(std::initializer_list<double> xs) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

double tv(const Eigen::VectorXd& a, const Eigen::VectorXd& b) { return 0.5 * (a - b).cwiseAbs().sum(); }

Eigen::VectorXd frequencies(const std::vector<int>& draws, int k) {
  Eigen::VectorXd f = Eigen::VectorXd::Zero(k);
  for (int d : draws) f[d] += 1.0;
  return f / static_cast<double>(draws.size());
}

}  // namespace

TEST_CASE("categorical params validation") {
  CHECK_THROWS_AS(CategoricalParams(vec({0.5, 0.6})), InvalidInput);
  CHECK_THROWS_AS(CategoricalParams(vec({-0.1, 1.1})), InvalidInput);
  CHECK_NOTHROW(CategoricalParams(vec({0.25, 0.75})));
  CHECK_THROWS_AS(DeltaBase(3, 3), InvalidInput);
  CHECK(DeltaBase(1, 3).probs() == vec({0, 1, 0}));
}

TEST_CASE("sample_categorical") {
  SeededRng rng(1);
  const CategoricalParams degenerate(vec({1, 0, 0}));
  for (int i = 0; i < 1000; ++i) REQUIRE(sample_categorical(degenerate, rng) == 0);

  const CategoricalParams coin(vec({0.5, 0.5}));
  std::vector<int> draws;
  for (int i = 0; i < 100000; ++i) draws.push_back(sample_categorical(coin, rng));
  const double f0 = frequencies(draws, 2)[0];
  CHECK(f0 > 0.49);
  CHECK(f0 < 0.51);

  const CategoricalParams p(vec({0.2, 0.3, 0.5}));
  draws.clear();
  for (int i = 0; i < 100000; ++i) draws.push_back(sample_categorical(p, rng));
  CHECK(tv(frequencies(draws, 3), p.probs()) < 0.01);
}

TEST_CASE("gumbel transform") {
  CHECK(gumbel_from_uniform(std::exp(-1.0)) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(gumbel_from_uniform(std::exp(-std::exp(1.0))) == doctest::Approx(-1.0).epsilon(1e-14));
  SeededRng rng(2);
  std::vector<double> g(100000);
  for (auto& x : g) x = sample_gumbel(rng);
  std::nth_element(g.begin(), g.begin() + 50000, g.end());
  CHECK(std::abs(g[50000] - (-std::log(std::log(2.0)))) < 0.02);
  for (double x : g) REQUIRE(std::isfinite(x));
}

TEST_CASE("rng reproducibility") {
  SeededRng a(99), b(99);
  for (int i = 0; i < 100; ++i) {
    REQUIRE(a.uniform() == b.uniform());
    REQUIRE(a.normal() == b.normal());
    REQUIRE(a.log_gamma(0.01) == b.log_gamma(0.01));
  }
}

TEST_CASE("gumbel_softmax_sample") {
  SeededRng rng(4);
  const Eigen::VectorXd logits = vec({0.5, -1.0, 1.2, 0.0});
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(4);
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd x = gumbel_softmax_sample(logits, Temperature(3.0), rng);
    REQUIRE(std::abs(x.sum() - 1.0) < 1e-12);
    Eigen::Index best = 0;
    x.maxCoeff(&best);
    counts[best] += 1.0;
  }
  const Eigen::VectorXd e = logits.array().exp();
  CHECK(tv(counts / n, e / e.sum()) < 0.01);

  // tiny tau approaches the one-hot of the perturbed argmax
  SeededRng r1(8), r2(8);
  const Eigen::VectorXd x = gumbel_softmax_sample(logits, Temperature(1e-3), r1);
  const Eigen::VectorXd g = sample_gumbel_vector(4, r2);
  Eigen::Index best = 0;
  (logits + g).maxCoeff(&best);
  CHECK(x[best] > 0.999);
}

TEST_CASE("traced gumbel softmax equals softmax when noise is shared") {
  Trace t;
  SeededRng rng(5);
  const Eigen::VectorXd l = vec({0.1, 0.7});
  const Var leaf = t.leaf(l);
  const Var x = gumbel_softmax_sample(t, leaf, Temperature(1.0), rng);
  SeededRng replay(5);
  const Eigen::VectorXd g = sample_gumbel_vector(2, replay);
  const Eigen::VectorXd z = (l + g).array().exp();
  CHECK(testutil::rel_error(t.value(x), z / z.sum()) < 1e-14);
}

TEST_CASE("gs_log_density values") {
  const CategoricalParams half(vec({0.5, 0.5}));
  CHECK(gs_log_density(vec({0.5, 0.5}), half, Temperature(1)) == doctest::Approx(0.0).epsilon(1e-14));
  CHECK_THROWS_AS(gs_log_density(vec({1.0, 0.0}), half, Temperature(1)), std::domain_error);

  const CategoricalParams sym(vec({1.0 / 3, 1.0 / 3, 1.0 / 3}));
  const double a = gs_log_density(vec({0.2, 0.3, 0.5}), sym, Temperature(0.7));
  const double b = gs_log_density(vec({0.5, 0.2, 0.3}), sym, Temperature(0.7));
  CHECK(a == doctest::Approx(b).epsilon(1e-12));

  // direct form of the density for a small instance
  const Eigen::VectorXd x = vec({0.1, 0.6, 0.3});
  const Eigen::VectorXd p = vec({0.2, 0.5, 0.3});
  const double tau = 0.8;
  double denom = 0.0, prod = 1.0;
  for (int i = 0; i < 3; ++i) {
    denom += p[i] * std::pow(x[i], -tau);
    prod *= p[i] * std::pow(x[i], -tau - 1);
  }
  const double direct = std::log(2.0 * tau * tau * prod / std::pow(denom, 3));
  CHECK(gs_log_density(x, CategoricalParams(p), Temperature(tau)) == doctest::Approx(direct).epsilon(1e-12));
}

TEST_CASE("gs density is stable where the direct form overflows") {
  Eigen::VectorXd x = Eigen::VectorXd::Constant(8, 1e-40);
  x[0] = 1.0 - 7e-40;
  const double v = gs_log_density(x, CategoricalParams::uniform(8), Temperature(9.0));
  CHECK(std::isfinite(v));
}

TEST_CASE("gs density integrates to one") {
  const CategoricalParams half(vec({0.5, 0.5}));
  const int n = 200000;
  const double eps = 1e-9;
  double integral = 0.0;
  const double h = (1.0 - 2 * eps) / n;
  for (int i = 0; i < n; ++i) {
    const double x1 = eps + (i + 0.5) * h;
    integral += std::exp(gs_log_density(vec({x1, 1.0 - x1}), half, Temperature(1))) * h;
  }
  CHECK(std::abs(integral - 1.0) < 1e-3);

  // K = 3: uniform points on the simplex have density 2 w.r.t. the first two coordinates
  SeededRng rng(6);
  const CategoricalParams p(vec({0.2, 0.3, 0.5}));
  const int m = 200000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < m; ++i) {
    Eigen::VectorXd e(3);
    for (int j = 0; j < 3; ++j) e[j] = -std::log(rng.uniform_open());
    const double v = std::exp(gs_log_density(e / e.sum(), p, Temperature(2.0))) / 2.0;
    s += v;
    s2 += v * v;
  }
  const double mean = s / m;
  const double se = std::sqrt((s2 / m - mean * mean) / m);
  CHECK(std::abs(mean - 1.0) < 3 * se);
}

TEST_CASE("traced gs density gradients") {
  const int blocks[] = {3, 2};
  Eigen::VectorXd raw(10);
  raw << 0.2, -0.3, 0.5, 1.0, -0.7, 0.4, 0.1, -0.2, 0.3, 0.0;
  auto build = [&](Trace& t, Var v) {
    const Var x = softmax_temp(t, slice(t, v, 0, 5), Temperature(1), blocks);
    return gs_log_density(t, x, slice(t, v, 5, 5), Temperature(0.6), blocks);
  };
  Trace t;
  const Var leaf = t.leaf(raw);
  t.reverse_sweep(build(t, leaf));
  const auto fd = testutil::numeric_gradient(
      [&](const Eigen::VectorXd& v) {
        Trace u;
        return u.scalar_value(build(u, u.constant(v)));
      },
      raw);
  CHECK(testutil::rel_error(t.grad(leaf), fd) < 1e-6);
}

TEST_CASE("dirichlet base draws") {
  SeededRng rng(7);
  const auto u = sample_dirichlet_base(1e6, 5, rng);
  CHECK(u.probs() == Eigen::VectorXd::Constant(5, 0.2));

  int near_delta = 0;
  for (int i = 0; i < 100; ++i) near_delta += sample_dirichlet_base(0.001, 4, rng).probs().maxCoeff() > 0.999;
  CHECK(near_delta >= 99);

  Eigen::VectorXd mean = Eigen::VectorXd::Zero(4);
  for (int i = 0; i < 10000; ++i) mean += sample_dirichlet_base(1.0, 4, rng).probs();
  mean /= 10000;
  for (int i = 0; i < 4; ++i) CHECK(std::abs(mean[i] - 0.25) < 0.01);
}

TEST_CASE("categorical entropy") {
  CHECK(categorical_entropy(CategoricalParams::uniform(4)) == doctest::Approx(std::log(4.0)));
  CHECK(categorical_entropy(CategoricalParams(vec({0, 1, 0}))) == 0.0);
  CHECK(categorical_entropy(CategoricalParams(vec({0.3, 0.7}))) == doctest::Approx(0.6108643020548935));
}
