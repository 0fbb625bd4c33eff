#include <cmath>
#include <random>

#include "doctest.h"
#include "mdnf/diffcore.hpp"
#include "test_helpers.hpp"

using namespace mdnf;
using testutil::onehot;

namespace {

Eigen::VectorXd vec(std::initializer_list<double> xs) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

}  // namespace

TEST_CASE("softmax_temp values") {
  Trace t;
  auto s = softmax_temp(t, t.constant(vec({0, 0})), Temperature(1));
  CHECK(t.value(s)[0] == doctest::Approx(0.5));
  s = softmax_temp(t, t.constant(vec({2, 2, 2})), Temperature(7));
  for (int i = 0; i < 3; ++i) CHECK(t.value(s)[i] == doctest::Approx(1.0 / 3));
  s = softmax_temp(t, t.constant(vec({1, 0})), Temperature(1));
  CHECK(t.value(s)[0] == doctest::Approx(0.7310585786300049).epsilon(1e-12));
  CHECK(t.value(s)[1] == doctest::Approx(0.2689414213699951).epsilon(1e-12));
  CHECK(std::abs(t.value(s).sum() - 1.0) < 1e-12);
}

TEST_CASE("softmax_temp rejects bad input") {
  Trace t;
  CHECK_THROWS_AS(softmax_temp(t, t.constant(vec({0, NAN})), Temperature(1)), InvalidInput);
  CHECK_THROWS_AS(softmax_temp(t, t.constant(vec({0, INFINITY})), Temperature(1)), InvalidInput);
  CHECK_THROWS_AS(Temperature(0.0), InvalidInput);
  CHECK_THROWS_AS(Temperature(-1.0), InvalidInput);
}

TEST_CASE("straight_through forward and backward") {
  Trace t;
  const Var r = t.leaf(vec({0.7, 0.3}));
  const Var st = straight_through(t, r);
  CHECK(t.value(st) == vec({1, 0}));
  const Var r3 = t.leaf(vec({0.2, 0.5, 0.3}));
  const Var st3 = straight_through(t, r3);
  CHECK(t.value(st3) == vec({0, 1, 0}));
  // ties go to the lowest index
  const Var tie = straight_through(t, t.constant(vec({0.4, 0.4, 0.2})));
  CHECK(t.value(tie) == vec({1, 0, 0}));

  const Var root = log_lookup(t, st3, vec({1.5, -2.0, 4.0}));
  t.reverse_sweep(root);
  CHECK(t.grad(r3) == vec({1.5, -2.0, 4.0}));
}

TEST_CASE("straight_through output is always one-hot") {
  std::mt19937_64 gen(3);
  std::normal_distribution<double> n;
  for (int rep = 0; rep < 200; ++rep) {
    Trace t;
    const int k = 2 + rep % 9;
    Eigen::VectorXd l(k);
    for (int i = 0; i < k; ++i) l[i] = n(gen);
    const Var st = straight_through(t, softmax_temp(t, t.constant(l), Temperature(0.5)));
    const auto v = t.value(st);
    CHECK(v.sum() == 1.0);
    for (int i = 0; i < k; ++i) CHECK((v[i] == 0.0 || v[i] == 1.0));
  }
}

TEST_CASE("circular_convolve examples") {
  Trace t;
  auto c = circular_convolve(t, t.constant(onehot(5, 3)), t.constant(onehot(5, 2)));
  CHECK(t.value(c) == onehot(5, 0));
  const Eigen::VectorXd b = vec({0.1, 0.2, 0.3, 0.4});
  c = circular_convolve(t, t.constant(onehot(4, 0)), t.constant(b));
  CHECK(t.value(c) == b);
  c = circular_convolve(t, t.constant(vec({0.5, 0.5, 0})), t.constant(onehot(3, 1)));
  CHECK(t.value(c) == vec({0, 0.5, 0.5}));
  CHECK_THROWS_AS(circular_convolve(t, t.constant(onehot(3, 0)), t.constant(onehot(4, 0))), InvalidInput);
}

TEST_CASE("circular_convolve of one-hots is exhaustive modular addition") {
  for (int k = 1; k <= 16; ++k) {
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < k; ++j) {
        Trace t;
        const Var c = circular_convolve(t, t.constant(onehot(k, i)), t.constant(onehot(k, j)));
        REQUIRE(t.value(c) == onehot(k, (i + j) % k));
      }
    }
  }
}

TEST_CASE("circular_convolve preserves mass") {
  Trace t;
  const Eigen::VectorXd a = vec({0.2, 0.5, 0.1, 0.7});
  const Eigen::VectorXd b = vec({1.0, 0.3, 0.0, 0.4});
  const Var c = circular_convolve(t, t.constant(a), t.constant(b));
  CHECK(t.value(c).sum() == doctest::Approx(a.sum() * b.sum()));
}

TEST_CASE("circular_correlate undoes a one-hot convolution") {
  for (int k = 1; k <= 9; ++k) {
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < k; ++j) {
        Trace t;
        const Var a = t.constant(onehot(k, i));
        const Var x = circular_convolve(t, a, t.constant(onehot(k, j)));
        REQUIRE(t.value(circular_correlate(t, x, a)) == onehot(k, j));
      }
    }
  }
}

TEST_CASE("blocked ops treat blocks independently") {
  Trace t;
  const int blocks[] = {2, 3};
  Eigen::VectorXd a(5), b(5);
  a << 0, 1, 0, 0, 1;
  b << 0, 1, 0, 1, 0;
  const Var c = circular_convolve(t, t.constant(a), t.constant(b), blocks);
  Eigen::VectorXd expect(5);
  expect << 1, 0, 1, 0, 0;
  CHECK(t.value(c) == expect);
  Eigen::VectorXd l(5);
  l << 1, 3, 0, 5, 0;
  const Var s = straight_through(t, softmax_temp(t, t.constant(l), Temperature(1), blocks), blocks);
  Eigen::VectorXd st(5);
  st << 0, 1, 0, 1, 0;
  CHECK(t.value(s) == st);
  const int bad[] = {2, 2};
  CHECK_THROWS_AS(softmax_temp(t, t.constant(l), Temperature(1), bad), InvalidInput);
}

TEST_CASE("log_lookup") {
  Trace t;
  CHECK(t.scalar_value(log_lookup(t, t.constant(onehot(2, 1)), vec({std::log(0.3), std::log(0.7)}))) ==
        doctest::Approx(std::log(0.7)));
  CHECK(t.scalar_value(log_lookup(t, t.constant(onehot(2, 0)), vec({0, 5}))) == 0.0);
  CHECK(t.scalar_value(log_lookup(t, t.constant(vec({0.5, 0.5})), vec({0, 2}))) == doctest::Approx(1.0));
  // zero-probability event is a value, not an error
  const double v = t.scalar_value(log_lookup(t, t.constant(onehot(2, 1)), vec({0, -INFINITY})));
  CHECK(std::isinf(v));
  CHECK(v < 0);
  // 0 * -inf counts as zero
  CHECK(t.scalar_value(log_lookup(t, t.constant(onehot(2, 0)), vec({0, -INFINITY}))) == 0.0);
}

TEST_CASE("reverse_sweep matches finite differences for softmax into log_lookup") {
  const Eigen::VectorXd table = vec({0.3, -1.2, 2.0, 0.5});
  const Eigen::VectorXd lam = vec({0.1, -0.4, 0.8, 0.2});
  Trace t;
  const Var leaf = t.leaf(lam);
  t.reverse_sweep(log_lookup(t, softmax_temp(t, leaf, Temperature(1)), table));
  const Eigen::VectorXd g = t.grad(leaf);
  const auto fd = testutil::numeric_gradient(
      [&](const Eigen::VectorXd& l) {
        Trace u;
        return u.scalar_value(log_lookup(u, softmax_temp(u, u.constant(l), Temperature(1)), table));
      },
      lam);
  CHECK(testutil::rel_error(g, fd) < 1e-5);
}

TEST_CASE("constant root gives zero gradients") {
  Trace t;
  const Var leaf = t.leaf(vec({1, 2}));
  (void)softmax_temp(t, leaf, Temperature(1));
  const Var root = t.scalar(3.0);
  t.reverse_sweep(root);
  CHECK(t.grad(leaf).isZero());
}

TEST_CASE("gradients of independent subgraphs add") {
  const Eigen::VectorXd lam = vec({0.3, -0.2, 0.9});
  const Eigen::VectorXd t1 = vec({1, 2, 3});
  const Eigen::VectorXd t2 = vec({-2, 0.5, 1});
  auto grad_of = [&](bool first, bool second) {
    Trace t;
    const Var leaf = t.leaf(lam);
    std::vector<Var> parts;
    if (first) parts.push_back(log_lookup(t, softmax_temp(t, leaf, Temperature(1)), t1));
    if (second) parts.push_back(log_lookup(t, softmax_temp(t, leaf, Temperature(2)), t2));
    t.reverse_sweep(sum(t, parts));
    return Eigen::VectorXd(t.grad(leaf));
  };
  CHECK(testutil::rel_error(grad_of(true, true), grad_of(true, false) + grad_of(false, true)) < 1e-14);
}

TEST_CASE("repeated sweeps reset accumulators") {
  Trace t;
  const Var leaf = t.leaf(vec({0.3, 0.1}));
  const Var root = log_lookup(t, softmax_temp(t, leaf, Temperature(1)), vec({1, 4}));
  t.reverse_sweep(root);
  const Eigen::VectorXd g1 = t.grad(leaf);
  t.reverse_sweep(root);
  CHECK(Eigen::VectorXd(t.grad(leaf)) == g1);
}

TEST_CASE("reverse_sweep requires a scalar root") {
  Trace t;
  const Var v = t.leaf(vec({1, 2}));
  CHECK_THROWS_AS(t.reverse_sweep(v), InvalidInput);
}

TEST_CASE("elementwise op gradients") {
  std::mt19937_64 gen(11);
  std::uniform_real_distribution<double> u(0.2, 1.5);
  Eigen::VectorXd a(4), b(4);
  for (int i = 0; i < 4; ++i) {
    a[i] = u(gen);
    b[i] = u(gen);
  }
  Eigen::VectorXd joined(8);
  joined << a, b;
  auto build = [](Trace& t, Var x) {
    const Var p = slice(t, x, 0, 4);
    const Var q = slice(t, x, 4, 4);
    const int idx[] = {2, 0, 3};
    const int perm[] = {3, 1, 0, 2};
    const Var parts[] = {log(t, p), exp(t, scale(t, q, 0.3)), sigmoid(t, sub(t, p, q))};
    const Var c = concat(t, parts);
    const Var g = gather(t, c, idx);
    const Var s = scatter_replace(t, one_minus(t, q), g, idx);
    const Var terms[] = {dot(t, add(t, p, q), permute(t, s, perm)), log_sum_exp(t, c),
                         mul(t, sum_elements(t, p), sum_elements(t, add_constant(t, q, Eigen::VectorXd::Ones(4)))),
                         entropy(t, softmax_temp(t, p, Temperature(0.7)))};
    return sum(t, terms);
  };
  Trace t;
  const Var leaf = t.leaf(joined);
  t.reverse_sweep(build(t, leaf));
  const auto fd = testutil::numeric_gradient(
      [&](const Eigen::VectorXd& x) {
        Trace u;
        return u.scalar_value(build(u, u.constant(x)));
      },
      joined);
  CHECK(testutil::rel_error(t.grad(leaf), fd) < 1e-6);
}

TEST_CASE("convolve and correlate gradients") {
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> u(-1, 1);
  const int blocks[] = {3, 4};
  Eigen::VectorXd p(14);
  for (int i = 0; i < 14; ++i) p[i] = u(gen);
  const Eigen::VectorXd table = Eigen::VectorXd::LinSpaced(7, -1.0, 2.0);
  auto build = [&](Trace& t, Var x) {
    const Var a = softmax_temp(t, slice(t, x, 0, 7), Temperature(1), blocks);
    const Var b = softmax_temp(t, slice(t, x, 7, 7), Temperature(1.3), blocks);
    const Var c = circular_convolve(t, a, b, blocks);
    const Var r = circular_correlate(t, c, b, blocks);
    return add(t, log_lookup(t, c, table), log_lookup(t, r, table.reverse()));
  };
  Trace t;
  const Var leaf = t.leaf(p);
  t.reverse_sweep(build(t, leaf));
  const auto fd = testutil::numeric_gradient(
      [&](const Eigen::VectorXd& x) {
        Trace v;
        return v.scalar_value(build(v, v.constant(x)));
      },
      p);
  CHECK(testutil::rel_error(t.grad(leaf), fd) < 1e-6);
}

TEST_CASE("push rejects forward references") {
  Trace t;
  t.scalar(1.0);
  const Var bogus{5};
  CHECK_THROWS(t.push(nullptr, 1, {bogus}));
}
