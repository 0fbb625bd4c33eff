#include "mdnf/dists.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace mdnf {

namespace {

constexpr double kUniformFloor = 1e-12;

template <typename Fn>
void for_each_block(std::span<const int> blocks, std::size_t n, Fn&& fn) {
  if (blocks.empty()) {
    fn(std::size_t{0}, n);
    return;
  }
  std::size_t offset = 0;
  for (int b : blocks) {
    fn(offset, static_cast<std::size_t>(b));
    offset += static_cast<std::size_t>(b);
  }
}

// Per-block Gumbel-Softmax log density and, optionally, its gradients.
double gs_block(std::span<const double> x, std::span<const double> lw, double tau,
                std::span<double> gx, std::span<double> glw, double upstream) {
  const auto k = x.size();
  double log_x_sum = 0.0;
  double lw_sum = 0.0;
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < k; ++i) {
    if (!(x[i] > 0.0)) throw std::domain_error("gs_log_density: x must lie in the open simplex");
    log_x_sum += std::log(x[i]);
    lw_sum += lw[i];
    m = std::max(m, lw[i] - tau * std::log(x[i]));
  }
  double z = 0.0;
  for (std::size_t i = 0; i < k; ++i) z += std::exp(lw[i] - tau * std::log(x[i]) - m);
  const double lse = m + std::log(z);
  const double kd = static_cast<double>(k);
  const double value =
      (kd - 1.0) * std::log(tau) + std::lgamma(kd) + lw_sum - (tau + 1.0) * log_x_sum - kd * lse;
  if (!gx.empty()) {
    for (std::size_t i = 0; i < k; ++i) {
      const double w = std::exp(lw[i] - tau * std::log(x[i]) - lse);
      glw[i] += upstream * (1.0 - kd * w);
      gx[i] += upstream * (-(tau + 1.0) + kd * tau * w) / x[i];
    }
  }
  return value;
}

void gs_density_backward(Trace& t, std::uint32_t id) {
  const double g = t.raw_grad(id)[0];
  const auto px = t.parents(id)[0];
  const auto pw = t.parents(id)[1];
  const auto x = t.raw_value(px);
  const auto lw = t.raw_value(pw);
  auto gx = t.mutable_grad(px);
  auto glw = t.mutable_grad(pw);
  const double tau = t.aux(id)[0];
  for_each_block(t.iaux(id), x.size(), [&](std::size_t off, std::size_t k) {
    gs_block(x.subspan(off, k), lw.subspan(off, k), tau, gx.subspan(off, k), glw.subspan(off, k), g);
  });
}

}  // namespace

// --- SeededRng -------------------------------------------------------------------

double SeededRng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double SeededRng::uniform_open() { return std::clamp(uniform(), kUniformFloor, 1.0 - kUniformFloor); }

double SeededRng::normal() {
  std::normal_distribution<double> dist(0.0, 1.0);
  return dist(engine_);
}

double SeededRng::log_gamma(double shape) {
  if (!(shape > 0.0)) throw InvalidInput("gamma: shape must be positive");
  if (shape < 1.0) {
    std::gamma_distribution<double> boosted(shape + 1.0, 1.0);
    const double g = boosted(engine_);
    return std::log(g) + std::log(uniform_open()) / shape;
  }
  std::gamma_distribution<double> dist(shape, 1.0);
  return std::log(dist(engine_));
}

double SeededRng::gamma(double shape) { return std::exp(log_gamma(shape)); }

int SeededRng::uniform_int(int n) {
  if (n < 1) throw InvalidInput("uniform_int: n must be positive");
  return static_cast<int>(uniform() * n);
}

// --- CategoricalParams / DeltaBase -------------------------------------------------

CategoricalParams::CategoricalParams(Eigen::VectorXd probs) : probs_(std::move(probs)) {
  if (probs_.size() < 1) throw InvalidInput("categorical: empty probability vector");
  for (Eigen::Index i = 0; i < probs_.size(); ++i) {
    if (!(probs_[i] >= 0.0) || !std::isfinite(probs_[i])) {
      throw InvalidInput("categorical: probabilities must be finite and nonnegative");
    }
  }
  if (std::abs(probs_.sum() - 1.0) > 1e-9) throw InvalidInput("categorical: probabilities must sum to 1");
}

CategoricalParams CategoricalParams::uniform(int k) {
  return CategoricalParams(Eigen::VectorXd::Constant(k, 1.0 / k));
}

DeltaBase::DeltaBase(int atom_, int cardinality_) : atom(atom_), cardinality(cardinality_) {
  if (cardinality < 1 || atom < 0 || atom >= cardinality) throw InvalidInput("delta base: atom out of range");
}

Eigen::VectorXd DeltaBase::probs() const {
  Eigen::VectorXd p = Eigen::VectorXd::Zero(cardinality);
  p[atom] = 1.0;
  return p;
}

// --- sampling --------------------------------------------------------------------

int sample_index(const Eigen::Ref<const Eigen::VectorXd>& weights, SeededRng& rng) {
  const double total = weights.sum();
  const double target = rng.uniform() * total;
  double acc = 0.0;
  int last_positive = 0;
  for (Eigen::Index i = 0; i < weights.size(); ++i) {
    if (weights[i] <= 0.0) continue;
    acc += weights[i];
    last_positive = static_cast<int>(i);
    if (target < acc) return static_cast<int>(i);
  }
  return last_positive;
}

int sample_categorical(const CategoricalParams& p, SeededRng& rng) { return sample_index(p.probs(), rng); }

double gumbel_from_uniform(double u) { return -std::log(-std::log(u)); }

double sample_gumbel(SeededRng& rng) { return gumbel_from_uniform(rng.uniform_open()); }

Eigen::VectorXd sample_gumbel_vector(Eigen::Index n, SeededRng& rng) {
  Eigen::VectorXd g(n);
  for (Eigen::Index i = 0; i < n; ++i) g[i] = sample_gumbel(rng);
  return g;
}

Eigen::VectorXd gumbel_softmax_sample(const Eigen::VectorXd& logits, Temperature tau, SeededRng& rng) {
  const Eigen::VectorXd z = (logits + sample_gumbel_vector(logits.size(), rng)) / tau.value();
  const Eigen::VectorXd e = (z.array() - z.maxCoeff()).exp();
  return e / e.sum();
}

Var gumbel_softmax_sample(Trace& t, Var logits, Temperature tau, SeededRng& rng, Blocks blocks) {
  const Eigen::VectorXd noise = sample_gumbel_vector(static_cast<Eigen::Index>(t.size(logits)), rng);
  return softmax_temp(t, add_constant(t, logits, noise), tau, blocks);
}

// --- densities ---------------------------------------------------------------------

double gs_log_density_logits(const Eigen::Ref<const Eigen::VectorXd>& x,
                             const Eigen::Ref<const Eigen::VectorXd>& log_weights, double tau) {
  if (x.size() != log_weights.size()) throw InvalidInput("gs_log_density: length mismatch");
  return gs_block({x.data(), static_cast<std::size_t>(x.size())},
                  {log_weights.data(), static_cast<std::size_t>(log_weights.size())}, tau, {}, {}, 0.0);
}

double gs_log_density(const Eigen::VectorXd& x, const CategoricalParams& p, Temperature tau) {
  if (x.size() != p.probs().size()) throw InvalidInput("gs_log_density: length mismatch");
  const Eigen::VectorXd lw = p.probs().array().log();
  return gs_log_density_logits(x, lw, tau.value());
}

Var gs_log_density(Trace& t, Var x, Var log_weights, Temperature tau, Blocks blocks) {
  const std::size_t n = t.size(x);
  if (t.size(log_weights) != n) throw InvalidInput("gs_log_density: length mismatch");
  const double tv = tau.value();
  const Var out = t.push(gs_density_backward, 1, {x, log_weights}, std::span<const double>(&tv, 1), blocks);
  const auto xv = t.raw_value(x.id);
  const auto lw = t.raw_value(log_weights.id);
  double total = 0.0;
  for_each_block(blocks, n, [&](std::size_t off, std::size_t k) {
    total += gs_block(xv.subspan(off, k), lw.subspan(off, k), tv, {}, {}, 0.0);
  });
  t.mutable_value(out)[0] = total;
  return out;
}

// --- Dirichlet / entropy -------------------------------------------------------------

CategoricalParams sample_dirichlet_base(double alpha, int k, SeededRng& rng) {
  if (!(alpha > 0.0)) throw InvalidInput("dirichlet: alpha must be positive");
  if (alpha >= 1e6) return CategoricalParams::uniform(k);
  Eigen::VectorXd log_g(k);
  for (int i = 0; i < k; ++i) log_g[i] = rng.log_gamma(alpha);
  const double m = log_g.maxCoeff();
  Eigen::VectorXd p = (log_g.array() - m).exp();
  p /= p.sum();
  return CategoricalParams(std::move(p));
}

double categorical_entropy(const Eigen::Ref<const Eigen::VectorXd>& probs) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    if (probs[i] > 0.0) h -= probs[i] * std::log(probs[i]);
  }
  return h;
}

double categorical_entropy(const CategoricalParams& p) { return categorical_entropy(p.probs()); }

}  // namespace mdnf
