#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <random>

#include "mdnf/diffcore.hpp"

namespace mdnf {

/// Deterministic random source. Identical seed and call sequence give
/// bitwise-identical draws.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : engine_(seed), seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  /// Uniform clamped to [1e-12, 1 - 1e-12].
  double uniform_open();
  double normal();
  /// Gamma(shape, 1). Shapes below one use the boosted-shape identity
  /// Gamma(a) = Gamma(a + 1) * U^(1/a), returned in log space by log_gamma().
  double gamma(double shape);
  double log_gamma(double shape);
  int uniform_int(int n);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
};

/// Probabilities of one categorical variable.
class CategoricalParams {
 public:
  explicit CategoricalParams(Eigen::VectorXd probs);
  static CategoricalParams uniform(int k);

  const Eigen::VectorXd& probs() const { return probs_; }
  int cardinality() const { return static_cast<int>(probs_.size()); }

 private:
  Eigen::VectorXd probs_;
};

/// Categorical with all mass on `atom`.
struct DeltaBase {
  int atom = 0;
  int cardinality = 1;

  DeltaBase(int atom_, int cardinality_);
  Eigen::VectorXd probs() const;
};

int sample_categorical(const CategoricalParams& p, SeededRng& rng);
/// Inverse-CDF draw from unnormalized nonnegative weights.
int sample_index(const Eigen::Ref<const Eigen::VectorXd>& weights, SeededRng& rng);

/// -log(-log(u)) for u in (0, 1).
double gumbel_from_uniform(double u);
double sample_gumbel(SeededRng& rng);
Eigen::VectorXd sample_gumbel_vector(Eigen::Index n, SeededRng& rng);

/// Untraced Gumbel-Softmax draw of one block.
Eigen::VectorXd gumbel_softmax_sample(const Eigen::VectorXd& logits, Temperature tau, SeededRng& rng);
/// Traced draw: softmax((logits + g) / tau) per block, g ~ Gumbel(0, 1).
Var gumbel_softmax_sample(Trace& t, Var logits, Temperature tau, SeededRng& rng, Blocks blocks = {});

/// Log density of the Gumbel-Softmax (Concrete) distribution at an interior
/// simplex point. Throws std::domain_error if any x_k is zero.
double gs_log_density(const Eigen::VectorXd& x, const CategoricalParams& p, Temperature tau);
/// Same density with unnormalized class log-weights; invariant to shifts of
/// `log_weights` within a block.
double gs_log_density_logits(const Eigen::Ref<const Eigen::VectorXd>& x,
                             const Eigen::Ref<const Eigen::VectorXd>& log_weights, double tau);
/// Traced sum over blocks of the Gumbel-Softmax log density of `x` given
/// class log-weights `log_weights`; differentiable in both.
Var gs_log_density(Trace& t, Var x, Var log_weights, Temperature tau, Blocks blocks = {});

/// Symmetric Dirichlet draw. alpha >= 1e6 returns the exact uniform vector.
CategoricalParams sample_dirichlet_base(double alpha, int k, SeededRng& rng);

/// Entropy in nats with 0 log 0 = 0.
double categorical_entropy(const CategoricalParams& p);
double categorical_entropy(const Eigen::Ref<const Eigen::VectorXd>& probs);

}  // namespace mdnf
