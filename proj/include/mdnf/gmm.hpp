#pragma once

// Variational Bayesian Gaussian mixture with conjugate Dirichlet and
// Gaussian-Wishart priors (standard textbook updates).

#include <Eigen/Core>

#include <string>
#include <vector>

#include "mdnf/dists.hpp"
#include "mdnf/model.hpp"

namespace mdnf {

struct GmmPrior {
  double alpha0 = 1.0;
  double beta0 = 1.0;
  Eigen::VectorXd m0;
  Eigen::MatrixXd w0;
  double nu0 = 1.0;
};

/// alpha0 = 1/K, beta0 = 1, m0 = data mean, W0 = I, nu0 = feature count.
GmmPrior default_gmm_prior(const Eigen::MatrixXd& data, int k);

struct GmmState {
  Eigen::MatrixXd data;  // one point per row
  int k = 1;
  GmmPrior prior;
  Eigen::VectorXd alpha;
  Eigen::VectorXd beta;
  Eigen::MatrixXd m;  // features x K
  std::vector<Eigen::MatrixXd> w;
  Eigen::VectorXd nu;
  int ridge_count = 0;  // M-steps that needed a ridge

  int points() const { return static_cast<int>(data.rows()); }
  int features() const { return static_cast<int>(data.cols()); }
};

/// State whose variational posteriors equal the priors.
GmmState gmm_init(const Eigen::MatrixXd& data, int k, const GmmPrior& prior);
GmmState gmm_init(const Eigen::MatrixXd& data, int k);

/// Conjugate updates from responsibilities (points x K, rows on the simplex).
GmmState gmm_m_step(const GmmState& state, const Eigen::MatrixXd& resp);

/// Expected log joint per point and cluster:
/// E[log pi_k] + E[log|Lambda_k|]/2 - F/2 log(2 pi) - E[(y - mu_k)' Lambda_k (y - mu_k)]/2.
Eigen::MatrixXd gmm_expected_log(const GmmState& state);
/// Closed-form E-step.
Eigen::MatrixXd gmm_responsibilities(const GmmState& state);
/// Evidence lower bound for factor q(Z) with marginals `resp` and entropy
/// `qz_entropy`, and the current q(pi, mu, Lambda).
double gmm_elbo(const GmmState& state, const Eigen::MatrixXd& resp, double qz_entropy);
/// Same with the mean-field entropy of `resp`.
double gmm_elbo(const GmmState& state, const Eigen::MatrixXd& resp);

/// E-step target: one latent dimension per point, linear in the one-hot rows.
class GmmLatent : public LatentModel {
 public:
  explicit GmmLatent(const GmmState& state);
  explicit GmmLatent(Eigen::MatrixXd expected_log);

  const std::vector<int>& cardinalities() const override { return cards_; }
  double log_joint(const Config& x) const override;
  Var log_joint(Trace& t, Var x) const override;
  const Eigen::MatrixXd& table() const { return ell_; }

 private:
  Eigen::MatrixXd ell_;
  Eigen::VectorXd flat_;
  std::vector<int> cards_;
};

/// Three unit-covariance clusters centred at (0, 2), (1.7, -1), (-1.7, -1),
/// `per_cluster` points each, cluster-major order.
Eigen::MatrixXd simulated_three_clusters(int per_cluster, SeededRng& rng);
/// Numeric CSV, one point per row; a non-numeric first line is skipped.
Eigen::MatrixXd load_points_csv(const std::string& path);

}  // namespace mdnf
