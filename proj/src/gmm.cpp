#include "mdnf/gmm.hpp"

#include <Eigen/Cholesky>
#include <Eigen/LU>
#include <unsupported/Eigen/SpecialFunctions>

#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>

namespace mdnf {

namespace {

double digamma(double x) { return Eigen::numext::digamma(x); }

double expected_log_det(const Eigen::MatrixXd& w, double nu) {
  const auto f = static_cast<int>(w.rows());
  double s = f * std::log(2.0) + std::log(w.determinant());
  for (int i = 1; i <= f; ++i) s += digamma(0.5 * (nu + 1 - i));
  return s;
}

// log B(W, nu): log normalizer of the Wishart density.
double log_wishart_norm(const Eigen::MatrixXd& w, double nu) {
  const auto f = static_cast<double>(w.rows());
  double s = -0.5 * nu * std::log(w.determinant());
  double z = 0.5 * nu * f * std::log(2.0) + 0.25 * f * (f - 1) * std::log(std::numbers::pi);
  for (int i = 1; i <= static_cast<int>(f); ++i) z += std::lgamma(0.5 * (nu + 1 - i));
  return s - z;
}

double log_dirichlet_norm(const Eigen::VectorXd& alpha) {
  double s = std::lgamma(alpha.sum());
  for (Eigen::Index i = 0; i < alpha.size(); ++i) s -= std::lgamma(alpha[i]);
  return s;
}

Eigen::VectorXd expected_log_pi(const GmmState& s) {
  const double total = digamma(s.alpha.sum());
  Eigen::VectorXd e(s.k);
  for (int k = 0; k < s.k; ++k) e[k] = digamma(s.alpha[k]) - total;
  return e;
}

}  // namespace

GmmPrior default_gmm_prior(const Eigen::MatrixXd& data, int k) {
  if (k < 1) throw InvalidInput("gmm: K must be positive");
  if (data.rows() < 1 || data.cols() < 1) throw InvalidInput("gmm: empty data");
  GmmPrior p;
  p.alpha0 = 1.0 / k;
  p.beta0 = 1.0;
  p.m0 = data.colwise().mean().transpose();
  p.w0 = Eigen::MatrixXd::Identity(data.cols(), data.cols());
  p.nu0 = static_cast<double>(data.cols());
  return p;
}

GmmState gmm_init(const Eigen::MatrixXd& data, int k, const GmmPrior& prior) {
  GmmState s;
  s.data = data;
  s.k = k;
  s.prior = prior;
  s.alpha = Eigen::VectorXd::Constant(k, prior.alpha0);
  s.beta = Eigen::VectorXd::Constant(k, prior.beta0);
  s.m = prior.m0.replicate(1, k);
  s.w.assign(static_cast<std::size_t>(k), prior.w0);
  s.nu = Eigen::VectorXd::Constant(k, prior.nu0);
  return s;
}

GmmState gmm_init(const Eigen::MatrixXd& data, int k) { return gmm_init(data, k, default_gmm_prior(data, k)); }

GmmState gmm_m_step(const GmmState& state, const Eigen::MatrixXd& resp) {
  if (resp.rows() != state.points() || resp.cols() != state.k) throw InvalidInput("gmm: responsibilities shape");
  for (Eigen::Index n = 0; n < resp.rows(); ++n) {
    if (resp.row(n).minCoeff() < 0.0 || std::abs(resp.row(n).sum() - 1.0) > 1e-9) {
      throw InvalidInput("gmm: responsibility rows must lie on the simplex");
    }
  }
  GmmState s = state;
  const auto& p = s.prior;
  const auto f = s.features();
  const Eigen::MatrixXd w0_inv = p.w0.inverse();
  for (int k = 0; k < s.k; ++k) {
    const double nk = resp.col(k).sum();
    Eigen::VectorXd xbar = Eigen::VectorXd::Zero(f);
    Eigen::MatrixXd sk = Eigen::MatrixXd::Zero(f, f);
    if (nk > 1e-300) {
      xbar = s.data.transpose() * resp.col(k) / nk;
      const Eigen::MatrixXd centered = s.data.rowwise() - xbar.transpose();
      sk = centered.transpose() * resp.col(k).asDiagonal() * centered / nk;
    }
    s.alpha[k] = p.alpha0 + nk;
    s.beta[k] = p.beta0 + nk;
    s.m.col(k) = (p.beta0 * p.m0 + nk * xbar) / s.beta[k];
    const Eigen::VectorXd diff = xbar - p.m0;
    Eigen::MatrixXd w_inv = w0_inv + nk * sk + (p.beta0 * nk / (p.beta0 + nk)) * diff * diff.transpose();
    w_inv = 0.5 * (w_inv + w_inv.transpose());
    Eigen::LLT<Eigen::MatrixXd> llt(w_inv);
    if (llt.info() != Eigen::Success) {
      std::cerr << "warning: gmm scatter matrix is singular, adding a ridge\n";
      ++s.ridge_count;
      w_inv += 1e-6 * Eigen::MatrixXd::Identity(f, f);
      llt.compute(w_inv);
    }
    s.w[static_cast<std::size_t>(k)] = llt.solve(Eigen::MatrixXd::Identity(f, f));
    s.nu[k] = p.nu0 + nk;
  }
  return s;
}

Eigen::MatrixXd gmm_expected_log(const GmmState& s) {
  const auto f = s.features();
  const Eigen::VectorXd elog_pi = expected_log_pi(s);
  Eigen::MatrixXd ell(s.points(), s.k);
  for (int k = 0; k < s.k; ++k) {
    const auto& w = s.w[static_cast<std::size_t>(k)];
    const double elog_det = expected_log_det(w, s.nu[k]);
    const Eigen::MatrixXd centered = s.data.rowwise() - s.m.col(k).transpose();
    const Eigen::VectorXd quad = (centered * w).cwiseProduct(centered).rowwise().sum();
    ell.col(k) = (elog_pi[k] + 0.5 * elog_det - 0.5 * f * std::log(2 * std::numbers::pi) - 0.5 * f / s.beta[k]) *
                     Eigen::VectorXd::Ones(s.points()) -
                 0.5 * s.nu[k] * quad;
  }
  return ell;
}

Eigen::MatrixXd gmm_responsibilities(const GmmState& state) {
  Eigen::MatrixXd ell = gmm_expected_log(state);
  for (Eigen::Index n = 0; n < ell.rows(); ++n) {
    const double m = ell.row(n).maxCoeff();
    ell.row(n) = (ell.row(n).array() - m).exp();
    ell.row(n) /= ell.row(n).sum();
  }
  return ell;
}

double gmm_elbo(const GmmState& s, const Eigen::MatrixXd& resp, double qz_entropy) {
  const auto& p = s.prior;
  const double f = s.features();
  const double two_pi = 2 * std::numbers::pi;
  const Eigen::VectorXd elog_pi = expected_log_pi(s);
  const Eigen::MatrixXd ell = gmm_expected_log(s);

  double value = resp.cwiseProduct(ell).sum() + qz_entropy;
  // E[log p(pi)] - E[log q(pi)]
  value += log_dirichlet_norm(Eigen::VectorXd::Constant(s.k, p.alpha0)) + (p.alpha0 - 1) * elog_pi.sum();
  value -= log_dirichlet_norm(s.alpha) + (s.alpha.array() - 1).matrix().dot(elog_pi);
  // E[log p(mu, Lambda)] - E[log q(mu, Lambda)]
  const Eigen::MatrixXd w0_inv = p.w0.inverse();
  const double log_b0 = log_wishart_norm(p.w0, p.nu0);
  for (int k = 0; k < s.k; ++k) {
    const auto& w = s.w[static_cast<std::size_t>(k)];
    const double elog_det = expected_log_det(w, s.nu[k]);
    const Eigen::VectorXd dm = s.m.col(k) - p.m0;
    value += 0.5 * (f * std::log(p.beta0 / two_pi) + elog_det - f * p.beta0 / s.beta[k] -
                    p.beta0 * s.nu[k] * dm.dot(w * dm));
    value += log_b0 + 0.5 * (p.nu0 - f - 1) * elog_det - 0.5 * s.nu[k] * (w0_inv * w).trace();
    const double entropy_lambda = -log_wishart_norm(w, s.nu[k]) - 0.5 * (s.nu[k] - f - 1) * elog_det +
                                  0.5 * s.nu[k] * f;
    value -= 0.5 * elog_det + 0.5 * f * std::log(s.beta[k] / two_pi) - 0.5 * f - entropy_lambda;
  }
  return value;
}

double gmm_elbo(const GmmState& s, const Eigen::MatrixXd& resp) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < resp.size(); ++i) {
    const double r = resp.data()[i];
    if (r > 0.0) h -= r * std::log(r);
  }
  return gmm_elbo(s, resp, h);
}

// --- GmmLatent ----------------------------------------------------------------

GmmLatent::GmmLatent(const GmmState& state) : GmmLatent(gmm_expected_log(state)) {}

GmmLatent::GmmLatent(Eigen::MatrixXd expected_log) : ell_(std::move(expected_log)) {
  cards_.assign(static_cast<std::size_t>(ell_.rows()), static_cast<int>(ell_.cols()));
  const Eigen::MatrixXd row_major = ell_.transpose();
  flat_ = Eigen::Map<const Eigen::VectorXd>(row_major.data(), row_major.size());
}

double GmmLatent::log_joint(const Config& x) const {
  if (x.size() != cards_.size()) throw InvalidInput("gmm: configuration has wrong length");
  double s = 0.0;
  for (std::size_t n = 0; n < x.size(); ++n) s += ell_(static_cast<Eigen::Index>(n), x[n]);
  return s;
}

Var GmmLatent::log_joint(Trace& t, Var x) const { return log_lookup(t, x, flat_); }

// --- data ---------------------------------------------------------------------------

Eigen::MatrixXd simulated_three_clusters(int per_cluster, SeededRng& rng) {
  const double centers[3][2] = {{0.0, 2.0}, {1.7, -1.0}, {-1.7, -1.0}};
  Eigen::MatrixXd y(3 * per_cluster, 2);
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < per_cluster; ++i) {
      y(c * per_cluster + i, 0) = centers[c][0] + rng.normal();
      y(c * per_cluster + i, 1) = centers[c][1] + rng.normal();
    }
  }
  return y;
}

Eigen::MatrixXd load_points_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    bool numeric = true;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
      } catch (const std::exception&) {
        numeric = false;
        break;
      }
    }
    if (!numeric) {
      if (first) {
        first = false;
        continue;
      }
      throw InvalidInput("non-numeric row in " + path);
    }
    first = false;
    if (!rows.empty() && row.size() != rows.front().size()) throw InvalidInput("ragged rows in " + path);
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw InvalidInput("no data rows in " + path);
  Eigen::MatrixXd y(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return y;
}

}  // namespace mdnf
