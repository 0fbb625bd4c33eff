#pragma once

// External evaluation of fitted approximations.

#include <Eigen/Core>

#include <functional>
#include <vector>

#include "mdnf/infer.hpp"
#include "mdnf/mixture.hpp"
#include "mdnf/model.hpp"

namespace mdnf {

inline constexpr std::int64_t kEnumerationCap = 1000000;

struct KlResult {
  double value = 0.0;
  bool support_violation = false;  // value is +inf
};

/// KL(q || p) with 0 log 0 = 0.
KlResult kl_to_exact(const Eigen::VectorXd& q, const Eigen::VectorXd& p);

/// Probability of every configuration (first dimension slowest).
Eigen::VectorXd mdnf_q_table(const FlowMixture& m, std::int64_t cap = kEnumerationCap);
/// Product of per-dimension softmax(logits) over every configuration.
Eigen::VectorXd factorized_q_table(const Eigen::VectorXd& logits, const std::vector<int>& cards,
                                   std::int64_t cap = kEnumerationCap);

/// Exact E_q[log p(D, x) - log q(x)]. Delta-base mixtures are evaluated on
/// their support, any size; otherwise by enumeration under the cap.
double exact_elbo(const FlowMixture& m, const LatentModel& model, std::int64_t cap = kEnumerationCap);
/// Same for a factorized categorical q given by logits.
double exact_elbo(const Eigen::VectorXd& logits, const LatentModel& model, std::int64_t cap = kEnumerationCap);

struct Estimate {
  double value = 0.0;
  double standard_error = 0.0;
};

/// Joint term from S argmax(logits + Gumbel) draws plus the entropy of the
/// per-dimension empirical frequencies; jackknife standard error.
Estimate gs_discretized_elbo(const Eigen::VectorXd& logits, const LatentModel& model, int samples, SeededRng& rng);

struct GapPoint {
  int iteration = 0;
  double internal = 0.0;
  double external = 0.0;
};

using SnapshotEvaluator = std::function<double(const Snapshot&)>;
/// Internal objective of each checkpointed iteration next to the external
/// evaluator applied to the stored snapshot.
std::vector<GapPoint> objective_gap_trace(const FitReport& r, const SnapshotEvaluator& external);

struct VarianceStats {
  double mean = 0.0;
  double std = 0.0;
  double relative = 0.0;  // std / |mean|
  std::vector<double> values;
};

/// Statistics of R independent internal ELBO estimates with S samples each;
/// samples == 0 selects the deterministic allocation.
VarianceStats elbo_variance_study(const FlowMixture& m, const LatentModel& model, int repetitions, int samples,
                                  SeededRng& rng);

}  // namespace mdnf
