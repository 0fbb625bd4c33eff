#pragma once

// Seeded, parallel runners for the benchmark studies. Every cell owns
// a random stream derived from (master seed, replicate), so a replicate uses
// the same seed under every algorithm, temperature and base setting.

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mdnf/bayesnet.hpp"
#include "mdnf/flows.hpp"
#include "mdnf/gmm.hpp"
#include "mdnf/infer.hpp"

namespace mdnf {

/// Logical cores, at least 1.
int default_workers();
/// splitmix64 mix of the master seed and a replicate index.
std::uint64_t cell_seed(std::uint64_t master, std::uint64_t replicate);
/// Runs body(0..n-1) on up to `workers` threads (0 = default_workers()).
/// The first exception thrown by a body is rethrown after all threads join.
void parallel_for(int n, int workers, const std::function<void(int)>& body);

struct Percentiles {
  double p25 = 0.0;
  double p50 = 0.0;
  double p75 = 0.0;
  int count = 0;
};
/// Linear-interpolation percentiles; NaN entries are dropped.
Percentiles percentiles(std::vector<double> values);

/// Final numbers of one fit; failures keep the message and NaN values.
struct RunOutcome {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double elbo = 0.0;
  double kl = 0.0;
};

// --- temperature grid --------------------------------------------------------------------

enum class GridMethod { mdnf, gs, st_gs };
GridMethod parse_grid_method(const std::string& name);
std::string grid_method_name(GridMethod m);

struct TempGridSpec {
  GridMethod method = GridMethod::mdnf;
  std::vector<double> taus;
  std::vector<double> tau_ps{1.0};  // ignored by mdnf
  int replicates = 1;
  std::uint64_t master_seed = 0;
  /// Iterations, flows, samples, learning rate and gamma; the algorithm is
  /// vif for mdnf unless an mdnf algorithm is set.
  FitConfig base;
  int workers = 0;
  bool keep_reports = false;
};

struct TempGridCell {
  double tau = 0.0;
  double tau_p = 0.0;
  int replicate = 0;
  RunOutcome outcome;
  std::optional<FitReport> report;
};

/// Cells ordered by tau, then tau_p, then replicate.
std::vector<TempGridCell> run_temp_grid(const BnPosterior& model, const TempGridSpec& spec);
void write_temp_grid_csv(std::ostream& out, GridMethod method, const std::vector<TempGridCell>& cells);
/// Median final KL per (tau, tau_p).
void write_temp_grid_summary(std::ostream& out, GridMethod method, const std::vector<TempGridCell>& cells);

// --- algorithm and B comparison ----------------------------------------------------------

struct AlgoCompareSpec {
  std::vector<Algorithm> algorithms;
  std::vector<int> flows;
  int replicates = 10;
  std::uint64_t master_seed = 0;
  FitConfig base;
  int workers = 0;
};

struct AlgoCell {
  Algorithm algorithm = Algorithm::vif;
  int flows = 1;
  int replicate = 0;
  RunOutcome outcome;
};

struct AlgoSummary {
  Algorithm algorithm = Algorithm::vif;
  int flows = 1;
  Percentiles elbo;
  Percentiles kl;
  int failures = 0;
};

/// Cells ordered by algorithm, then flows, then replicate. gs methods ignore
/// the flow count.
std::vector<AlgoCell> run_algo_comparison(const BnPosterior& model, const AlgoCompareSpec& spec);
std::vector<AlgoSummary> summarize(const std::vector<AlgoCell>& cells);
void write_algo_csv(std::ostream& out, const std::vector<AlgoCell>& cells);
void write_algo_summary(std::ostream& out, const std::vector<AlgoSummary>& rows);

// --- base distribution sweep -------------------------------------------------------------

struct BaseSweepSpec {
  std::vector<double> alphas;
  int flows = 40;
  int replicates = 5;
  std::uint64_t master_seed = 0;
  FitConfig base;  // vif settings
  int workers = 0;
};

struct BaseCell {
  double alpha = 0.0;
  int replicate = 0;
  RunOutcome outcome;
};

struct BaseSummary {
  double alpha = 0.0;
  Percentiles kl;
  Percentiles elbo;
  int failures = 0;
};

/// Cells ordered by alpha (as given), then replicate.
std::vector<BaseCell> run_base_sweep(const BnPosterior& model, const BaseSweepSpec& spec);
/// One row per entry of `alphas`, duplicates included.
std::vector<BaseSummary> summarize(const std::vector<BaseCell>& cells, const std::vector<double>& alphas);
void write_base_csv(std::ostream& out, const std::vector<BaseCell>& cells);
void write_base_summary(std::ostream& out, const std::vector<BaseSummary>& rows);

// --- permutation recovery ----------------------------------------------------------------

/// Target distributions for K = 5 and K = 7.
Eigen::VectorXd recovery_target(int k);

struct RecoverySpec {
  int k = 5;
  FlowKind kind = FlowKind::partial;
  /// loc_scale depth; partial stacks always use the full bubble-sort network.
  int layers = 10;
  int sigma = 1;  // loc_scale layers
  int runs = 40;
  int max_iterations = 5000;
  double learning_rate = 0.1;
  double tau = 1.0;
  int batch = 100;  // samples of x per step; 0 uses the exact expectation
  /// Layers start at the identity; the other logits sit jitter * |N(0, 1)|
  /// below it so that layers on the same positions do not move in lockstep.
  double init_jitter = 0.1;
  std::uint64_t master_seed = 0;
  int workers = 0;
};

struct RecoveryRun {
  std::vector<int> shuffle;  // p_u[i] = p_x[shuffle[i]]
  bool success = false;
  int iterations = 0;  // updates taken before the stack first recovered p_x
  std::vector<int> permutation;  // final stack, perm[u] = forward_index(u)
};

struct RecoveryResult {
  double success_fraction = 0.0;
  double median_iterations = 0.0;  // over successful runs, NaN if none
  std::vector<RecoveryRun> runs;
};

FlowStack recovery_stack(const RecoverySpec& spec);
/// Maximum-likelihood fit of `stack` to samples of p_x under base p_u;
/// stops as soon as the pushforward of p_u equals p_x.
RecoveryRun recover_permutation(const Eigen::VectorXd& p_x, const std::vector<int>& shuffle, FlowStack stack,
                                const RecoverySpec& spec, SeededRng& rng);
RecoveryResult run_permutation_recovery(const RecoverySpec& spec);
void write_recovery_csv(std::ostream& out, const RecoveryResult& r);
void write_recovery_summary(std::ostream& out, const RecoverySpec& spec, const RecoveryResult& r);

// --- GMM variational EM ------------------------------------------------------------------

struct GmmCompareSpec {
  int k = 3;
  std::vector<Algorithm> algorithms{Algorithm::vif};  // vif or bvif
  std::vector<int> flows{1};
  int replicates = 10;
  int em_steps = 50;
  int inner_iterations = 200;
  double learning_rate = 0.1;
  AnnealSchedule schedule{10.0, 0.01};
  std::uint64_t master_seed = 0;
  int workers = 0;
};

struct GmmTrace {
  std::vector<double> elbo;  // after each EM step
  Eigen::MatrixXd resp;      // final responsibilities
  /// Closed-form responsibilities for the clusters the final E-step saw.
  Eigen::MatrixXd estep_reference;
  GmmState state;
};

/// Means at K distinct random points, W = W0 and every count at N/K above
/// its prior value.
GmmState gmm_random_start(const Eigen::MatrixXd& data, int k, SeededRng& rng);
/// Closed-form variational EM.
GmmTrace gmm_closed_form_em(GmmState start, int steps);
/// EM whose E-step fits a delta-base MDNF over all assignments, warm-started
/// from the previous step; annealing continues at t = step + iteration.
GmmTrace gmm_mdnf_em(GmmState start, int steps, const FitConfig& estep, SeededRng& rng);
/// Marginal assignment probabilities and exact entropy of a delta mixture.
Eigen::MatrixXd mixture_responsibilities(const FlowMixture& m, double& entropy);
/// Fraction of points whose argmax cluster agrees, maximized over relabelings.
double assignment_agreement(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

struct GmmCell {
  Algorithm algorithm = Algorithm::vif;
  int flows = 1;
  int replicate = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::vector<double> elbo;  // MDNF E-step trace
  std::vector<double> closed_form;  // same start, closed-form E-step
  /// Final MDNF E-step against the closed-form E-step on the same clusters.
  double agreement = 0.0;
  /// Final labels of the MDNF run against those of the closed-form run.
  double run_agreement = 0.0;
};

/// Each replicate draws one random start shared by the closed-form run and
/// every (algorithm, flows) cell.
std::vector<GmmCell> run_gmm_comparison(const Eigen::MatrixXd& data, const GmmCompareSpec& spec);
void write_gmm_csv(std::ostream& out, const std::vector<GmmCell>& cells);

}  // namespace mdnf
