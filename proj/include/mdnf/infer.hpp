#pragma once

// Variational objectives and training loops.

#include <Eigen/Core>

#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mdnf/mixture.hpp"
#include "mdnf/model.hpp"

namespace mdnf {

struct AnnealSchedule {
  double tau0 = 10.0;
  double gamma = 0.0;
};

/// tau0 * exp(-gamma * t).
Temperature anneal(const AnnealSchedule& s, double t);

enum class Algorithm { vif, bvif, bvi, gs, st_gs };

Algorithm parse_algorithm(const std::string& name);
std::string algorithm_name(Algorithm a);
bool is_mdnf(Algorithm a);

/// How the MDNF objective draws its samples. `automatic` uses the
/// deterministic one-draw-per-component allocation when every base is a delta.
enum class Sampling { automatic, random, deterministic };

struct FitConfig {
  Algorithm algorithm = Algorithm::vif;
  int flows = 1;      // B
  int samples = 100;  // S
  int iterations = 10000;
  double learning_rate = 0.01;
  std::uint64_t seed = 0;
  AnnealSchedule schedule;
  double tau_p = 1.0;  // relaxed prior temperature, gs only
  Sampling sampling = Sampling::automatic;
  /// Symmetric Dirichlet concentration for the base distributions; delta
  /// bases at category 0 when unset.
  std::optional<double> base_alpha;
  /// Evaluate external ELBO and KL every `checkpoint_every` iterations (and
  /// at the end); 0 evaluates only the final parameters.
  int checkpoint_every = 100;
  /// Sample count of the discretized external ELBO for GS methods.
  int external_samples = 10000;
  /// Exact posterior table over the model's latent configurations, for KL.
  std::shared_ptr<const Eigen::VectorXd> exact_posterior;
  /// Starting mixture (warm start); flows and bases are reused. vif resets
  /// the weights to uniform, bvif relearns them stage by stage.
  std::optional<FlowMixture> initial;
  /// Added to the iteration counter in the annealing schedule.
  int anneal_offset = 0;
  /// When the objective is exact (delta bases, deterministic allocation),
  /// each stage ends on its best iterate instead of the last one.
  bool keep_best = true;
};

struct IterationRecord {
  int iteration = 0;
  double internal_objective = 0.0;
  double tau = 0.0;
  double wallclock_ms = 0.0;
  std::optional<double> external_elbo;
  std::optional<double> kl_exact;
};

struct Snapshot {
  int iteration = 0;
  std::optional<FlowMixture> mixture;
  Eigen::VectorXd logits;  // gs methods
};

struct FitReport {
  Algorithm algorithm = Algorithm::vif;
  std::vector<int> cardinalities;
  std::vector<IterationRecord> records;
  std::vector<Snapshot> snapshots;
  std::optional<FlowMixture> mixture;  // mdnf methods
  Eigen::VectorXd logits;              // gs methods, concatenated per dimension
  double final_external_elbo = 0.0;
  std::optional<double> final_kl;
  bool kl_support_violation = false;
  int clipped_gradients = 0;
  int resampled_draws = 0;  // gs draws redrawn after underflow to the simplex boundary
};

/// (1/S) sum_s [log p(D, x_s) - log q(x_s)] with x_s ~ q, on the trace.
Var elbo_estimate(Trace& t, const FlowMixture& m, const TracedMixture& tm, const LatentModel& model, int samples,
                  SeededRng& rng);
/// sum_b rho_b [log p(D, x_b) - log q(x_b)] with one draw per component.
/// Zero variance for delta bases.
Var elbo_deterministic(Trace& t, const FlowMixture& m, const TracedMixture& tm, const LatentModel& model,
                       SeededRng& rng);
/// Value of a fresh elbo_estimate (or elbo_deterministic when samples == 0).
double elbo_value(const FlowMixture& m, const LatentModel& model, int samples, SeededRng& rng);

FitReport fit_vif(const LatentModel& model, const FitConfig& cfg, SeededRng& rng);
FitReport fit_bvif(const LatentModel& model, const FitConfig& cfg, SeededRng& rng);
FitReport fit_bvi(const LatentModel& model, const FitConfig& cfg, SeededRng& rng);
FitReport fit_gs(const LatentModel& model, const FitConfig& cfg, SeededRng& rng);
/// Dispatches on cfg.algorithm with SeededRng(cfg.seed).
FitReport fit(const LatentModel& model, const FitConfig& cfg);

/// Iterations of stage `stage` when `total` are split over `stages`.
int stage_iterations(int total, int stages, int stage);

/// CSV with header iteration,internal_objective,tau_t,external_elbo,kl_exact,wallclock_ms.
/// Wall-clock cells stay empty unless `timing` is set.
void write_report_csv(std::ostream& out, const FitReport& r, bool timing = false);
std::string csv_header();

// --- optimizers ------------------------------------------------------------------------

/// Gradient ascent with a running average of squared gradients.
class RmsProp {
 public:
  explicit RmsProp(double lr, double decay = 0.9, double eps = 1e-8) : lr_(lr), decay_(decay), eps_(eps) {}
  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad);
  void reset() { v_.resize(0); }

 private:
  double lr_, decay_, eps_;
  Eigen::VectorXd v_;
};

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}
  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad);

 private:
  double lr_, b1_, b2_, eps_;
  Eigen::VectorXd m_, v_;
  int t_ = 0;
};

/// Replaces NaN by 0 and clamps to +-1e6; returns the number of entries changed.
int clip_gradient(Eigen::VectorXd& g);

}  // namespace mdnf
