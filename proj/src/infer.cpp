#include "mdnf/infer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "mdnf/eval.hpp"

namespace mdnf {

Temperature anneal(const AnnealSchedule& s, double t) {
  if (t < 0) throw InvalidInput("anneal: iteration must be nonnegative");
  if (!(s.tau0 > 0) || !(s.gamma >= 0)) throw InvalidInput("anneal: need tau0 > 0 and gamma >= 0");
  const double tau = s.tau0 * std::exp(-s.gamma * t);
  return Temperature(std::max(tau, std::numeric_limits<double>::min()));
}

Algorithm parse_algorithm(const std::string& name) {
  if (name == "vif") return Algorithm::vif;
  if (name == "bvif") return Algorithm::bvif;
  if (name == "bvi") return Algorithm::bvi;
  if (name == "gs") return Algorithm::gs;
  if (name == "st-gs" || name == "st_gs") return Algorithm::st_gs;
  throw InvalidInput("unknown algorithm '" + name + "'");
}

std::string algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::vif: return "vif";
    case Algorithm::bvif: return "bvif";
    case Algorithm::bvi: return "bvi";
    case Algorithm::gs: return "gs";
    case Algorithm::st_gs: return "st-gs";
  }
  return "?";
}

bool is_mdnf(Algorithm a) { return a == Algorithm::vif || a == Algorithm::bvif || a == Algorithm::bvi; }

int stage_iterations(int total, int stages, int stage) {
  return total / stages + (stage < total % stages ? 1 : 0);
}

// --- optimizers --------------------------------------------------------------------------

void RmsProp::step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
  if (v_.size() != grad.size()) v_ = Eigen::VectorXd::Zero(grad.size());
  v_ = decay_ * v_ + (1 - decay_) * grad.cwiseAbs2();
  params.array() += lr_ * grad.array() / (v_.array().sqrt() + eps_);
}

void Adam::step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
  if (m_.size() != grad.size()) {
    m_ = Eigen::VectorXd::Zero(grad.size());
    v_ = Eigen::VectorXd::Zero(grad.size());
    t_ = 0;
  }
  ++t_;
  m_ = b1_ * m_ + (1 - b1_) * grad;
  v_ = b2_ * v_ + (1 - b2_) * grad.cwiseAbs2();
  const double c1 = 1 - std::pow(b1_, t_);
  const double c2 = 1 - std::pow(b2_, t_);
  params.array() += lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
}

int clip_gradient(Eigen::VectorXd& g) {
  int n = 0;
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    if (std::isnan(g[i])) {
      g[i] = 0.0;
      ++n;
    } else if (std::isinf(g[i])) {
      g[i] = g[i] > 0 ? 1e6 : -1e6;
      ++n;
    }
  }
  return n;
}

// --- objectives ----------------------------------------------------------------------------

namespace {

bool all_delta(const FlowMixture& m) {
  for (int b = 0; b < m.components(); ++b) {
    for (const auto& base : m.component(b).bases) {
      if (!is_delta(base)) return false;
    }
  }
  return true;
}

bool deterministic_for(const FlowMixture& m, Sampling s) {
  if (s == Sampling::automatic) return all_delta(m);
  return s == Sampling::deterministic;
}

Var draw_term(Trace& t, const FlowMixture& m, const TracedMixture& tm, const LatentModel& model, int b,
              SeededRng& rng) {
  const Var x = sample_component(t, m, tm.comps[static_cast<std::size_t>(b)], b, rng);
  return sub(t, model.log_joint(t, x), log_prob(t, m, tm, x));
}

// E[log p(D, x) - log q(x)] for x drawn from the components `members`
// selected with probabilities `w`; q is the full traced mixture.
Var group_objective(Trace& t, const FlowMixture& m, const TracedMixture& tm, const LatentModel& model,
                    const std::vector<int>& members, const Eigen::VectorXd& w, bool deterministic, int samples,
                    SeededRng& rng) {
  std::vector<Var> terms;
  if (deterministic) {
    for (std::size_t i = 0; i < members.size(); ++i) {
      if (w[static_cast<Eigen::Index>(i)] <= 0.0) continue;
      terms.push_back(scale(t, draw_term(t, m, tm, model, members[i], rng), w[static_cast<Eigen::Index>(i)]));
    }
  } else {
    for (int s = 0; s < samples; ++s) {
      const int i = sample_index(w, rng);
      terms.push_back(draw_term(t, m, tm, model, members[static_cast<std::size_t>(i)], rng));
    }
    return scale(t, sum(t, terms), 1.0 / samples);
  }
  return sum(t, terms);
}

std::vector<int> iota(int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

void validate(const FitConfig& cfg) {
  if (cfg.flows < 1) throw InvalidInput("number of flows must be at least 1");
  if (cfg.samples < 1) throw InvalidInput("sample count must be at least 1");
  if (cfg.iterations < 0) throw InvalidInput("iterations must be nonnegative");
  if (!(cfg.learning_rate > 0)) throw InvalidInput("learning rate must be positive");
  if (!(cfg.schedule.tau0 > 0) || !(cfg.schedule.gamma >= 0)) throw InvalidInput("need tau > 0 and gamma >= 0");
  if (!(cfg.tau_p > 0)) throw InvalidInput("tau_p must be positive");
  if (cfg.base_alpha && !(*cfg.base_alpha > 0)) throw InvalidInput("base alpha must be positive");
  if (cfg.external_samples < 1) throw InvalidInput("external sample count must be positive");
}

void check_oracle(const LatentModel& model, const FitConfig& cfg) {
  if (!cfg.exact_posterior) return;
  std::int64_t count = 1;
  for (int k : model.cardinalities()) count *= k;
  if (cfg.exact_posterior->size() != count) throw InvalidInput("exact posterior table does not match the model");
}

FlowMixture initial_mixture(const std::vector<int>& cards, const FitConfig& cfg, SeededRng& rng) {
  if (!cfg.base_alpha) return FlowMixture::shift_only_delta(cards, cfg.flows, rng);
  std::vector<std::vector<BaseDist>> bases(static_cast<std::size_t>(cfg.flows));
  for (auto& comp : bases) {
    for (int k : cards) comp.emplace_back(sample_dirichlet_base(*cfg.base_alpha, k, rng));
  }
  return FlowMixture::shift_only(cards, std::move(bases), rng);
}

std::uint64_t eval_seed(std::uint64_t seed) { return seed ^ 0x9e3779b97f4a7c15ULL; }

class Clock {
 public:
  double ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

bool is_checkpoint(const FitConfig& cfg, int it) { return cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0; }

void evaluate_mixture(const FlowMixture& m, const LatentModel& model, const FitConfig& cfg, SeededRng& eval_rng,
                      double& external, std::optional<double>& kl, bool& violation) {
  if (all_delta(m) || m.config_count() <= kEnumerationCap) {
    external = exact_elbo(m, model);
  } else {
    external = elbo_value(m, model, cfg.external_samples, eval_rng);
  }
  if (cfg.exact_posterior) {
    const KlResult r = kl_to_exact(mdnf_q_table(m), *cfg.exact_posterior);
    kl = r.value;
    violation = r.support_violation;
  }
}

void checkpoint_mixture(const FlowMixture& m, const LatentModel& model, const FitConfig& cfg, SeededRng& eval_rng,
                        IterationRecord& rec, FitReport& rep) {
  double external = 0.0;
  std::optional<double> kl;
  bool violation = false;
  evaluate_mixture(m, model, cfg, eval_rng, external, kl, violation);
  rec.external_elbo = external;
  rec.kl_exact = kl;
  Snapshot s;
  s.iteration = rec.iteration;
  s.mixture = m;
  rep.snapshots.push_back(std::move(s));
}

void finish_mixture(const FlowMixture& m, const LatentModel& model, const FitConfig& cfg, SeededRng& eval_rng,
                    FitReport& rep) {
  evaluate_mixture(m, model, cfg, eval_rng, rep.final_external_elbo, rep.final_kl, rep.kl_support_violation);
  rep.mixture = m;
}

[[noreturn]] void diverged(int it, double value) {
  std::ostringstream msg;
  msg << "objective diverged at iteration " << it << " (value " << value << ")";
  throw std::runtime_error(msg.str());
}

// One boosting stage (or the whole VIF run when `weight` is false): trains
// the flows of `trainable` components and, with `weight`, the logit of the
// newest component's weight against the frozen mixture of the others.
struct StageSpec {
  std::vector<int> trainable;
  bool train_flows = true;
  bool weight = false;
  int iterations = 0;
};

void run_stage(FlowMixture& m, const StageSpec& spec, const LatentModel& model, const FitConfig& cfg,
               SeededRng& rng, SeededRng& eval_rng, const Clock& clock, int& global_it, FitReport& rep) {
  const bool det = deterministic_for(m, cfg.sampling);
  const int nb = m.components();
  std::vector<RmsProp> opts(static_cast<std::size_t>(nb), RmsProp(cfg.learning_rate));
  RmsProp weight_opt(cfg.learning_rate);
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(1);
  Eigen::VectorXd rho_old;
  const bool keep = cfg.keep_best && det && all_delta(m);
  std::optional<FlowMixture> best;
  double best_value = -std::numeric_limits<double>::infinity();
  if (spec.weight) {
    rho_old = m.rho().head(nb - 1) / m.rho().head(nb - 1).sum();
    Eigen::VectorXd rho(nb);
    rho << 0.5 * rho_old, 0.5;
    m.set_rho(rho);
  }
  for (int i = 0; i < spec.iterations; ++i, ++global_it) {
    const Temperature tau = anneal(cfg.schedule, global_it + cfg.anneal_offset);
    Trace t;
    Var obj;
    Var theta_leaf;
    TracedMixture tm;
    if (spec.weight) {
      theta_leaf = t.leaf(theta);
      const Var rho = sigmoid(t, theta_leaf);
      const Var keep = one_minus(t, rho);
      const Var old_w = mul(t, keep, t.constant(rho_old));
      const std::vector<Var> parts{old_w, rho};
      tm = trace_mixture(t, m, tau, concat(t, parts));
      const Var g_old = group_objective(t, m, tm, model, iota(nb - 1), rho_old, det, cfg.samples, rng);
      const Var g_new = group_objective(t, m, tm, model, {nb - 1}, Eigen::VectorXd::Ones(1), det, cfg.samples, rng);
      const std::vector<Var> both{mul(t, keep, g_old), mul(t, rho, g_new)};
      obj = sum(t, both);
    } else {
      tm = trace_mixture(t, m, tau);
      obj = group_objective(t, m, tm, model, iota(nb), m.rho(), det, cfg.samples, rng);
    }
    const double value = t.scalar_value(obj);
    if (!std::isfinite(value)) diverged(global_it, value);
    if (keep && value > best_value) {
      best_value = value;
      best = m;
    }

    IterationRecord rec;
    rec.iteration = global_it;
    rec.internal_objective = value;
    rec.tau = tau.value();
    if (is_checkpoint(cfg, global_it)) checkpoint_mixture(m, model, cfg, eval_rng, rec, rep);

    t.reverse_sweep(obj);
    if (spec.train_flows) {
      for (int b : spec.trainable) {
        Eigen::VectorXd g = component_gradient(t, tm.comps[static_cast<std::size_t>(b)]);
        rep.clipped_gradients += clip_gradient(g);
        Eigen::VectorXd p = m.component_parameters(b);
        opts[static_cast<std::size_t>(b)].step(p, g);
        m.set_component_parameters(b, p);
      }
    }
    if (spec.weight) {
      Eigen::VectorXd g = t.grad(theta_leaf);
      rep.clipped_gradients += clip_gradient(g);
      weight_opt.step(theta, g);
      const double r = 1.0 / (1.0 + std::exp(-theta[0]));
      Eigen::VectorXd rho(nb);
      rho << (1 - r) * rho_old, r;
      m.set_rho(rho);
    }
    rec.wallclock_ms = clock.ms();
    rep.records.push_back(rec);
  }
  if (best) m = std::move(*best);
}

FitReport new_report(const LatentModel& model, const FitConfig& cfg) {
  FitReport rep;
  rep.algorithm = cfg.algorithm;
  rep.cardinalities = model.cardinalities();
  rep.records.reserve(static_cast<std::size_t>(cfg.iterations));
  return rep;
}

// Distinct random configurations; cycles once all are used.
std::vector<Config> random_atoms(const std::vector<int>& cards, int count, SeededRng& rng) {
  std::int64_t total = 1;
  for (int k : cards) {
    total = total > kEnumerationCap / k ? kEnumerationCap + 1 : total * k;
  }
  std::vector<Config> out;
  if (total <= kEnumerationCap) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(total));
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = idx.size(); i > 1; --i) {
      std::swap(idx[i - 1], idx[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i)))]);
    }
    for (int b = 0; b < count; ++b) {
      std::int64_t r = idx[static_cast<std::size_t>(b) % idx.size()];
      Config c(cards.size());
      for (std::size_t d = cards.size(); d-- > 0;) {
        c[d] = static_cast<int>(r % cards[d]);
        r /= cards[d];
      }
      out.push_back(std::move(c));
    }
  } else {
    for (int b = 0; b < count; ++b) {
      Config c;
      for (int k : cards) c.push_back(rng.uniform_int(k));
      out.push_back(std::move(c));
    }
  }
  return out;
}

MixtureComponent delta_component(const std::vector<int>& cards, const Config& at) {
  MixtureComponent c;
  for (std::size_t d = 0; d < cards.size(); ++d) {
    c.flows.emplace_back(std::vector<DiscreteFlow>{DiscreteFlow::shift_only(cards[d], shift_logits_for(at[d], cards[d]))});
    c.bases.emplace_back(DeltaBase(0, cards[d]));
  }
  return c;
}

}  // namespace

Var elbo_estimate(Trace& t, const FlowMixture& m, const TracedMixture& tm, const LatentModel& model, int samples,
                  SeededRng& rng) {
  if (samples < 1) throw InvalidInput("elbo_estimate: S must be at least 1");
  return group_objective(t, m, tm, model, iota(m.components()), m.rho(), false, samples, rng);
}

Var elbo_deterministic(Trace& t, const FlowMixture& m, const TracedMixture& tm, const LatentModel& model,
                       SeededRng& rng) {
  return group_objective(t, m, tm, model, iota(m.components()), m.rho(), true, 1, rng);
}

double elbo_value(const FlowMixture& m, const LatentModel& model, int samples, SeededRng& rng) {
  Trace t;
  const TracedMixture tm = trace_mixture(t, m, Temperature(1.0));
  const Var v = samples == 0 ? elbo_deterministic(t, m, tm, model, rng) : elbo_estimate(t, m, tm, model, samples, rng);
  return t.scalar_value(v);
}

FitReport fit_vif(const LatentModel& model, const FitConfig& cfg, SeededRng& rng) {
  validate(cfg);
  check_oracle(model, cfg);
  FitReport rep = new_report(model, cfg);
  FlowMixture m = cfg.initial ? *cfg.initial : initial_mixture(model.cardinalities(), cfg, rng);
  if (m.cardinalities() != model.cardinalities()) throw InvalidInput("initial mixture does not match the model");
  m.set_rho(Eigen::VectorXd::Constant(m.components(), 1.0 / m.components()));
  SeededRng eval_rng(eval_seed(cfg.seed));
  const Clock clock;
  int it = 0;
  StageSpec spec;
  spec.trainable = iota(m.components());
  spec.iterations = cfg.iterations;
  run_stage(m, spec, model, cfg, rng, eval_rng, clock, it, rep);
  finish_mixture(m, model, cfg, eval_rng, rep);
  return rep;
}

FitReport fit_bvif(const LatentModel& model, const FitConfig& cfg, SeededRng& rng) {
  validate(cfg);
  check_oracle(model, cfg);
  FitReport rep = new_report(model, cfg);
  const FlowMixture all = cfg.initial ? *cfg.initial : initial_mixture(model.cardinalities(), cfg, rng);
  if (all.cardinalities() != model.cardinalities()) throw InvalidInput("initial mixture does not match the model");
  if (all.components() != cfg.flows) throw InvalidInput("initial mixture needs one component per flow");
  FlowMixture m(model.cardinalities(), {all.component(0)}, Eigen::VectorXd::Ones(1));
  SeededRng eval_rng(eval_seed(cfg.seed));
  const Clock clock;
  int it = 0;
  for (int b = 0; b < cfg.flows; ++b) {
    if (b > 0) {
      Eigen::VectorXd rho(b + 1);
      rho << m.rho(), 0.0;
      m.add_component(all.component(b), rho);
    }
    StageSpec spec;
    spec.trainable = {b};
    spec.weight = b > 0;
    spec.iterations = stage_iterations(cfg.iterations, cfg.flows, b);
    run_stage(m, spec, model, cfg, rng, eval_rng, clock, it, rep);
  }
  finish_mixture(m, model, cfg, eval_rng, rep);
  return rep;
}

FitReport fit_bvi(const LatentModel& model, const FitConfig& cfg, SeededRng& rng) {
  validate(cfg);
  check_oracle(model, cfg);
  FitReport rep = new_report(model, cfg);
  const auto& cards = model.cardinalities();
  const std::vector<Config> atoms = random_atoms(cards, cfg.flows, rng);
  FlowMixture m(cards, {delta_component(cards, atoms[0])}, Eigen::VectorXd::Ones(1));
  SeededRng eval_rng(eval_seed(cfg.seed));
  const Clock clock;
  int it = 0;
  for (int b = 0; b < cfg.flows; ++b) {
    if (b > 0) {
      Eigen::VectorXd rho(b + 1);
      rho << m.rho(), 0.0;
      m.add_component(delta_component(cards, atoms[static_cast<std::size_t>(b)]), rho);
    }
    StageSpec spec;
    spec.train_flows = false;
    spec.weight = b > 0;
    spec.iterations = stage_iterations(cfg.iterations, cfg.flows, b);
    run_stage(m, spec, model, cfg, rng, eval_rng, clock, it, rep);
  }
  finish_mixture(m, model, cfg, eval_rng, rep);
  return rep;
}

FitReport fit_gs(const LatentModel& model, const FitConfig& cfg, SeededRng& rng) {
  validate(cfg);
  check_oracle(model, cfg);
  if (cfg.algorithm != Algorithm::gs && cfg.algorithm != Algorithm::st_gs) {
    throw InvalidInput("fit_gs needs algorithm gs or st-gs");
  }
  const bool soft = cfg.algorithm == Algorithm::gs;
  FitReport rep = new_report(model, cfg);
  const auto& cards = model.cardinalities();
  const Blocks blocks(cards);
  const int n = std::accumulate(cards.begin(), cards.end(), 0);
  Eigen::VectorXd lambda(n);
  for (int i = 0; i < n; ++i) lambda[i] = rng.normal();
  SeededRng eval_rng(eval_seed(cfg.seed));
  RmsProp opt(cfg.learning_rate);
  const Temperature tau_p(cfg.tau_p);
  const Clock clock;

  auto evaluate = [&](double& external, std::optional<double>& kl, bool& violation) {
    external = gs_discretized_elbo(lambda, model, cfg.external_samples, eval_rng).value;
    if (cfg.exact_posterior) {
      const KlResult r = kl_to_exact(factorized_q_table(lambda, cards), *cfg.exact_posterior);
      kl = r.value;
      violation = r.support_violation;
    }
  };

  for (int it = 0; it < cfg.iterations; ++it) {
    const Temperature tau = anneal(cfg.schedule, it + cfg.anneal_offset);
    Trace t;
    const Var lam = t.leaf(lambda);
    std::vector<Var> terms;
    for (int s = 0; s < cfg.samples; ++s) {
      if (soft) {
        // Draws that underflow to the simplex boundary have no density; redraw.
        for (int attempt = 0;; ++attempt) {
          try {
            const Var y = gumbel_softmax_sample(t, lam, tau, rng, blocks);
            terms.push_back(sub(t, model.relaxed_log_joint(t, y, tau_p), gs_log_density(t, y, lam, tau, blocks)));
            break;
          } catch (const std::domain_error&) {
            ++rep.resampled_draws;
            if (attempt >= 10) diverged(it, -std::numeric_limits<double>::infinity());
          }
        }
      } else {
        const Var x = straight_through(t, gumbel_softmax_sample(t, lam, tau, rng, blocks), blocks);
        terms.push_back(model.log_joint(t, x));
      }
    }
    Var obj = scale(t, sum(t, terms), 1.0 / cfg.samples);
    if (!soft) {
      const std::vector<Var> parts{obj, entropy(t, softmax_temp(t, lam, Temperature(1.0), blocks), blocks)};
      obj = sum(t, parts);
    }
    const double value = t.scalar_value(obj);
    if (!std::isfinite(value)) diverged(it, value);

    IterationRecord rec;
    rec.iteration = it;
    rec.internal_objective = value;
    rec.tau = tau.value();
    if (is_checkpoint(cfg, it)) {
      double external = 0.0;
      bool violation = false;
      evaluate(external, rec.kl_exact, violation);
      rec.external_elbo = external;
      Snapshot snap;
      snap.iteration = it;
      snap.logits = lambda;
      rep.snapshots.push_back(std::move(snap));
    }
    t.reverse_sweep(obj);
    Eigen::VectorXd g = t.grad(lam);
    rep.clipped_gradients += clip_gradient(g);
    opt.step(lambda, g);
    rec.wallclock_ms = clock.ms();
    rep.records.push_back(rec);
  }
  evaluate(rep.final_external_elbo, rep.final_kl, rep.kl_support_violation);
  rep.logits = lambda;
  return rep;
}

FitReport fit(const LatentModel& model, const FitConfig& cfg) {
  SeededRng rng(cfg.seed);
  switch (cfg.algorithm) {
    case Algorithm::vif: return fit_vif(model, cfg, rng);
    case Algorithm::bvif: return fit_bvif(model, cfg, rng);
    case Algorithm::bvi: return fit_bvi(model, cfg, rng);
    case Algorithm::gs:
    case Algorithm::st_gs: return fit_gs(model, cfg, rng);
  }
  throw InternalError("unhandled algorithm");
}

// --- CSV -------------------------------------------------------------------------------------

std::string csv_header() { return "iteration,internal_objective,tau_t,external_elbo,kl_exact,wallclock_ms"; }

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_report_csv(std::ostream& out, const FitReport& r, bool timing) {
  out << csv_header() << '\n';
  for (const auto& rec : r.records) {
    out << rec.iteration << ',' << fmt(rec.internal_objective) << ',' << fmt(rec.tau) << ',';
    if (rec.external_elbo) out << fmt(*rec.external_elbo);
    out << ',';
    if (rec.kl_exact) out << fmt(*rec.kl_exact);
    out << ',';
    if (timing) out << fmt(rec.wallclock_ms);
    out << '\n';
  }
}

}  // namespace mdnf
