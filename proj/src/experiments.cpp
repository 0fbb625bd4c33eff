#include "mdnf/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <ostream>
#include <thread>

#include "mdnf/eval.hpp"

namespace mdnf {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::string num(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

std::string status(const RunOutcome& o) { return o.ok ? "ok" : "failed"; }

RunOutcome run_fit(const LatentModel& model, const FitConfig& cfg, std::optional<FitReport>* keep) {
  RunOutcome o;
  o.seed = cfg.seed;
  o.elbo = kNaN;
  o.kl = kNaN;
  try {
    FitReport r = fit(model, cfg);
    o.ok = true;
    o.elbo = r.final_external_elbo;
    o.kl = r.final_kl ? *r.final_kl : kNaN;
    if (keep) *keep = std::move(r);
  } catch (const std::exception& e) {
    o.error = e.what();
  }
  return o;
}

std::shared_ptr<const Eigen::VectorXd> oracle(const BnPosterior& model) {
  return std::make_shared<const Eigen::VectorXd>(model.exact_posterior().table);
}

void check_replicates(int n) {
  if (n < 1) throw InvalidInput("need at least one replicate");
}

}  // namespace

int default_workers() { return std::max(1u, std::thread::hardware_concurrency()); }

std::uint64_t cell_seed(std::uint64_t master, std::uint64_t replicate) {
  return splitmix64(master ^ splitmix64(replicate));
}

void parallel_for(int n, int workers, const std::function<void(int)>& body) {
  if (n <= 0) return;
  if (workers <= 0) workers = default_workers();
  workers = std::min(workers, n);
  std::atomic<int> next{0};
  std::exception_ptr first;
  std::mutex mu;
  auto loop = [&] {
    for (int i = next++; i < n; i = next++) {
      try {
        body(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!first) first = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    loop();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(loop);
    for (auto& th : pool) th.join();
  }
  if (first) std::rethrow_exception(first);
}

Percentiles percentiles(std::vector<double> values) {
  values.erase(std::remove_if(values.begin(), values.end(), [](double v) { return std::isnan(v); }), values.end());
  Percentiles p;
  p.count = static_cast<int>(values.size());
  if (values.empty()) {
    p.p25 = p.p50 = p.p75 = kNaN;
    return p;
  }
  std::sort(values.begin(), values.end());
  auto at = [&](double q) {
    const double pos = q * (values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - lo;
    if (frac == 0.0 || values[lo] == values[hi]) return values[lo];
    return values[lo] + frac * (values[hi] - values[lo]);
  };
  p.p25 = at(0.25);
  p.p50 = at(0.5);
  p.p75 = at(0.75);
  return p;
}

// --- temperature grid --------------------------------------------------------------------

GridMethod parse_grid_method(const std::string& name) {
  if (name == "mdnf") return GridMethod::mdnf;
  if (name == "gs") return GridMethod::gs;
  if (name == "st-gs" || name == "st_gs") return GridMethod::st_gs;
  throw InvalidInput("unknown grid method '" + name + "' (expected mdnf, gs or st-gs)");
}

std::string grid_method_name(GridMethod m) {
  switch (m) {
    case GridMethod::mdnf: return "mdnf";
    case GridMethod::gs: return "gs";
    case GridMethod::st_gs: return "st-gs";
  }
  return "?";
}

std::vector<TempGridCell> run_temp_grid(const BnPosterior& model, const TempGridSpec& spec) {
  check_replicates(spec.replicates);
  if (spec.taus.empty()) throw InvalidInput("temperature grid is empty");
  const bool mdnf = spec.method == GridMethod::mdnf;
  if (!mdnf && spec.tau_ps.empty()) throw InvalidInput("prior temperature grid is empty");
  const std::vector<double> tau_ps = mdnf ? std::vector<double>{kNaN} : spec.tau_ps;
  std::vector<TempGridCell> cells;
  for (double tau : spec.taus) {
    for (double tau_p : tau_ps) {
      for (int r = 0; r < spec.replicates; ++r) {
        TempGridCell c;
        c.tau = tau;
        c.tau_p = tau_p;
        c.replicate = r;
        cells.push_back(std::move(c));
      }
    }
  }
  const auto post = oracle(model);
  parallel_for(static_cast<int>(cells.size()), spec.workers, [&](int i) {
    TempGridCell& c = cells[static_cast<std::size_t>(i)];
    FitConfig cfg = spec.base;
    cfg.seed = cell_seed(spec.master_seed, static_cast<std::uint64_t>(c.replicate));
    cfg.schedule.tau0 = c.tau;
    cfg.exact_posterior = post;
    if (mdnf) {
      if (!is_mdnf(cfg.algorithm)) cfg.algorithm = Algorithm::vif;
    } else {
      cfg.algorithm = spec.method == GridMethod::gs ? Algorithm::gs : Algorithm::st_gs;
      cfg.tau_p = c.tau_p;
    }
    c.outcome = run_fit(model, cfg, spec.keep_reports ? &c.report : nullptr);
  });
  return cells;
}

void write_temp_grid_csv(std::ostream& out, GridMethod method, const std::vector<TempGridCell>& cells) {
  out << "method,tau,tau_p,replicate,seed,status,final_elbo,final_kl,error\n";
  for (const auto& c : cells) {
    out << grid_method_name(method) << ',' << num(c.tau) << ',' << num(c.tau_p) << ',' << c.replicate << ','
        << c.outcome.seed << ',' << status(c.outcome) << ',' << num(c.outcome.elbo) << ',' << num(c.outcome.kl)
        << ',' << csv_field(c.outcome.error) << '\n';
  }
}

void write_temp_grid_summary(std::ostream& out, GridMethod method, const std::vector<TempGridCell>& cells) {
  out << "method,tau,tau_p,runs,failures,kl_p25,kl_p50,kl_p75\n";
  std::size_t i = 0;
  while (i < cells.size()) {
    std::size_t j = i;
    std::vector<double> kls;
    int failures = 0;
    auto same = [&](const TempGridCell& a, const TempGridCell& b) {
      return a.tau == b.tau && (a.tau_p == b.tau_p || (std::isnan(a.tau_p) && std::isnan(b.tau_p)));
    };
    for (; j < cells.size() && same(cells[i], cells[j]); ++j) {
      if (cells[j].outcome.ok) {
        kls.push_back(cells[j].outcome.kl);
      } else {
        ++failures;
      }
    }
    const Percentiles p = percentiles(kls);
    out << grid_method_name(method) << ',' << num(cells[i].tau) << ',' << num(cells[i].tau_p) << ',' << (j - i)
        << ',' << failures << ',' << num(p.p25) << ',' << num(p.p50) << ',' << num(p.p75) << '\n';
    i = j;
  }
}

// --- algorithm comparison ----------------------------------------------------------------

std::vector<AlgoCell> run_algo_comparison(const BnPosterior& model, const AlgoCompareSpec& spec) {
  check_replicates(spec.replicates);
  if (spec.algorithms.empty() || spec.flows.empty()) throw InvalidInput("algorithm comparison needs algorithms and flows");
  std::vector<AlgoCell> cells;
  for (Algorithm a : spec.algorithms) {
    for (int b : spec.flows) {
      for (int r = 0; r < spec.replicates; ++r) {
        AlgoCell c;
        c.algorithm = a;
        c.flows = b;
        c.replicate = r;
        cells.push_back(c);
      }
    }
  }
  const auto post = oracle(model);
  parallel_for(static_cast<int>(cells.size()), spec.workers, [&](int i) {
    AlgoCell& c = cells[static_cast<std::size_t>(i)];
    FitConfig cfg = spec.base;
    cfg.algorithm = c.algorithm;
    cfg.flows = c.flows;
    cfg.seed = cell_seed(spec.master_seed, static_cast<std::uint64_t>(c.replicate));
    cfg.exact_posterior = post;
    c.outcome = run_fit(model, cfg, nullptr);
  });
  return cells;
}

std::vector<AlgoSummary> summarize(const std::vector<AlgoCell>& cells) {
  std::vector<AlgoSummary> rows;
  std::vector<std::vector<double>> elbos, kls;
  for (const auto& c : cells) {
    auto it = std::find_if(rows.begin(), rows.end(),
                           [&](const AlgoSummary& s) { return s.algorithm == c.algorithm && s.flows == c.flows; });
    std::size_t k = static_cast<std::size_t>(it - rows.begin());
    if (it == rows.end()) {
      AlgoSummary s;
      s.algorithm = c.algorithm;
      s.flows = c.flows;
      rows.push_back(s);
      elbos.emplace_back();
      kls.emplace_back();
    }
    if (c.outcome.ok) {
      elbos[k].push_back(c.outcome.elbo);
      kls[k].push_back(c.outcome.kl);
    } else {
      ++rows[k].failures;
    }
  }
  for (std::size_t k = 0; k < rows.size(); ++k) {
    rows[k].elbo = percentiles(elbos[k]);
    rows[k].kl = percentiles(kls[k]);
  }
  return rows;
}

void write_algo_csv(std::ostream& out, const std::vector<AlgoCell>& cells) {
  out << "algorithm,flows,replicate,seed,status,final_elbo,final_kl,error\n";
  for (const auto& c : cells) {
    out << algorithm_name(c.algorithm) << ',' << c.flows << ',' << c.replicate << ',' << c.outcome.seed << ','
        << status(c.outcome) << ',' << num(c.outcome.elbo) << ',' << num(c.outcome.kl) << ','
        << csv_field(c.outcome.error) << '\n';
  }
}

void write_algo_summary(std::ostream& out, const std::vector<AlgoSummary>& rows) {
  out << "algorithm,flows,runs,failures,elbo_p25,elbo_p50,elbo_p75,kl_p25,kl_p50,kl_p75\n";
  for (const auto& s : rows) {
    out << algorithm_name(s.algorithm) << ',' << s.flows << ',' << s.elbo.count + s.failures << ',' << s.failures
        << ',' << num(s.elbo.p25) << ',' << num(s.elbo.p50) << ',' << num(s.elbo.p75) << ',' << num(s.kl.p25)
        << ',' << num(s.kl.p50) << ',' << num(s.kl.p75) << '\n';
  }
}

// --- base sweep --------------------------------------------------------------------------

std::vector<BaseCell> run_base_sweep(const BnPosterior& model, const BaseSweepSpec& spec) {
  check_replicates(spec.replicates);
  if (spec.alphas.empty()) throw InvalidInput("base sweep needs at least one alpha");
  for (double a : spec.alphas) {
    if (!(a > 0)) throw InvalidInput("base alpha must be positive");
  }
  std::vector<BaseCell> cells;
  for (double a : spec.alphas) {
    for (int r = 0; r < spec.replicates; ++r) {
      BaseCell c;
      c.alpha = a;
      c.replicate = r;
      cells.push_back(c);
    }
  }
  const auto post = oracle(model);
  parallel_for(static_cast<int>(cells.size()), spec.workers, [&](int i) {
    BaseCell& c = cells[static_cast<std::size_t>(i)];
    FitConfig cfg = spec.base;
    cfg.algorithm = Algorithm::vif;
    cfg.flows = spec.flows;
    cfg.base_alpha = c.alpha;
    cfg.seed = cell_seed(spec.master_seed, static_cast<std::uint64_t>(c.replicate));
    cfg.exact_posterior = post;
    c.outcome = run_fit(model, cfg, nullptr);
  });
  return cells;
}

std::vector<BaseSummary> summarize(const std::vector<BaseCell>& cells, const std::vector<double>& alphas) {
  if (alphas.empty() || cells.size() % alphas.size() != 0) throw InvalidInput("summarize: cells do not match alphas");
  const std::size_t per = cells.size() / alphas.size();
  std::vector<BaseSummary> rows;
  for (std::size_t a = 0; a < alphas.size(); ++a) {
    BaseSummary s;
    s.alpha = alphas[a];
    std::vector<double> kls, elbos;
    for (std::size_t i = a * per; i < (a + 1) * per; ++i) {
      if (cells[i].alpha != s.alpha) throw InvalidInput("summarize: cells do not match alphas");
      if (cells[i].outcome.ok) {
        kls.push_back(cells[i].outcome.kl);
        elbos.push_back(cells[i].outcome.elbo);
      } else {
        ++s.failures;
      }
    }
    s.kl = percentiles(kls);
    s.elbo = percentiles(elbos);
    rows.push_back(s);
  }
  return rows;
}

void write_base_csv(std::ostream& out, const std::vector<BaseCell>& cells) {
  out << "alpha,replicate,seed,status,final_elbo,final_kl,error\n";
  for (const auto& c : cells) {
    out << num(c.alpha) << ',' << c.replicate << ',' << c.outcome.seed << ',' << status(c.outcome) << ','
        << num(c.outcome.elbo) << ',' << num(c.outcome.kl) << ',' << csv_field(c.outcome.error) << '\n';
  }
}

void write_base_summary(std::ostream& out, const std::vector<BaseSummary>& rows) {
  out << "alpha,runs,failures,kl_p25,kl_p50,kl_p75,elbo_p25,elbo_p50,elbo_p75\n";
  for (const auto& s : rows) {
    out << num(s.alpha) << ',' << s.kl.count + s.failures << ',' << s.failures << ',' << num(s.kl.p25) << ','
        << num(s.kl.p50) << ',' << num(s.kl.p75) << ',' << num(s.elbo.p25) << ',' << num(s.elbo.p50) << ','
        << num(s.elbo.p75) << '\n';
  }
}

// --- permutation recovery ----------------------------------------------------------------

Eigen::VectorXd recovery_target(int k) {
  if (k == 5) return (Eigen::VectorXd(5) << 0.07, 0.13, 0.2, 0.27, 0.33).finished();
  if (k == 7) return (Eigen::VectorXd(7) << 0.04, 0.07, 0.11, 0.14, 0.18, 0.21, 0.25).finished();
  throw InvalidInput("recovery targets exist for K = 5 and K = 7 only");
}

FlowStack recovery_stack(const RecoverySpec& spec) {
  if (spec.k < 2) throw InvalidInput("recovery needs K >= 2");
  switch (spec.kind) {
    case FlowKind::partial: return build_sorting_network(spec.k);
    case FlowKind::loc_scale:
    case FlowKind::shift_only: {
      if (spec.layers < 1) throw InvalidInput("recovery stack needs at least one layer");
      std::vector<DiscreteFlow> layers;
      for (int l = 0; l < spec.layers; ++l) {
        const Eigen::VectorXd zero = Eigen::VectorXd::Zero(spec.k);
        layers.push_back(spec.kind == FlowKind::loc_scale ? DiscreteFlow::loc_scale(spec.k, spec.sigma, zero)
                                                          : DiscreteFlow::shift_only(spec.k, zero));
      }
      return FlowStack(std::move(layers));
    }
  }
  throw InternalError("unhandled flow kind");
}

RecoveryRun recover_permutation(const Eigen::VectorXd& p_x, const std::vector<int>& shuffle, FlowStack stack,
                                const RecoverySpec& spec, SeededRng& rng) {
  const int k = static_cast<int>(p_x.size());
  if (static_cast<int>(shuffle.size()) != k || stack.cardinality() != k) {
    throw InvalidInput("recover_permutation: sizes do not match");
  }
  if (spec.max_iterations < 0 || spec.batch < 0) throw InvalidInput("recover_permutation: negative budget");
  Eigen::VectorXd p_u(k);
  for (int i = 0; i < k; ++i) p_u[i] = p_x[shuffle[static_cast<std::size_t>(i)]];
  const CategoricalParams px(p_x);
  const Temperature tau(spec.tau);

  if (!(spec.init_jitter >= 0)) throw InvalidInput("recover_permutation: negative jitter");
  for (auto& layer : stack.layers()) {
    Eigen::VectorXd l = Eigen::VectorXd::Zero(layer.shift_size());
    for (Eigen::Index j = 1; j < l.size(); ++j) l[j] = -spec.init_jitter * std::abs(rng.normal());
    layer.set_shift_logits(l);
  }

  RecoveryRun run;
  run.shuffle = shuffle;
  int params = 0;
  for (const auto& layer : stack.layers()) params += layer.shift_size();
  Adam opt(spec.learning_rate);
  Eigen::VectorXd theta(params);
  for (int it = 0;; ++it) {
    bool recovered = true;
    for (int x = 0; x < k && recovered; ++x) recovered = shuffle[static_cast<std::size_t>(stack.inverse_index(x))] == x;
    if (recovered) {
      run.success = true;
      run.iterations = it;
      run.permutation = stack.permutation();
      return run;
    }
    if (it == spec.max_iterations) break;

    Eigen::VectorXd weight = Eigen::VectorXd::Zero(k);
    if (spec.batch == 0) {
      weight = p_x;
    } else {
      for (int s = 0; s < spec.batch; ++s) weight[sample_categorical(px, rng)] += 1.0 / spec.batch;
    }
    Trace t;
    std::vector<TracedShift> shifts;
    for (const auto& layer : stack.layers()) shifts.push_back(trace_shift(t, layer, tau));
    // log(p_u . u): the same probability-space evaluation as the mixture density
    const Var pu = t.constant(p_u);
    std::vector<Var> terms;
    for (int x = 0; x < k; ++x) {
      if (weight[x] == 0.0) continue;
      Eigen::VectorXd onehot = Eigen::VectorXd::Zero(k);
      onehot[x] = 1.0;
      const Var u = stack_inverse(t, stack, shifts, t.constant(onehot));
      terms.push_back(scale(t, log(t, dot(t, u, pu)), weight[x]));
    }
    const Var obj = sum(t, terms);
    t.reverse_sweep(obj);
    Eigen::VectorXd grad(params);
    int off = 0;
    for (std::size_t l = 0; l < stack.size(); ++l) {
      const int n = stack.layer(l).shift_size();
      grad.segment(off, n) = t.grad(shifts[l].logits);
      theta.segment(off, n) = stack.layer(l).shift_logits();
      off += n;
    }
    clip_gradient(grad);
    opt.step(theta, grad);
    off = 0;
    for (std::size_t l = 0; l < stack.size(); ++l) {
      const int n = stack.layer(l).shift_size();
      stack.layer(l).set_shift_logits(theta.segment(off, n));
      off += n;
    }
  }
  run.iterations = spec.max_iterations;
  run.permutation = stack.permutation();
  return run;
}

RecoveryResult run_permutation_recovery(const RecoverySpec& spec) {
  if (spec.runs < 1) throw InvalidInput("recovery needs at least one run");
  const Eigen::VectorXd p_x = recovery_target(spec.k);
  const FlowStack proto = recovery_stack(spec);
  RecoveryResult res;
  res.runs.resize(static_cast<std::size_t>(spec.runs));
  parallel_for(spec.runs, spec.workers, [&](int r) {
    SeededRng rng(cell_seed(spec.master_seed, static_cast<std::uint64_t>(r)));
    std::vector<int> shuffle(static_cast<std::size_t>(spec.k));
    std::iota(shuffle.begin(), shuffle.end(), 0);
    std::shuffle(shuffle.begin(), shuffle.end(), rng.engine());
    res.runs[static_cast<std::size_t>(r)] = recover_permutation(p_x, shuffle, proto, spec, rng);
  });
  std::vector<double> iters;
  for (const auto& run : res.runs) {
    if (run.success) iters.push_back(run.iterations);
  }
  res.success_fraction = static_cast<double>(iters.size()) / spec.runs;
  res.median_iterations = percentiles(iters).p50;
  return res;
}

void write_recovery_csv(std::ostream& out, const RecoveryResult& r) {
  out << "run,shuffle,success,iterations\n";
  for (std::size_t i = 0; i < r.runs.size(); ++i) {
    std::string sh;
    for (int v : r.runs[i].shuffle) sh += (sh.empty() ? "" : " ") + std::to_string(v);
    out << i << ',' << sh << ',' << (r.runs[i].success ? 1 : 0) << ',' << r.runs[i].iterations << '\n';
  }
}

void write_recovery_summary(std::ostream& out, const RecoverySpec& spec, const RecoveryResult& r) {
  out << "kind,k,layers,runs,success_fraction,median_iterations\n";
  const auto layers = spec.kind == FlowKind::partial ? spec.k * (spec.k - 1) / 2 : spec.layers;
  out << to_string(spec.kind) << ',' << spec.k << ',' << layers << ',' << r.runs.size() << ','
      << num(r.success_fraction) << ',' << num(r.median_iterations) << '\n';
}

// --- GMM ---------------------------------------------------------------------------------

GmmState gmm_random_start(const Eigen::MatrixXd& data, int k, SeededRng& rng) {
  if (k < 1 || k > data.rows()) throw InvalidInput("need between 1 and N clusters");
  GmmState st = gmm_init(data, k);
  std::vector<int> rows(static_cast<std::size_t>(data.rows()));
  std::iota(rows.begin(), rows.end(), 0);
  std::shuffle(rows.begin(), rows.end(), rng.engine());
  const double share = static_cast<double>(data.rows()) / k;
  for (int j = 0; j < k; ++j) {
    st.m.col(j) = data.row(rows[static_cast<std::size_t>(j)]).transpose();
    st.w[static_cast<std::size_t>(j)] = st.prior.w0;
  }
  st.alpha = Eigen::VectorXd::Constant(k, st.prior.alpha0 + share);
  st.beta = Eigen::VectorXd::Constant(k, st.prior.beta0 + share);
  st.nu = Eigen::VectorXd::Constant(k, st.prior.nu0 + share);
  return st;
}

GmmTrace gmm_closed_form_em(GmmState start, int steps) {
  GmmTrace tr;
  tr.state = std::move(start);
  for (int s = 0; s < steps; ++s) {
    tr.resp = gmm_responsibilities(tr.state);
    tr.estep_reference = tr.resp;
    tr.state = gmm_m_step(tr.state, tr.resp);
    tr.elbo.push_back(gmm_elbo(tr.state, tr.resp));
  }
  return tr;
}

Eigen::MatrixXd mixture_responsibilities(const FlowMixture& m, double& entropy) {
  const auto& cards = m.cardinalities();
  const int k = cards.empty() ? 0 : cards.front();
  for (int c : cards) {
    if (c != k) throw InvalidInput("mixture_responsibilities: dimensions differ in cardinality");
  }
  Eigen::MatrixXd resp = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(cards.size()), k);
  std::map<Config, double> support;
  for (int b = 0; b < m.components(); ++b) {
    Config u;
    for (const auto& base : m.component(b).bases) {
      if (!is_delta(base)) throw InvalidInput("mixture_responsibilities: needs delta bases");
      u.push_back(std::get<DeltaBase>(base).atom);
    }
    const Config x = m.forward(b, u);
    for (std::size_t d = 0; d < x.size(); ++d) resp(static_cast<Eigen::Index>(d), x[d]) += m.rho()[b];
    support[x] += m.rho()[b];
  }
  entropy = 0.0;
  for (const auto& [x, q] : support) {
    if (q > 0) entropy -= q * std::log(q);
  }
  return resp;
}

GmmTrace gmm_mdnf_em(GmmState start, int steps, const FitConfig& estep, SeededRng& rng) {
  if (estep.algorithm != Algorithm::vif && estep.algorithm != Algorithm::bvif) {
    throw InvalidInput("GMM E-step supports vif and bvif");
  }
  GmmTrace tr;
  tr.state = std::move(start);
  std::optional<FlowMixture> warm;
  for (int s = 0; s < steps; ++s) {
    const GmmLatent model(tr.state);
    FitConfig cfg = estep;
    cfg.initial = warm;
    cfg.anneal_offset = s;
    cfg.checkpoint_every = 0;
    cfg.exact_posterior.reset();
    FitReport r = cfg.algorithm == Algorithm::vif ? fit_vif(model, cfg, rng) : fit_bvif(model, cfg, rng);
    warm = std::move(r.mixture);
    double h = 0.0;
    tr.resp = mixture_responsibilities(*warm, h);
    tr.estep_reference = gmm_responsibilities(tr.state);
    tr.state = gmm_m_step(tr.state, tr.resp);
    tr.elbo.push_back(gmm_elbo(tr.state, tr.resp, h));
  }
  return tr;
}

double assignment_agreement(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols() || a.rows() == 0) {
    throw InvalidInput("assignment_agreement: shapes differ");
  }
  const int k = static_cast<int>(a.cols());
  if (k > 8) throw InvalidInput("assignment_agreement: at most 8 clusters");
  std::vector<int> la(static_cast<std::size_t>(a.rows())), lb(la.size());
  for (Eigen::Index n = 0; n < a.rows(); ++n) {
    a.row(n).maxCoeff(&la[static_cast<std::size_t>(n)]);
    b.row(n).maxCoeff(&lb[static_cast<std::size_t>(n)]);
  }
  std::vector<int> perm(static_cast<std::size_t>(k));
  std::iota(perm.begin(), perm.end(), 0);
  int best = 0;
  do {
    int hits = 0;
    for (std::size_t n = 0; n < la.size(); ++n) hits += perm[static_cast<std::size_t>(lb[n])] == la[n];
    best = std::max(best, hits);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return static_cast<double>(best) / la.size();
}

std::vector<GmmCell> run_gmm_comparison(const Eigen::MatrixXd& data, const GmmCompareSpec& spec) {
  check_replicates(spec.replicates);
  if (spec.algorithms.empty() || spec.flows.empty()) throw InvalidInput("GMM comparison needs algorithms and flows");
  if (spec.em_steps < 1 || spec.inner_iterations < 1) throw InvalidInput("GMM comparison needs positive budgets");
  std::vector<GmmCell> cells;
  for (int r = 0; r < spec.replicates; ++r) {
    for (Algorithm a : spec.algorithms) {
      if (a != Algorithm::vif && a != Algorithm::bvif) throw InvalidInput("GMM E-step supports vif and bvif");
      for (int b : spec.flows) {
        GmmCell c;
        c.algorithm = a;
        c.flows = b;
        c.replicate = r;
        c.seed = cell_seed(spec.master_seed, static_cast<std::uint64_t>(r));
        cells.push_back(c);
      }
    }
  }
  parallel_for(static_cast<int>(cells.size()), spec.workers, [&](int i) {
    GmmCell& c = cells[static_cast<std::size_t>(i)];
    try {
      SeededRng rng(c.seed);
      const GmmState start = gmm_random_start(data, spec.k, rng);
      const GmmTrace closed = gmm_closed_form_em(start, spec.em_steps);
      FitConfig cfg;
      cfg.algorithm = c.algorithm;
      cfg.flows = c.flows;
      cfg.iterations = spec.inner_iterations;
      cfg.learning_rate = spec.learning_rate;
      cfg.schedule = spec.schedule;
      cfg.seed = c.seed;
      const GmmTrace ours = gmm_mdnf_em(start, spec.em_steps, cfg, rng);
      c.elbo = ours.elbo;
      c.closed_form = closed.elbo;
      c.agreement = assignment_agreement(ours.resp, ours.estep_reference);
      c.run_agreement = assignment_agreement(ours.resp, closed.resp);
      c.ok = true;
    } catch (const std::exception& e) {
      c.error = e.what();
    }
  });
  return cells;
}

void write_gmm_csv(std::ostream& out, const std::vector<GmmCell>& cells) {
  out << "algorithm,flows,replicate,seed,status,step,elbo,closed_form_elbo,agreement,run_agreement,error\n";
  for (const auto& c : cells) {
    const std::string head = algorithm_name(c.algorithm) + "," + std::to_string(c.flows) + "," +
                             std::to_string(c.replicate) + "," + std::to_string(c.seed) + ",";
    if (!c.ok) {
      out << head << "failed,,,,,," << csv_field(c.error) << '\n';
      continue;
    }
    for (std::size_t s = 0; s < c.elbo.size(); ++s) {
      out << head << "ok," << s << ',' << num(c.elbo[s]) << ',' << num(c.closed_form[s]) << ','
          << (s + 1 == c.elbo.size() ? num(c.agreement) + "," + num(c.run_agreement) : ",") << ",\n";
    }
  }
}

}  // namespace mdnf
