// mdnf: fit mixtures of discrete flows to Bayesian-network posteriors and run
// the benchmark studies. Every subcommand writes CSV to --out (stdout by
// default); --config FILE supplies flag values that explicit flags override.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "mdnf/bayesnet.hpp"
#include "mdnf/eval.hpp"
#include "mdnf/experiments.hpp"
#include "mdnf/gmm.hpp"
#include "mdnf/infer.hpp"
#include "mdnf/mixture.hpp"

using namespace mdnf;

namespace {

struct Options {
  std::string net;
  std::vector<std::string> evidence;
  std::string algo = "vif";
  std::vector<std::string> algos;
  int flows = 1;
  std::vector<int> flow_list;
  int samples = 100;
  double tau = 10.0;
  std::vector<double> taus;
  double gamma = 0.0;
  double tau_p = 1.0;
  std::vector<double> tau_ps;
  int iters = 10000;
  double lr = 0.01;
  std::uint64_t seed = 0;
  std::string out = "-";
  std::string summary;
  std::string config;
  int workers = 0;
  bool timing = false;
  int checkpoint = 100;
  std::string sampling = "auto";
  double base_alpha = 0.0;
  std::string save;
  std::string mixture;
  int replicates = 1;
  std::string method = "mdnf";
  std::vector<double> alphas;
  int k = 5;
  std::string kind = "partial";
  int layers = 10;
  int sigma = 1;
  int runs = 40;
  int batch = 100;
  double jitter = 0.1;
  std::string data;
  int em_steps = 50;
  int repetitions = 100;
};

void with_output(const std::string& path, const std::function<void(std::ostream&)>& body) {
  if (path.empty() || path == "-") {
    body(std::cout);
    std::cout.flush();
    return;
  }
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  body(f);
  if (!f) throw std::runtime_error("write failed: " + path);
}

BnPosterior load_posterior(const Options& o) {
  if (o.net.empty()) throw InvalidInput("--net is required");
  BayesNet net = BayesNet::load(o.net);
  Evidence ev = parse_evidence(net, o.evidence);
  return BnPosterior(std::move(net), std::move(ev));
}

std::shared_ptr<const Eigen::VectorXd> oracle_if_small(const BnPosterior& post) {
  if (post.config_count() > kEnumerationCap) return nullptr;
  return std::make_shared<const Eigen::VectorXd>(post.exact_posterior().table);
}

Sampling parse_sampling(const std::string& s) {
  if (s == "auto") return Sampling::automatic;
  if (s == "random") return Sampling::random;
  if (s == "deterministic") return Sampling::deterministic;
  throw InvalidInput("unknown sampling '" + s + "'");
}

FitConfig fit_config(const Options& o) {
  FitConfig cfg;
  cfg.algorithm = parse_algorithm(o.algo);
  cfg.flows = o.flows;
  cfg.samples = o.samples;
  cfg.iterations = o.iters;
  cfg.learning_rate = o.lr;
  cfg.seed = o.seed;
  cfg.schedule = {o.tau, o.gamma};
  cfg.tau_p = o.tau_p;
  cfg.sampling = parse_sampling(o.sampling);
  if (o.base_alpha > 0) cfg.base_alpha = o.base_alpha;
  cfg.checkpoint_every = o.checkpoint;
  return cfg;
}

std::vector<Algorithm> parse_algorithms(const std::vector<std::string>& names) {
  std::vector<Algorithm> out;
  for (const auto& n : names) out.push_back(parse_algorithm(n));
  return out;
}

void add_model_flags(CLI::App* c, Options& o) {
  c->add_option("--net", o.net, "Bayesian network file");
  c->add_option("--evidence", o.evidence, "Observed node as NODE=INDEX (repeatable)");
}

void add_fit_flags(CLI::App* c, Options& o) {
  c->add_option("--samples", o.samples, "Monte Carlo samples per step");
  c->add_option("--gamma", o.gamma, "Annealing rate");
  c->add_option("--iters", o.iters, "Iterations");
  c->add_option("--lr", o.lr, "Learning rate");
  c->add_option("--sampling", o.sampling, "auto, random or deterministic")
      ->check(CLI::IsMember({"auto", "random", "deterministic"}));
  c->add_option("--base-alpha", o.base_alpha, "Dirichlet concentration of the bases (delta when unset)");
  c->add_option("--checkpoint", o.checkpoint, "Evaluate the external ELBO every N iterations");
}

void add_run_flags(CLI::App* c, Options& o) {
  c->add_option("--seed", o.seed, "Random seed");
  c->add_option("--out", o.out, "Output CSV ('-' for stdout)");
  c->add_option("--config", o.config, "JSON file of flag values");
}

// Flag defaults shared by several subcommands are applied in their callbacks.
void add_grid_flags(CLI::App* c, Options& o) {
  c->add_option("--replicates", o.replicates, "Seeds per cell")->check(CLI::PositiveNumber);
  c->add_option("--workers", o.workers, "Worker threads (0 = logical cores)");
  c->add_option("--summary", o.summary, "Percentile summary CSV");
}

// Appends config-file values for flags that were not given explicitly.
std::vector<std::string> merge_config(const std::vector<std::string>& args) {
  std::string path;
  std::set<std::string> given;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("--", 0) != 0) continue;
    const std::size_t eq = a.find('=');
    const std::string name = a.substr(2, eq == std::string::npos ? std::string::npos : eq - 2);
    given.insert(name);
    if (name == "config") {
      if (eq != std::string::npos) {
        path = a.substr(eq + 1);
      } else if (i + 1 < args.size()) {
        path = args[i + 1];
      }
    }
  }
  if (path.empty()) return args;
  std::ifstream f(path);
  if (!f) throw InvalidInput("cannot read config " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput("config " + path + ": " + e.what());
  }
  if (!j.is_object()) throw InvalidInput("config " + path + ": expected an object");
  std::vector<std::string> out = args;
  auto scalar = [&](const std::string& key, const nlohmann::json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number_integer()) return std::to_string(v.get<long long>());
    if (v.is_number()) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.17g", v.get<double>());
      return std::string(buf);
    }
    throw InvalidInput("config key '" + key + "': unsupported value");
  };
  for (const auto& [key, value] : j.items()) {
    if (key == "config" || given.count(key)) continue;
    if (value.is_boolean()) {
      if (value.get<bool>()) out.push_back("--" + key);
    } else if (value.is_array()) {
      for (const auto& v : value) {
        out.push_back("--" + key);
        out.push_back(scalar(key, v));
      }
    } else {
      out.push_back("--" + key);
      out.push_back(scalar(key, value));
    }
  }
  return out;
}

void print_fit_summary(const FitReport& r) {
  std::fprintf(stderr, "final_elbo %.6f", r.final_external_elbo);
  if (r.final_kl) std::fprintf(stderr, " kl %.6g", *r.final_kl);
  if (r.clipped_gradients) std::fprintf(stderr, " clipped %d", r.clipped_gradients);
  std::fprintf(stderr, "\n");
}

int cmd_fit_bn(const Options& o) {
  const BnPosterior post = load_posterior(o);
  FitConfig cfg = fit_config(o);
  cfg.exact_posterior = oracle_if_small(post);
  const FitReport r = fit(post, cfg);
  with_output(o.out, [&](std::ostream& os) { write_report_csv(os, r, o.timing); });
  if (!o.save.empty()) {
    if (!r.mixture) throw InvalidInput("--save needs an mdnf algorithm");
    save_mixture(o.save, *r.mixture);
  }
  print_fit_summary(r);
  return 0;
}

int cmd_sweep_temp(const Options& o) {
  const BnPosterior post = load_posterior(o);
  TempGridSpec spec;
  spec.method = parse_grid_method(o.method);
  spec.taus = o.taus.empty() ? std::vector<double>{1.0, 10.0, 100.0} : o.taus;
  spec.tau_ps = o.tau_ps.empty() ? std::vector<double>{1.0} : o.tau_ps;
  spec.replicates = o.replicates;
  spec.master_seed = o.seed;
  spec.base = fit_config(o);
  if (spec.method != GridMethod::mdnf || !is_mdnf(spec.base.algorithm)) spec.base.algorithm = Algorithm::vif;
  spec.base.checkpoint_every = 0;
  spec.workers = o.workers;
  const auto cells = run_temp_grid(post, spec);
  with_output(o.out, [&](std::ostream& os) { write_temp_grid_csv(os, spec.method, cells); });
  if (!o.summary.empty()) {
    with_output(o.summary, [&](std::ostream& os) { write_temp_grid_summary(os, spec.method, cells); });
  }
  return 0;
}

int cmd_algo_compare(const Options& o) {
  const BnPosterior post = load_posterior(o);
  AlgoCompareSpec spec;
  spec.algorithms = parse_algorithms(o.algos.empty() ? std::vector<std::string>{"vif", "bvif", "bvi"} : o.algos);
  spec.flows = o.flow_list.empty() ? std::vector<int>{1, 10, 40} : o.flow_list;
  spec.replicates = o.replicates;
  spec.master_seed = o.seed;
  spec.base = fit_config(o);
  spec.base.checkpoint_every = 0;
  spec.workers = o.workers;
  const auto cells = run_algo_comparison(post, spec);
  with_output(o.out, [&](std::ostream& os) { write_algo_csv(os, cells); });
  if (!o.summary.empty()) with_output(o.summary, [&](std::ostream& os) { write_algo_summary(os, summarize(cells)); });
  return 0;
}

int cmd_base_sweep(const Options& o) {
  const BnPosterior post = load_posterior(o);
  BaseSweepSpec spec;
  spec.alphas = o.alphas.empty() ? std::vector<double>{0.01, 1.0, 100.0} : o.alphas;
  spec.flows = o.flows;
  spec.replicates = o.replicates;
  spec.master_seed = o.seed;
  spec.base = fit_config(o);
  spec.base.algorithm = Algorithm::vif;
  spec.base.checkpoint_every = 0;
  spec.workers = o.workers;
  const auto cells = run_base_sweep(post, spec);
  with_output(o.out, [&](std::ostream& os) { write_base_csv(os, cells); });
  if (!o.summary.empty()) {
    with_output(o.summary, [&](std::ostream& os) { write_base_summary(os, summarize(cells, spec.alphas)); });
  }
  return 0;
}

int cmd_partial_flows(const Options& o) {
  RecoverySpec spec;
  spec.k = o.k;
  spec.kind = o.kind == "partial" ? FlowKind::partial : FlowKind::loc_scale;
  spec.layers = o.layers;
  spec.sigma = o.sigma;
  spec.runs = o.runs;
  spec.max_iterations = o.iters;
  spec.learning_rate = o.lr;
  spec.tau = o.tau;
  spec.batch = o.batch;
  spec.init_jitter = o.jitter;
  spec.master_seed = o.seed;
  spec.workers = o.workers;
  const RecoveryResult r = run_permutation_recovery(spec);
  with_output(o.out, [&](std::ostream& os) { write_recovery_csv(os, r); });
  if (!o.summary.empty()) with_output(o.summary, [&](std::ostream& os) { write_recovery_summary(os, spec, r); });
  std::fprintf(stderr, "success %.3f median_iterations %g\n", r.success_fraction, r.median_iterations);
  return 0;
}

int cmd_fit_gmm(const Options& o) {
  Eigen::MatrixXd data;
  if (o.data.empty()) {
    SeededRng rng(o.seed);
    data = simulated_three_clusters(100, rng);
  } else {
    data = load_points_csv(o.data);
  }
  GmmCompareSpec spec;
  spec.k = o.k;
  spec.algorithms = parse_algorithms(o.algos.empty() ? std::vector<std::string>{"vif"} : o.algos);
  spec.flows = o.flow_list.empty() ? std::vector<int>{1} : o.flow_list;
  spec.replicates = o.replicates;
  spec.em_steps = o.em_steps;
  spec.inner_iterations = o.iters;
  spec.learning_rate = o.lr;
  spec.schedule = {o.tau, o.gamma};
  spec.master_seed = o.seed;
  spec.workers = o.workers;
  const auto cells = run_gmm_comparison(data, spec);
  with_output(o.out, [&](std::ostream& os) { write_gmm_csv(os, cells); });
  for (const auto& c : cells) {
    if (!c.ok) {
      std::fprintf(stderr, "%s B=%d replicate %d failed: %s\n", algorithm_name(c.algorithm).c_str(), c.flows,
                   c.replicate, c.error.c_str());
      continue;
    }
    std::fprintf(stderr, "%s B=%d replicate %d elbo %.4f closed_form %.4f agreement %.3f\n",
                 algorithm_name(c.algorithm).c_str(), c.flows, c.replicate, c.elbo.back(), c.closed_form.back(),
                 c.agreement);
  }
  return 0;
}

FlowMixture trained_or_loaded(const Options& o, const BnPosterior& post) {
  if (!o.mixture.empty()) return load_mixture(o.mixture);
  FitConfig cfg = fit_config(o);
  if (!is_mdnf(cfg.algorithm)) throw InvalidInput("variance needs an mdnf algorithm");
  cfg.checkpoint_every = 0;
  FitReport r = fit(post, cfg);
  return std::move(*r.mixture);
}

int cmd_variance(const Options& o) {
  const BnPosterior post = load_posterior(o);
  const FlowMixture m = trained_or_loaded(o, post);
  if (m.cardinalities() != post.cardinalities()) throw InvalidInput("mixture does not match the network");
  SeededRng rng(o.seed ^ 0x9e3779b97f4a7c15ULL);
  const VarianceStats s = elbo_variance_study(m, post, o.repetitions, o.samples, rng);
  with_output(o.out, [&](std::ostream& os) {
    os << "repetition,estimate\n";
    char buf[64];
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i, s.values[i]);
      os << buf;
    }
  });
  std::fprintf(stderr, "mean %.6f std %.6g relative %.6g exact %.6f\n", s.mean, s.std, s.relative,
               exact_elbo(m, post));
  return 0;
}

int cmd_eval(const Options& o) {
  if (o.mixture.empty()) throw InvalidInput("--mixture is required");
  const BnPosterior post = load_posterior(o);
  const FlowMixture m = load_mixture(o.mixture);
  if (m.cardinalities() != post.cardinalities()) throw InvalidInput("mixture does not match the network");
  const ExactPosterior ex = post.exact_posterior();
  const KlResult kl = kl_to_exact(mdnf_q_table(m), ex.table);
  with_output(o.out, [&](std::ostream& os) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", exact_elbo(m, post), ex.log_evidence, kl.value);
    os << "exact_elbo,log_evidence,kl_exact\n" << buf;
  });
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixtures of discrete normalizing flows"};
  app.require_subcommand(1);
  Options o;
  int (*run)(const Options&) = nullptr;

  auto* fit_bn = app.add_subcommand("fit-bn", "Fit one approximation to a network posterior");
  add_model_flags(fit_bn, o);
  add_fit_flags(fit_bn, o);
  add_run_flags(fit_bn, o);
  fit_bn->add_option("--algo", o.algo, "vif, bvif, bvi, gs or st-gs");
  fit_bn->add_option("--flows", o.flows, "Mixture components B");
  fit_bn->add_option("--tau", o.tau, "Initial temperature");
  fit_bn->add_option("--tau-p", o.tau_p, "Relaxed prior temperature (gs)");
  fit_bn->add_flag("--timing", o.timing, "Fill the wall-clock column");
  fit_bn->add_option("--save", o.save, "Write the trained mixture to FILE");
  fit_bn->callback([&] { run = cmd_fit_bn; });

  auto* sweep = app.add_subcommand("sweep-temp", "Final KL over a temperature grid");
  add_model_flags(sweep, o);
  add_fit_flags(sweep, o);
  add_run_flags(sweep, o);
  add_grid_flags(sweep, o);
  sweep->add_option("--method", o.method, "mdnf, gs or st-gs");
  sweep->add_option("--algo", o.algo, "mdnf algorithm for --method mdnf");
  sweep->add_option("--flows", o.flows, "Mixture components B");
  sweep->add_option("--tau", o.taus, "Temperatures")->delimiter(',');
  sweep->add_option("--tau-p", o.tau_ps, "Prior temperatures (gs)")->delimiter(',');
  sweep->callback([&] { run = cmd_sweep_temp; });

  auto* algo = app.add_subcommand("algo-compare", "ELBO and KL per algorithm and B");
  add_model_flags(algo, o);
  add_fit_flags(algo, o);
  add_run_flags(algo, o);
  add_grid_flags(algo, o);
  algo->add_option("--algo", o.algos, "Algorithms")->delimiter(',');
  algo->add_option("--flows", o.flow_list, "Component counts")->delimiter(',');
  algo->add_option("--tau", o.tau, "Initial temperature");
  algo->add_option("--tau-p", o.tau_p, "Relaxed prior temperature (gs)");
  algo->callback([&] {
    if (algo->count("--replicates") == 0) o.replicates = 10;
    run = cmd_algo_compare;
  });

  auto* base = app.add_subcommand("base-sweep", "Final KL per Dirichlet base concentration");
  add_model_flags(base, o);
  add_fit_flags(base, o);
  add_run_flags(base, o);
  add_grid_flags(base, o);
  base->add_option("--alpha", o.alphas, "Concentrations")->delimiter(',');
  base->add_option("--flows", o.flows, "Mixture components B");
  base->add_option("--tau", o.tau, "Initial temperature");
  base->callback([&] {
    if (base->count("--replicates") == 0) o.replicates = 5;
    if (base->count("--flows") == 0) o.flows = 40;
    run = cmd_base_sweep;
  });

  auto* perm = app.add_subcommand("partial-flows", "Permutation recovery with flow stacks");
  add_run_flags(perm, o);
  perm->add_option("--k", o.k, "Categories (5 or 7)");
  perm->add_option("--kind", o.kind, "partial or loc-scale")->check(CLI::IsMember({"partial", "loc-scale"}));
  perm->add_option("--layers", o.layers, "Loc-scale layers");
  perm->add_option("--sigma", o.sigma, "Loc-scale scale");
  perm->add_option("--runs", o.runs, "Random shuffles");
  perm->add_option("--iters", o.iters, "Iteration limit per run");
  perm->add_option("--lr", o.lr, "Learning rate");
  perm->add_option("--tau", o.tau, "Temperature");
  perm->add_option("--batch", o.batch, "Samples per step (0 = exact expectation)");
  perm->add_option("--jitter", o.jitter, "Initial logit jitter");
  perm->add_option("--workers", o.workers, "Worker threads (0 = logical cores)");
  perm->add_option("--summary", o.summary, "Summary CSV");
  perm->callback([&] {
    if (perm->count("--iters") == 0) o.iters = 5000;
    if (perm->count("--lr") == 0) o.lr = 0.1;
    if (perm->count("--tau") == 0) o.tau = 1.0;
    run = cmd_partial_flows;
  });

  auto* gmm = app.add_subcommand("fit-gmm", "Variational EM with closed-form and MDNF E-steps");
  add_run_flags(gmm, o);
  add_grid_flags(gmm, o);
  gmm->add_option("--data", o.data, "Point CSV (simulated three clusters when unset)");
  gmm->add_option("--k", o.k, "Clusters");
  gmm->add_option("--algo", o.algos, "vif and/or bvif")->delimiter(',');
  gmm->add_option("--flows", o.flow_list, "Component counts")->delimiter(',');
  gmm->add_option("--em-steps", o.em_steps, "EM steps");
  gmm->add_option("--iters", o.iters, "E-step iterations");
  gmm->add_option("--lr", o.lr, "Learning rate");
  gmm->add_option("--tau", o.tau, "Initial temperature");
  gmm->add_option("--gamma", o.gamma, "Annealing rate");
  gmm->callback([&] {
    if (gmm->count("--replicates") == 0) o.replicates = 10;
    if (gmm->count("--k") == 0) o.k = 3;
    if (gmm->count("--iters") == 0) o.iters = 200;
    if (gmm->count("--lr") == 0) o.lr = 0.1;
    if (gmm->count("--gamma") == 0) o.gamma = 0.01;
    run = cmd_fit_gmm;
  });

  auto* var = app.add_subcommand("variance", "Spread of repeated internal ELBO estimates");
  add_model_flags(var, o);
  add_fit_flags(var, o);
  add_run_flags(var, o);
  var->add_option("--algo", o.algo, "vif, bvif or bvi");
  var->add_option("--flows", o.flows, "Mixture components B");
  var->add_option("--tau", o.tau, "Initial temperature");
  var->add_option("--mixture", o.mixture, "Saved mixture instead of training");
  var->add_option("--repetitions", o.repetitions, "Independent estimates");
  var->callback([&] {
    if (var->count("--samples") == 0) o.samples = 1;
    run = cmd_variance;
  });

  auto* ev = app.add_subcommand("eval", "Exact ELBO and KL of a saved mixture");
  add_model_flags(ev, o);
  ev->add_option("--mixture", o.mixture, "Saved mixture");
  ev->add_option("--out", o.out, "Output CSV ('-' for stdout)");
  ev->add_option("--config", o.config, "JSON file of flag values");
  ev->callback([&] { run = cmd_eval; });

  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    args = merge_config(args);
  } catch (const InvalidInput& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    return run(o);
  } catch (const InvalidInput& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
