#include <cmath>
#include <numeric>
#include <sstream>

#include "doctest.h"
#include "mdnf/bayesnet.hpp"
#include "mdnf/eval.hpp"
#include "mdnf/infer.hpp"
#include "test_helpers.hpp"

using namespace mdnf;

namespace {

std::string data_path(const std::string& name) { return std::string(MDNF_DATA_DIR) + "/" + name; }

BnPosterior tiny_posterior() {
  const BayesNet net = BayesNet::load(data_path("tiny.bn"));
  return BnPosterior(net, parse_evidence(net, {"B=1"}));
}

BnPosterior cancer_posterior() {
  const BayesNet net = BayesNet::load(data_path("cancer.bn"));
  return BnPosterior(net, parse_evidence(net, {"Cancer=0"}));
}

FitConfig small_config(Algorithm a, int flows, int iterations, const ExactPosterior& ex) {
  FitConfig cfg;
  cfg.algorithm = a;
  cfg.flows = flows;
  cfg.iterations = iterations;
  cfg.seed = 7;
  cfg.checkpoint_every = 0;
  cfg.exact_posterior = std::make_shared<Eigen::VectorXd>(ex.table);
  return cfg;
}

// KL of the best uniform-weight B-atom mixture on a two-state posterior.
double best_two_state_kl(double p0, int b) {
  double best = std::numeric_limits<double>::infinity();
  for (int n = 0; n <= b; ++n) {
    const double q = static_cast<double>(n) / b;
    double kl = 0.0;
    if (q > 0) kl += q * std::log(q / p0);
    if (q < 1) kl += (1 - q) * std::log((1 - q) / (1 - p0));
    best = std::min(best, kl);
  }
  return best;
}

}  // namespace

TEST_CASE("anneal schedule") {
  CHECK(anneal({10.0, 0.01}, 0).value() == doctest::Approx(10.0));
  CHECK(anneal({10.0, 0.01}, 100).value() == doctest::Approx(3.6788).epsilon(1e-4));
  for (int t : {0, 10, 10000}) CHECK(anneal({2.5, 0.0}, t).value() == 2.5);
  CHECK_THROWS_AS(anneal({10.0, 0.01}, -1), InvalidInput);
}

TEST_CASE("optimizers and clipping") {
  Eigen::VectorXd p = Eigen::VectorXd::Zero(2);
  RmsProp rms(0.01);
  rms.step(p, Eigen::Vector2d(4.0, -0.5));
  CHECK(p[0] == doctest::Approx(0.01 * std::sqrt(10.0)).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(-0.01 * std::sqrt(10.0)).epsilon(1e-6));
  Eigen::VectorXd q = Eigen::VectorXd::Zero(1);
  Adam adam(0.1);
  adam.step(q, Eigen::VectorXd::Constant(1, 3.0));
  CHECK(q[0] == doctest::Approx(0.1).epsilon(1e-6));
  Eigen::VectorXd g(4);
  g << std::nan(""), std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(), 2.0;
  CHECK(clip_gradient(g) == 3);
  CHECK(g[0] == 0.0);
  CHECK(g[1] == 1e6);
  CHECK(g[2] == -1e6);
  CHECK(g[3] == 2.0);
}

TEST_CASE("ELBO estimate at the exact posterior equals the log evidence") {
  const BnPosterior post = tiny_posterior();
  const ExactPosterior ex = post.exact_posterior();
  const FlowMixture q = table_fit(post.cardinalities(), ex.table);
  SeededRng rng(1);
  const int n = 400;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = elbo_value(q, post, 1, rng);
    sum += v;
    sq += v * v;
  }
  const double mean = sum / n;
  const double se = std::sqrt(std::max(sq / n - mean * mean, 0.0) / n);
  CHECK(std::abs(mean - std::log(0.41)) <= 3 * se + 1e-12);
  CHECK(exact_elbo(q, post) == doctest::Approx(std::log(0.41)).epsilon(1e-12));
}

TEST_CASE("ELBO estimate of a single delta is deterministic") {
  const BnPosterior post = cancer_posterior();
  SeededRng init(3);
  const FlowMixture q = FlowMixture::shift_only_delta(post.cardinalities(), 1, init);
  const Config x = q.sample(init);
  SeededRng rng(4);
  for (int s : {1, 5}) CHECK(elbo_value(q, post, s, rng) == doctest::Approx(post.log_joint(x)).epsilon(1e-12));
}

TEST_CASE("deterministic allocation has zero variance and matches the exact ELBO") {
  const BnPosterior post = cancer_posterior();
  SeededRng init(5);
  const FlowMixture q = FlowMixture::shift_only_delta(post.cardinalities(), 12, init);
  SeededRng rng(6);
  const double first = elbo_value(q, post, 0, rng);
  for (int i = 0; i < 5; ++i) CHECK(elbo_value(q, post, 0, rng) == first);
  CHECK(first == doctest::Approx(exact_elbo(q, post)).epsilon(1e-12));
  const VarianceStats st = elbo_variance_study(q, post, 100, 0, rng);
  CHECK(st.std == 0.0);
}

TEST_CASE("S=1 ELBO estimates are unbiased") {
  const BnPosterior post = cancer_posterior();
  SeededRng init(9);
  std::vector<std::vector<BaseDist>> bases(3);
  for (auto& comp : bases) {
    for (int k : post.cardinalities()) comp.emplace_back(sample_dirichlet_base(1.0, k, init));
  }
  const FlowMixture q = FlowMixture::shift_only(post.cardinalities(), bases, init);
  SeededRng rng(10);
  const VarianceStats st = elbo_variance_study(q, post, 10000, 1, rng);
  const double se = st.std / std::sqrt(10000.0);
  CHECK(std::abs(st.mean - exact_elbo(q, post)) < 3 * se);
  const VarianceStats many = elbo_variance_study(q, post, 100, 100, rng);
  const VarianceStats one = elbo_variance_study(q, post, 100, 1, rng);
  CHECK(many.std < one.std);
}

TEST_CASE("ELBO never exceeds the log evidence") {
  const BnPosterior post = cancer_posterior();
  const double log_z = post.exact_posterior().log_evidence;
  SeededRng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const FlowMixture q = FlowMixture::shift_only_delta(post.cardinalities(), 1 + rng.uniform_int(20), rng);
    CHECK(exact_elbo(q, post) <= log_z + 1e-12);
  }
}

TEST_CASE("VIF on the tiny network reaches the best uniform-weight allocation") {
  const BnPosterior post = tiny_posterior();
  const ExactPosterior ex = post.exact_posterior();
  for (int b : {3, 4}) {
    const FitReport r = fit(post, small_config(Algorithm::vif, b, 2000, ex));
    CHECK(static_cast<int>(r.records.size()) == 2000);
    REQUIRE(r.final_kl);
    CHECK(*r.final_kl == doctest::Approx(best_two_state_kl(ex.table[0], b)).epsilon(1e-9));
  }
  CHECK(best_two_state_kl(ex.table[0], 3) < 0.01);
}

TEST_CASE("BVIF with one flow follows the VIF trajectory") {
  const BnPosterior post = cancer_posterior();
  const ExactPosterior ex = post.exact_posterior();
  const FitReport a = fit(post, small_config(Algorithm::vif, 1, 300, ex));
  const FitReport b = fit(post, small_config(Algorithm::bvif, 1, 300, ex));
  REQUIRE(a.records.size() == b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    CHECK(a.records[i].internal_objective == b.records[i].internal_objective);
  }
}

TEST_CASE("BVIF improves on a single flow and keeps weights on the simplex") {
  const BnPosterior post = cancer_posterior();
  const ExactPosterior ex = post.exact_posterior();
  const FitReport one = fit(post, small_config(Algorithm::vif, 1, 1000, ex));
  const FitReport many = fit(post, small_config(Algorithm::bvif, 8, 4000, ex));
  REQUIRE(many.mixture);
  CHECK(many.mixture->components() == 8);
  CHECK(many.mixture->rho().sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(many.mixture->rho().minCoeff() > 0.0);
  CHECK(many.final_external_elbo > one.final_external_elbo);
  CHECK(many.final_external_elbo <= ex.log_evidence + 1e-12);
}

TEST_CASE("BVI learns weights over fixed deltas") {
  const BnPosterior post = tiny_posterior();
  const ExactPosterior ex = post.exact_posterior();
  const FitReport r = fit(post, small_config(Algorithm::bvi, 2, 2000, ex));
  REQUIRE(r.final_kl);
  CHECK(*r.final_kl < 0.05);
  const FitReport single = fit(post, small_config(Algorithm::bvi, 1, 50, ex));
  for (const auto& rec : single.records) CHECK(rec.internal_objective == single.records[0].internal_objective);
  CHECK(single.final_external_elbo == doctest::Approx(single.records[0].internal_objective).epsilon(1e-12));
}

TEST_CASE("GS fits the tiny network with a good temperature pair") {
  const BnPosterior post = tiny_posterior();
  const ExactPosterior ex = post.exact_posterior();
  FitConfig cfg = small_config(Algorithm::gs, 1, 1500, ex);
  cfg.schedule = {0.5, 0.0};
  cfg.tau_p = 0.5;
  cfg.samples = 20;
  cfg.external_samples = 1000;
  const FitReport r = fit(post, cfg);
  REQUIRE(r.final_kl);
  CHECK(*r.final_kl < 0.1);
  cfg.algorithm = Algorithm::st_gs;
  const FitReport st = fit(post, cfg);
  REQUIRE(st.final_kl);
  CHECK(std::isfinite(*st.final_kl));
}

TEST_CASE("Gumbel-Softmax draws approach one-hot as the temperature shrinks") {
  Eigen::VectorXd logits(3);
  logits << 0.3, -0.2, 0.1;
  for (double tau : {1.0, 0.1, 0.01}) {
    SeededRng rng(21);
    const Eigen::VectorXd y = gumbel_softmax_sample(logits, Temperature(tau), rng);
    if (tau == 0.01) CHECK(y.maxCoeff() > 1 - 1e-6);
  }
}

TEST_CASE("fits are reproducible") {
  const BnPosterior post = cancer_posterior();
  const ExactPosterior ex = post.exact_posterior();
  for (Algorithm a : {Algorithm::vif, Algorithm::bvif, Algorithm::gs}) {
    FitConfig cfg = small_config(a, 3, 120, ex);
    cfg.samples = 5;
    cfg.checkpoint_every = 50;
    cfg.external_samples = 200;
    std::ostringstream x, y;
    write_report_csv(x, fit(post, cfg));
    write_report_csv(y, fit(post, cfg));
    CHECK(x.str() == y.str());
  }
}

TEST_CASE("report CSV layout") {
  const BnPosterior post = tiny_posterior();
  const ExactPosterior ex = post.exact_posterior();
  FitConfig cfg = small_config(Algorithm::vif, 4, 250, ex);
  cfg.checkpoint_every = 100;
  const FitReport r = fit(post, cfg);
  std::ostringstream out;
  write_report_csv(out, r);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "iteration,internal_objective,tau_t,external_elbo,kl_exact,wallclock_ms");
  int rows = 0, filled = 0;
  while (std::getline(in, line)) {
    ++rows;
    CHECK(std::count(line.begin(), line.end(), ',') == 5);
    CHECK(line.back() == ',');
    if (line.find(",,") == std::string::npos) ++filled;
  }
  CHECK(rows == 250);
  CHECK(filled == 3);
  std::ostringstream timed;
  write_report_csv(timed, r, true);
  CHECK(timed.str().find(",\n") == std::string::npos);
}

TEST_CASE("invalid fit configurations are rejected") {
  const BnPosterior post = tiny_posterior();
  FitConfig cfg;
  cfg.iterations = 1;
  cfg.flows = 0;
  CHECK_THROWS_AS(fit(post, cfg), InvalidInput);
  cfg.flows = 1;
  cfg.samples = 0;
  CHECK_THROWS_AS(fit(post, cfg), InvalidInput);
  cfg.samples = 1;
  cfg.schedule.tau0 = 0;
  CHECK_THROWS_AS(fit(post, cfg), InvalidInput);
  CHECK_THROWS_AS(parse_algorithm("em"), InvalidInput);
  CHECK(parse_algorithm("st-gs") == Algorithm::st_gs);
}

// --- eval ----------------------------------------------------------------------------------

TEST_CASE("KL to the exact table") {
  CHECK(kl_to_exact(Eigen::Vector2d(0.3, 0.7), Eigen::Vector2d(0.3, 0.7)).value == 0.0);
  CHECK(kl_to_exact(Eigen::Vector2d(1, 0), Eigen::Vector2d(0.5, 0.5)).value == doctest::Approx(std::log(2.0)));
  const KlResult bad = kl_to_exact(Eigen::Vector2d(0.5, 0.5), Eigen::Vector2d(1, 0));
  CHECK(bad.support_violation);
  CHECK(std::isinf(bad.value));
  SeededRng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    Eigen::VectorXd q(6), p(6);
    for (int i = 0; i < 6; ++i) {
      q[i] = rng.uniform();
      p[i] = 0.01 + rng.uniform();
    }
    q /= q.sum();
    p /= p.sum();
    CHECK(kl_to_exact(q, p).value >= 0.0);
    CHECK(kl_to_exact(q, q).value < 1e-12);
  }
}

TEST_CASE("mixture tables") {
  SeededRng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::vector<int> cards{2 + rng.uniform_int(3), 2 + rng.uniform_int(3)};
    std::vector<std::vector<BaseDist>> bases(3);
    for (auto& comp : bases) {
      for (int k : cards) comp.emplace_back(sample_dirichlet_base(0.5, k, rng));
    }
    const FlowMixture m = FlowMixture::shift_only(cards, bases, rng);
    const Eigen::VectorXd table = mdnf_q_table(m);
    CHECK(table.sum() == doctest::Approx(1.0).epsilon(1e-9));
    for (Eigen::Index i = 0; i < table.size(); ++i) CHECK(table[i] == doctest::Approx(m.prob(m.config_at(i))));
  }
  Eigen::VectorXd target(5);
  target << 0.05, 0.15, 0.3, 0.2, 0.3;
  for (int b : {1, 3, 7, 20}) {
    const Eigen::VectorXd t = mdnf_q_table(constructive_fit(CategoricalParams(target), b));
    CHECK((t - target).cwiseAbs().maxCoeff() <= 1.0 / b + 1e-12);
  }
  const FlowMixture one = FlowMixture::shift_only_delta({3, 4}, 1, rng);
  const Eigen::VectorXd delta = mdnf_q_table(one);
  CHECK(delta.maxCoeff() == 1.0);
  CHECK(delta.sum() == 1.0);
  CHECK_THROWS_AS(mdnf_q_table(FlowMixture::shift_only_delta(std::vector<int>(30, 3), 1, rng)), InvalidInput);
}

TEST_CASE("discretized GS ELBO") {
  const BnPosterior post = tiny_posterior();
  const ExactPosterior ex = post.exact_posterior();
  SeededRng rng(4);
  // near-delta logits
  Eigen::VectorXd logits(2);
  logits << 20.0, 0.0;
  const Estimate d = gs_discretized_elbo(logits, post, 1000, rng);
  CHECK(d.value == doctest::Approx(post.log_joint(Config{0})).epsilon(1e-6));
  // exact posterior logits
  logits << std::log(ex.table[0]), std::log(ex.table[1]);
  const Estimate e = gs_discretized_elbo(logits, post, 20000, rng);
  CHECK(std::abs(e.value - std::log(0.41)) < 3 * e.standard_error + 1e-3);
  CHECK(e.standard_error > 0.0);
  CHECK_THROWS_AS(gs_discretized_elbo(logits, post, 10, rng), InvalidInput);
}

TEST_CASE("discretized entropy converges to the closed form") {
  // one latent node, uniform posterior logits: entropy term approaches log 2
  const BayesNet net = BayesNet::parse(R"({"nodes": [
      {"name": "A", "cardinality": 2, "parents": [], "cpt": [0.5, 0.5]},
      {"name": "B", "cardinality": 2, "parents": ["A"], "cpt": [0.5, 0.5, 0.5, 0.5]}]})");
  const BnPosterior post(net, parse_evidence(net, {"B=0"}));
  SeededRng rng(5);
  const Estimate e = gs_discretized_elbo(Eigen::Vector2d::Zero(), post, 100000, rng);
  const double joint = std::log(0.25);
  CHECK(std::abs(e.value - joint - std::log(2.0)) < 0.01);
}

TEST_CASE("objective gap trace") {
  const BnPosterior post = cancer_posterior();
  const ExactPosterior ex = post.exact_posterior();
  FitConfig cfg = small_config(Algorithm::vif, 6, 500, ex);
  cfg.checkpoint_every = 100;
  const FitReport r = fit(post, cfg);
  const auto gap = objective_gap_trace(r, [&](const Snapshot& s) { return exact_elbo(*s.mixture, post); });
  CHECK(gap.size() == 5);
  for (const auto& g : gap) CHECK(g.internal == doctest::Approx(g.external).epsilon(1e-9));
  // no learning: flat series
  FitConfig frozen = cfg;
  frozen.algorithm = Algorithm::bvi;
  frozen.flows = 1;
  const FitReport f = fit(post, frozen);
  const auto flat = objective_gap_trace(f, [&](const Snapshot& s) { return exact_elbo(*s.mixture, post); });
  for (const auto& g : flat) CHECK(g.external == flat.front().external);
}
