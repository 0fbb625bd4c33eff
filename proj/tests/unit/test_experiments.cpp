#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "doctest.h"
#include "mdnf/experiments.hpp"
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

FitConfig quick(int iterations) {
  FitConfig cfg;
  cfg.iterations = iterations;
  cfg.checkpoint_every = 0;
  cfg.samples = 20;
  cfg.external_samples = 200;
  return cfg;
}

bool is_rotation(const std::vector<int>& perm) {
  const int k = static_cast<int>(perm.size());
  for (int u = 0; u < k; ++u) {
    if (perm[static_cast<std::size_t>(u)] != (perm[0] + u) % k) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("cell seeds") {
  CHECK(cell_seed(1, 0) == cell_seed(1, 0));
  std::set<std::uint64_t> seen;
  for (std::uint64_t m = 0; m < 4; ++m) {
    for (std::uint64_t r = 0; r < 50; ++r) seen.insert(cell_seed(m, r));
  }
  CHECK(seen.size() == 200);
}

TEST_CASE("parallel_for visits every index once") {
  for (int workers : {1, 2, 5}) {
    std::vector<std::atomic<int>> hits(37);
    parallel_for(37, workers, [&](int i) { ++hits[static_cast<std::size_t>(i)]; });
    for (const auto& h : hits) CHECK(h.load() == 1);
  }
  std::atomic<int> done{0};
  CHECK_THROWS_AS(parallel_for(10, 3,
                               [&](int i) {
                                 ++done;
                                 if (i == 4) throw InvalidInput("boom");
                               }),
                  InvalidInput);
  CHECK(done.load() == 10);
  parallel_for(0, 2, [](int) { FAIL("no work expected"); });
}

TEST_CASE("percentiles interpolate linearly") {
  const Percentiles p = percentiles({4.0, 1.0, 3.0, 2.0});
  CHECK(p.p25 == doctest::Approx(1.75));
  CHECK(p.p50 == doctest::Approx(2.5));
  CHECK(p.p75 == doctest::Approx(3.25));
  CHECK(p.count == 4);
  const Percentiles q = percentiles({std::nan(""), 5.0});
  CHECK(q.count == 1);
  CHECK(q.p25 == 5.0);
  CHECK(q.p75 == 5.0);
  const double inf = std::numeric_limits<double>::infinity();
  const Percentiles r = percentiles({1.0, inf, inf});
  CHECK(r.p50 == inf);
  CHECK(r.p75 == inf);
  CHECK(std::isnan(percentiles({}).p50));
}

TEST_CASE("single-cell grid matches a direct fit") {
  const BnPosterior post = tiny_posterior();
  TempGridSpec spec;
  spec.method = GridMethod::mdnf;
  spec.taus = {5.0};
  spec.master_seed = 3;
  spec.base = quick(300);
  spec.base.flows = 3;
  spec.keep_reports = true;
  const auto cells = run_temp_grid(post, spec);
  REQUIRE(cells.size() == 1);
  REQUIRE(cells[0].outcome.ok);
  REQUIRE(cells[0].report);

  FitConfig cfg = spec.base;
  cfg.seed = cell_seed(3, 0);
  cfg.schedule.tau0 = 5.0;
  cfg.exact_posterior = std::make_shared<Eigen::VectorXd>(post.exact_posterior().table);
  const FitReport direct = fit(post, cfg);
  CHECK(direct.final_external_elbo == cells[0].outcome.elbo);
  CHECK(*direct.final_kl == cells[0].outcome.kl);
  CHECK(direct.mixture->rho() == cells[0].report->mixture->rho());
  for (int b = 0; b < 3; ++b) {
    CHECK(direct.mixture->component_parameters(b) == cells[0].report->mixture->component_parameters(b));
  }
}

TEST_CASE("grid output does not depend on the worker count") {
  const BnPosterior post = cancer_posterior();
  TempGridSpec spec;
  spec.method = GridMethod::gs;
  spec.taus = {0.5, 2.0};
  spec.tau_ps = {0.5, 2.0};
  spec.replicates = 2;
  spec.master_seed = 11;
  spec.base = quick(60);
  std::string out[2];
  for (int i = 0; i < 2; ++i) {
    spec.workers = i == 0 ? 1 : 3;
    std::ostringstream os;
    const auto cells = run_temp_grid(post, spec);
    CHECK(cells.size() == 8);
    write_temp_grid_csv(os, spec.method, cells);
    write_temp_grid_summary(os, spec.method, cells);
    out[i] = os.str();
  }
  CHECK(out[0] == out[1]);
  CHECK(out[0].rfind("method,tau,tau_p,replicate,seed,status,final_elbo,final_kl,error\n", 0) == 0);
}

TEST_CASE("mdnf grid ignores the prior temperature and records failures") {
  const BnPosterior post = tiny_posterior();
  TempGridSpec spec;
  spec.method = GridMethod::mdnf;
  spec.taus = {1.0, -1.0};
  spec.tau_ps = {0.5, 2.0, 3.0};
  spec.replicates = 2;
  spec.base = quick(50);
  const auto cells = run_temp_grid(post, spec);
  REQUIRE(cells.size() == 4);
  CHECK(cells[0].outcome.ok);
  CHECK(std::isnan(cells[0].tau_p));
  CHECK_FALSE(cells[2].outcome.ok);
  CHECK_FALSE(cells[2].outcome.error.empty());
  CHECK(std::isnan(cells[2].outcome.kl));
  std::ostringstream os;
  write_temp_grid_summary(os, spec.method, cells);
  CHECK(os.str().find("mdnf,-1,,2,2,,,") != std::string::npos);
}

TEST_CASE("grid method names") {
  CHECK(parse_grid_method("st-gs") == GridMethod::st_gs);
  CHECK(parse_grid_method("mdnf") == GridMethod::mdnf);
  CHECK(grid_method_name(GridMethod::gs) == "gs");
  CHECK_THROWS_AS(parse_grid_method("vif"), InvalidInput);
}

TEST_CASE("vif and bvif agree at B = 1 with matched seeds") {
  const BnPosterior post = cancer_posterior();
  AlgoCompareSpec spec;
  spec.algorithms = {Algorithm::vif, Algorithm::bvif};
  spec.flows = {1, 2};
  spec.replicates = 3;
  spec.master_seed = 5;
  spec.base = quick(200);
  const auto cells = run_algo_comparison(post, spec);
  REQUIRE(cells.size() == 12);
  for (int r = 0; r < 3; ++r) {
    const AlgoCell& v = cells[static_cast<std::size_t>(r)];
    const AlgoCell& b = cells[static_cast<std::size_t>(6 + r)];
    CHECK(v.algorithm == Algorithm::vif);
    CHECK(b.algorithm == Algorithm::bvif);
    CHECK(v.flows == 1);
    CHECK(b.flows == 1);
    CHECK(v.outcome.seed == b.outcome.seed);
    CHECK(v.outcome.elbo == b.outcome.elbo);
    CHECK(v.outcome.kl == b.outcome.kl);
  }
  const auto rows = summarize(cells);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].elbo.p50 == rows[2].elbo.p50);
  CHECK(rows[0].elbo.count == 3);
  std::ostringstream os;
  write_algo_summary(os, rows);
  CHECK(os.str().rfind("algorithm,flows,runs,failures,elbo_p25", 0) == 0);
}

TEST_CASE("duplicate alphas give duplicate summaries") {
  const BnPosterior post = tiny_posterior();
  BaseSweepSpec spec;
  spec.alphas = {0.5, 0.5, 100.0};
  spec.flows = 3;
  spec.replicates = 2;
  spec.base = quick(40);
  const auto cells = run_base_sweep(post, spec);
  REQUIRE(cells.size() == 6);
  const auto rows = summarize(cells, spec.alphas);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].kl.p50 == rows[1].kl.p50);
  CHECK(rows[0].elbo.p25 == rows[1].elbo.p25);
  CHECK(rows[0].kl.count == 2);
  spec.alphas = {0.0};
  CHECK_THROWS_AS(run_base_sweep(post, spec), InvalidInput);
}

TEST_CASE("recovery targets") {
  CHECK(recovery_target(5).sum() == doctest::Approx(1.0));
  CHECK(recovery_target(7).sum() == doctest::Approx(1.0));
  CHECK(recovery_target(7)[0] == 0.04);
  CHECK_THROWS_AS(recovery_target(6), InvalidInput);
}

TEST_CASE("identity shuffle succeeds before any update") {
  for (FlowKind kind : {FlowKind::partial, FlowKind::loc_scale}) {
    RecoverySpec spec;
    spec.kind = kind;
    SeededRng rng(1);
    const RecoveryRun run = recover_permutation(recovery_target(5), {0, 1, 2, 3, 4}, recovery_stack(spec), spec, rng);
    CHECK(run.success);
    CHECK(run.iterations == 0);
  }
}

TEST_CASE("partial flows recover a shuffled target") {
  RecoverySpec spec;
  spec.kind = FlowKind::partial;
  spec.runs = 10;
  spec.master_seed = 2;
  const RecoveryResult r = run_permutation_recovery(spec);
  CHECK(r.success_fraction >= 0.8);
  for (const auto& run : r.runs) {
    if (!run.success) continue;
    // pushforward of p_u equals p_x: x = perm[u] carries p_x[shuffle[u]]
    for (int u = 0; u < 5; ++u) CHECK(run.permutation[static_cast<std::size_t>(u)] == run.shuffle[static_cast<std::size_t>(u)]);
  }
  std::ostringstream os;
  write_recovery_summary(os, spec, r);
  CHECK(os.str().find("partial,5,10,10,") != std::string::npos);
}

TEST_CASE("unit-scale loc-scale stacks only realize rotations") {
  RecoverySpec spec;
  spec.kind = FlowKind::loc_scale;
  spec.layers = 3;
  spec.runs = 12;
  spec.max_iterations = 300;
  const RecoveryResult r = run_permutation_recovery(spec);
  for (const auto& run : r.runs) {
    CHECK(is_rotation(run.permutation));
    if (run.success) CHECK(is_rotation(run.shuffle));
  }
  RecoverySpec rot = spec;
  SeededRng rng(4);
  const RecoveryRun run = recover_permutation(recovery_target(5), {3, 4, 0, 1, 2}, recovery_stack(rot), rot, rng);
  CHECK(run.success);
}

TEST_CASE("recovery is reproducible and worker independent") {
  RecoverySpec spec;
  spec.runs = 6;
  spec.max_iterations = 200;
  spec.workers = 1;
  const RecoveryResult a = run_permutation_recovery(spec);
  spec.workers = 3;
  const RecoveryResult b = run_permutation_recovery(spec);
  std::ostringstream oa, ob;
  write_recovery_csv(oa, a);
  write_recovery_csv(ob, b);
  CHECK(oa.str() == ob.str());
}

TEST_CASE("GMM start places means on data points") {
  SeededRng rng(3);
  const Eigen::MatrixXd data = simulated_three_clusters(20, rng);
  const GmmState st = gmm_random_start(data, 3, rng);
  for (int j = 0; j < 3; ++j) {
    bool found = false;
    for (Eigen::Index n = 0; n < data.rows(); ++n) found = found || (data.row(n).transpose() - st.m.col(j)).norm() == 0;
    CHECK(found);
    CHECK(st.alpha[j] == doctest::Approx(1.0 / 3 + 20));
    CHECK(st.nu[j] == doctest::Approx(2.0 + 20));
  }
  CHECK_THROWS_AS(gmm_random_start(data, 61, rng), InvalidInput);
}

TEST_CASE("closed-form EM never decreases the bound") {
  SeededRng rng(8);
  const Eigen::MatrixXd data = simulated_three_clusters(50, rng);
  const GmmTrace tr = gmm_closed_form_em(gmm_random_start(data, 3, rng), 40);
  REQUIRE(tr.elbo.size() == 40);
  for (std::size_t s = 1; s < tr.elbo.size(); ++s) CHECK(tr.elbo[s] >= tr.elbo[s - 1] - 1e-9);
}

TEST_CASE("delta mixture responsibilities and entropy") {
  const std::vector<int> cards{3, 3};
  std::vector<MixtureComponent> comps;
  for (const Config& at : std::vector<Config>{{0, 1}, {0, 1}, {2, 1}}) {
    MixtureComponent c;
    for (std::size_t d = 0; d < 2; ++d) {
      Eigen::VectorXd logits = Eigen::VectorXd::Zero(3);
      logits[at[d]] = 5.0;
      c.flows.emplace_back(std::vector<DiscreteFlow>{DiscreteFlow::shift_only(3, logits)});
      c.bases.emplace_back(DeltaBase(0, 3));
    }
    comps.push_back(std::move(c));
  }
  const FlowMixture m(cards, comps, Eigen::Vector3d(0.25, 0.25, 0.5));
  double h = 0.0;
  const Eigen::MatrixXd r = mixture_responsibilities(m, h);
  CHECK(r(0, 0) == doctest::Approx(0.5));
  CHECK(r(0, 2) == doctest::Approx(0.5));
  CHECK(r(1, 1) == doctest::Approx(1.0));
  CHECK(h == doctest::Approx(std::log(2.0)));
}

TEST_CASE("assignment agreement is label invariant") {
  Eigen::MatrixXd a(4, 3), b(4, 3);
  a << 1, 0, 0, 0, 1, 0, 0, 0, 1, 0.6, 0.4, 0;
  b << 0, 0, 1, 1, 0, 0, 0, 1, 0, 0, 0, 1;
  CHECK(assignment_agreement(a, b) == 1.0);
  b(3, 0) = 2.0;
  CHECK(assignment_agreement(a, b) == 0.75);
  CHECK_THROWS_AS(assignment_agreement(a, b.topRows(2)), InvalidInput);
}

TEST_CASE("one cluster gives identical bounds") {
  SeededRng rng(5);
  const Eigen::MatrixXd data = simulated_three_clusters(10, rng);
  GmmCompareSpec spec;
  spec.k = 1;
  spec.algorithms = {Algorithm::vif, Algorithm::bvif};
  spec.flows = {1, 3};
  spec.replicates = 1;
  spec.em_steps = 3;
  spec.inner_iterations = 20;
  const auto cells = run_gmm_comparison(data, spec);
  REQUIRE(cells.size() == 4);
  for (const auto& c : cells) {
    REQUIRE(c.ok);
    for (std::size_t s = 0; s < c.elbo.size(); ++s) CHECK(c.elbo[s] == doctest::Approx(c.closed_form[s]).epsilon(1e-12));
    CHECK(c.agreement == 1.0);
  }
}

TEST_CASE("MDNF E-step tracks the closed-form E-step") {
  SeededRng rng(0);
  const Eigen::MatrixXd data = simulated_three_clusters(30, rng);
  GmmCompareSpec spec;
  spec.replicates = 1;
  spec.em_steps = 10;
  const auto cells = run_gmm_comparison(data, spec);
  REQUIRE(cells.size() == 1);
  REQUIRE(cells[0].ok);
  CHECK(cells[0].agreement >= 0.9);
  const double gap = (cells[0].closed_form.back() - cells[0].elbo.back()) / std::abs(cells[0].closed_form.back());
  CHECK(gap < 0.1);
  std::ostringstream os;
  write_gmm_csv(os, cells);
  const std::string csv = os.str();
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 11);
}
