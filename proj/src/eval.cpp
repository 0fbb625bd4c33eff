#include "mdnf/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace mdnf {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::int64_t checked_count(const std::vector<int>& cards, std::int64_t cap) {
  std::int64_t n = 1;
  for (int k : cards) {
    if (n > cap / k) throw InvalidInput("configuration space exceeds the enumeration cap of " + std::to_string(cap));
    n *= k;
  }
  return n;
}

// Outer product of per-dimension vectors, first dimension slowest.
Eigen::VectorXd kron_all(const std::vector<Eigen::VectorXd>& parts) {
  Eigen::VectorXd cur = Eigen::VectorXd::Ones(1);
  for (const auto& v : parts) {
    Eigen::VectorXd next(cur.size() * v.size());
    for (Eigen::Index i = 0; i < cur.size(); ++i) next.segment(i * v.size(), v.size()) = cur[i] * v;
    cur = std::move(next);
  }
  return cur;
}

Config config_from_index(std::int64_t index, const std::vector<int>& cards) {
  Config c(cards.size());
  for (std::size_t d = cards.size(); d-- > 0;) {
    c[d] = static_cast<int>(index % cards[d]);
    index /= cards[d];
  }
  return c;
}

bool all_delta_bases(const FlowMixture& m) {
  for (int b = 0; b < m.components(); ++b) {
    for (const auto& base : m.component(b).bases) {
      if (!is_delta(base)) return false;
    }
  }
  return true;
}

double elbo_from_table(const Eigen::VectorXd& q, const std::vector<int>& cards, const LatentModel& model) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < q.size(); ++i) {
    if (q[i] <= 0.0) continue;
    const double lp = model.log_joint(config_from_index(i, cards));
    if (lp == -kInf) return -kInf;
    s += q[i] * (lp - std::log(q[i]));
  }
  return s;
}

double entropy_of_counts(const Eigen::VectorXd& counts, double total) {
  double h = 0.0;
  for (Eigen::Index k = 0; k < counts.size(); ++k) {
    if (counts[k] > 0) {
      const double p = counts[k] / total;
      h -= p * std::log(p);
    }
  }
  return h;
}

}  // namespace

KlResult kl_to_exact(const Eigen::VectorXd& q, const Eigen::VectorXd& p) {
  if (q.size() != p.size()) throw InvalidInput("kl_to_exact: tables differ in size");
  KlResult r;
  for (Eigen::Index i = 0; i < q.size(); ++i) {
    if (q[i] <= 0.0) continue;
    if (p[i] <= 0.0) {
      r.value = kInf;
      r.support_violation = true;
      return r;
    }
    r.value += q[i] * (std::log(q[i]) - std::log(p[i]));
  }
  r.value = std::max(r.value, 0.0);
  return r;
}

Eigen::VectorXd mdnf_q_table(const FlowMixture& m, std::int64_t cap) {
  const auto& cards = m.cardinalities();
  const std::int64_t n = checked_count(cards, cap);
  Eigen::VectorXd table = Eigen::VectorXd::Zero(n);
  for (int b = 0; b < m.components(); ++b) {
    const auto& comp = m.component(b);
    std::vector<Eigen::VectorXd> parts;
    for (std::size_t d = 0; d < cards.size(); ++d) {
      const Eigen::VectorXd base = base_probs(comp.bases[d]);
      Eigen::VectorXd v(cards[d]);
      for (int x = 0; x < cards[d]; ++x) v[x] = base[comp.flows[d].inverse_index(x)];
      parts.push_back(std::move(v));
    }
    table += m.rho()[b] * kron_all(parts);
  }
  return table;
}

Eigen::VectorXd factorized_q_table(const Eigen::VectorXd& logits, const std::vector<int>& cards, std::int64_t cap) {
  checked_count(cards, cap);
  std::vector<Eigen::VectorXd> parts;
  int off = 0;
  for (int k : cards) {
    if (off + k > logits.size()) throw InvalidInput("factorized_q_table: logits too short");
    Eigen::VectorXd v = logits.segment(off, k);
    v = (v.array() - v.maxCoeff()).exp();
    parts.push_back(v / v.sum());
    off += k;
  }
  if (off != logits.size()) throw InvalidInput("factorized_q_table: logits too long");
  return kron_all(parts);
}

double exact_elbo(const FlowMixture& m, const LatentModel& model, std::int64_t cap) {
  if (m.cardinalities() != model.cardinalities()) throw InvalidInput("exact_elbo: mixture does not match the model");
  if (!all_delta_bases(m)) return elbo_from_table(mdnf_q_table(m, cap), m.cardinalities(), model);
  std::map<Config, double> support;
  for (int b = 0; b < m.components(); ++b) {
    const auto& bases = m.component(b).bases;
    Config u;
    for (const auto& base : bases) u.push_back(std::get<DeltaBase>(base).atom);
    support[m.forward(b, u)] += m.rho()[b];
  }
  double s = 0.0;
  for (const auto& [x, q] : support) {
    if (q <= 0.0) continue;
    const double lp = model.log_joint(x);
    if (lp == -kInf) return -kInf;
    s += q * (lp - std::log(q));
  }
  return s;
}

double exact_elbo(const Eigen::VectorXd& logits, const LatentModel& model, std::int64_t cap) {
  return elbo_from_table(factorized_q_table(logits, model.cardinalities(), cap), model.cardinalities(), model);
}

Estimate gs_discretized_elbo(const Eigen::VectorXd& logits, const LatentModel& model, int samples, SeededRng& rng) {
  if (samples < 100) throw InvalidInput("gs_discretized_elbo: need at least 100 samples");
  const auto& cards = model.cardinalities();
  const int n = std::accumulate(cards.begin(), cards.end(), 0);
  if (logits.size() != n) throw InvalidInput("gs_discretized_elbo: logits do not match the model");
  std::vector<Config> draws(static_cast<std::size_t>(samples));
  std::vector<double> joint(static_cast<std::size_t>(samples));
  std::vector<Eigen::VectorXd> counts;
  for (int k : cards) counts.push_back(Eigen::VectorXd::Zero(k));
  double joint_sum = 0.0;
  for (int s = 0; s < samples; ++s) {
    Config x(cards.size());
    int off = 0;
    for (std::size_t d = 0; d < cards.size(); ++d) {
      int best = 0;
      double top = -kInf;
      for (int k = 0; k < cards[d]; ++k) {
        const double v = logits[off + k] + sample_gumbel(rng);
        if (v > top) {
          top = v;
          best = k;
        }
      }
      x[d] = best;
      counts[d][best] += 1.0;
      off += cards[d];
    }
    joint[static_cast<std::size_t>(s)] = model.log_joint(x);
    joint_sum += joint[static_cast<std::size_t>(s)];
    draws[static_cast<std::size_t>(s)] = std::move(x);
  }
  Estimate e;
  double h = 0.0;
  for (const auto& c : counts) h += entropy_of_counts(c, samples);
  e.value = joint_sum / samples + h;
  if (!std::isfinite(e.value)) {
    e.standard_error = kInf;
    return e;
  }
  // leave-one-out entropy per dimension and removed category
  std::vector<Eigen::VectorXd> loo;
  for (std::size_t d = 0; d < cards.size(); ++d) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(cards[d]);
    for (int k = 0; k < cards[d]; ++k) {
      if (counts[d][k] == 0) continue;
      Eigen::VectorXd c = counts[d];
      c[k] -= 1.0;
      v[k] = entropy_of_counts(c, samples - 1);
    }
    loo.push_back(std::move(v));
  }
  std::vector<double> theta(static_cast<std::size_t>(samples));
  double mean = 0.0;
  for (int s = 0; s < samples; ++s) {
    double v = (joint_sum - joint[static_cast<std::size_t>(s)]) / (samples - 1);
    for (std::size_t d = 0; d < cards.size(); ++d) v += loo[d][draws[static_cast<std::size_t>(s)][d]];
    theta[static_cast<std::size_t>(s)] = v;
    mean += v;
  }
  mean /= samples;
  double ss = 0.0;
  for (double v : theta) ss += (v - mean) * (v - mean);
  e.standard_error = std::sqrt((samples - 1.0) / samples * ss);
  return e;
}

std::vector<GapPoint> objective_gap_trace(const FitReport& r, const SnapshotEvaluator& external) {
  std::vector<GapPoint> out;
  for (const auto& snap : r.snapshots) {
    const auto it = std::find_if(r.records.begin(), r.records.end(),
                                 [&](const IterationRecord& rec) { return rec.iteration == snap.iteration; });
    if (it == r.records.end()) continue;
    out.push_back({snap.iteration, it->internal_objective, external(snap)});
  }
  return out;
}

VarianceStats elbo_variance_study(const FlowMixture& m, const LatentModel& model, int repetitions, int samples,
                                  SeededRng& rng) {
  if (repetitions < 2) throw InvalidInput("elbo_variance_study: need at least 2 repetitions");
  if (samples < 0) throw InvalidInput("elbo_variance_study: negative sample count");
  VarianceStats st;
  for (int r = 0; r < repetitions; ++r) st.values.push_back(elbo_value(m, model, samples, rng));
  // deviations from the first value keep identical estimates at exactly zero spread
  const double ref = st.values.front();
  double d_mean = 0.0;
  for (double v : st.values) d_mean += v - ref;
  d_mean /= repetitions;
  double ss = 0.0;
  for (double v : st.values) ss += (v - ref - d_mean) * (v - ref - d_mean);
  st.mean = ref + d_mean;
  st.std = std::sqrt(ss / (repetitions - 1));
  st.relative = st.std / std::abs(st.mean);
  return st;
}

}  // namespace mdnf
