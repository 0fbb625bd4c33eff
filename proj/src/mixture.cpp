#include "mdnf/mixture.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

namespace mdnf {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

int mod(int a, int k) { return ((a % k) + k) % k; }

void check_rho(const Eigen::VectorXd& rho, std::size_t b) {
  if (static_cast<std::size_t>(rho.size()) != b) throw InvalidInput("mixture: rho length must equal B");
  for (Eigen::Index i = 0; i < rho.size(); ++i) {
    if (!(rho[i] >= 0.0) || !std::isfinite(rho[i])) throw InvalidInput("mixture: rho must be nonnegative");
  }
  if (std::abs(rho.sum() - 1.0) > 1e-9) throw InvalidInput("mixture: rho must sum to 1");
}

// Fused mixture density. Parents: x, weights, shift_0 .. shift_{B-1}.
// aux holds the inverse base tables (B rows of length n); iaux the blocks.
struct MixtureTerms {
  std::vector<double> f;          // B x D factor values
  std::vector<double> log_w_sum;  // per component: log w_b + sum of log nonzero factors
  std::vector<int> zeros;         // per component: number of zero factors
  std::vector<int> zero_dim;      // per component: last zero factor index
  double log_q = kNegInf;
};

MixtureTerms mixture_terms(const Trace& t, std::uint32_t id) {
  const auto parents = t.parents(id);
  const auto x = t.raw_value(parents[0]);
  const auto w = t.raw_value(parents[1]);
  const auto bases = t.aux(id);
  const auto blocks = t.iaux(id);
  const std::size_t n = x.size();
  const std::size_t nb = w.size();
  const std::size_t nd = blocks.size();

  MixtureTerms r;
  r.f.assign(nb * nd, 0.0);
  r.log_w_sum.assign(nb, kNegInf);
  r.zeros.assign(nb, 0);
  r.zero_dim.assign(nb, -1);
  double m = kNegInf;
  for (std::size_t b = 0; b < nb; ++b) {
    const auto mu = t.raw_value(parents[2 + b]);
    const double* base = bases.data() + b * n;
    double acc = w[b] > 0.0 ? std::log(w[b]) : kNegInf;
    std::size_t off = 0;
    for (std::size_t d = 0; d < nd; ++d) {
      const auto k = static_cast<std::size_t>(blocks[d]);
      double f = 0.0;
      for (std::size_t xm = 0; xm < k; ++xm) {
        const double xv = x[off + xm];
        if (xv == 0.0) continue;
        double inner = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
          if (mu[off + j] != 0.0) inner += mu[off + j] * base[off + (xm + k - j) % k];
        }
        f += xv * inner;
      }
      r.f[b * nd + d] = f;
      if (f > 0.0) {
        acc += std::log(f);
      } else {
        ++r.zeros[b];
        r.zero_dim[b] = static_cast<int>(d);
      }
      off += k;
    }
    r.log_w_sum[b] = acc;
    if (r.zeros[b] == 0) m = std::max(m, acc);
  }
  if (m == kNegInf) return r;
  double s = 0.0;
  for (std::size_t b = 0; b < nb; ++b) {
    if (r.zeros[b] == 0) s += std::exp(r.log_w_sum[b] - m);
  }
  r.log_q = m + std::log(s);
  return r;
}

void mixture_backward(Trace& t, std::uint32_t id) {
  const double g = t.raw_grad(id)[0];
  if (g == 0.0) return;
  const MixtureTerms r = mixture_terms(t, id);
  if (!std::isfinite(r.log_q)) return;
  const auto parents = t.parents(id);
  const auto x = t.raw_value(parents[0]);
  const auto w = t.raw_value(parents[1]);
  const auto bases = t.aux(id);
  const auto blocks = t.iaux(id);
  const std::size_t n = x.size();
  const std::size_t nb = w.size();
  const std::size_t nd = blocks.size();
  {
    auto gw = t.mutable_grad(parents[1]);
    for (std::size_t b = 0; b < nb; ++b) {
      if (r.zeros[b] == 0 && w[b] > 0.0) {
        gw[b] += g * std::exp(r.log_w_sum[b] - std::log(w[b]) - r.log_q);
      }
    }
  }
  for (std::size_t b = 0; b < nb; ++b) {
    if (r.zeros[b] > 1 || !(w[b] > 0.0)) continue;
    const auto mu = t.raw_value(parents[2 + b]);
    const double* base = bases.data() + b * n;
    std::size_t off = 0;
    for (std::size_t d = 0; d < nd; ++d) {
      const auto k = static_cast<std::size_t>(blocks[d]);
      const double f = r.f[b * nd + d];
      double df = 0.0;
      if (r.zeros[b] == 0) {
        df = std::exp(r.log_w_sum[b] - std::log(f) - r.log_q);
      } else if (r.zero_dim[b] == static_cast<int>(d)) {
        df = std::exp(r.log_w_sum[b] - r.log_q);
      }
      if (df != 0.0) {
        const double gd = g * df;
        {
          auto gmu = t.mutable_grad(parents[2 + b]);
          for (std::size_t j = 0; j < k; ++j) {
            double acc = 0.0;
            for (std::size_t xm = 0; xm < k; ++xm) {
              if (x[off + xm] != 0.0) acc += x[off + xm] * base[off + (xm + k - j) % k];
            }
            gmu[off + j] += gd * acc;
          }
        }
        auto gx = t.mutable_grad(parents[0]);
        for (std::size_t xm = 0; xm < k; ++xm) {
          double acc = 0.0;
          for (std::size_t j = 0; j < k; ++j) {
            if (mu[off + j] != 0.0) acc += mu[off + j] * base[off + (xm + k - j) % k];
          }
          gx[off + xm] += gd * acc;
        }
      }
      off += k;
    }
  }
}

// dest[i] = sigma * i mod K per block.
std::vector<int> scale_destinations(Blocks blocks, const std::vector<int>& sigmas) {
  std::vector<int> dest;
  int off = 0;
  for (std::size_t d = 0; d < blocks.size(); ++d) {
    const int k = blocks[d];
    for (int i = 0; i < k; ++i) dest.push_back(off + mod(sigmas[d] * i, k));
    off += k;
  }
  return dest;
}

bool all_ones(const std::vector<int>& v) {
  return std::all_of(v.begin(), v.end(), [](int s) { return s == 1; });
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

// --- bases ---------------------------------------------------------------------

int base_cardinality(const BaseDist& base) {
  if (const auto* d = std::get_if<DeltaBase>(&base)) return d->cardinality;
  return std::get<CategoricalParams>(base).cardinality();
}

Eigen::VectorXd base_probs(const BaseDist& base) {
  if (const auto* d = std::get_if<DeltaBase>(&base)) return d->probs();
  return std::get<CategoricalParams>(base).probs();
}

bool is_delta(const BaseDist& base) { return std::holds_alternative<DeltaBase>(base); }

// --- FlowMixture -----------------------------------------------------------------

FlowMixture::FlowMixture(std::vector<int> cardinalities, std::vector<MixtureComponent> components,
                         Eigen::VectorXd rho)
    : cards_(std::move(cardinalities)), components_(std::move(components)), rho_(std::move(rho)) {
  if (cards_.empty()) throw InvalidInput("mixture: at least one dimension required");
  for (int k : cards_) {
    if (k < 1) throw InvalidInput("mixture: cardinalities must be positive");
  }
  encoded_size_ = std::accumulate(cards_.begin(), cards_.end(), 0);
  if (components_.empty()) throw InvalidInput("mixture: at least one component required");
  for (const auto& c : components_) validate_component(c);
  check_rho(rho_, components_.size());
}

void FlowMixture::validate_component(const MixtureComponent& c) const {
  if (c.flows.size() != cards_.size() || c.bases.size() != cards_.size()) {
    throw InvalidInput("mixture: component needs one flow stack and one base per dimension");
  }
  const std::size_t depth = c.flows.front().size();
  for (std::size_t d = 0; d < cards_.size(); ++d) {
    if (c.flows[d].cardinality() != cards_[d] || base_cardinality(c.bases[d]) != cards_[d]) {
      throw InvalidInput("mixture: component cardinality mismatch in dimension " + std::to_string(d));
    }
    if (c.flows[d].size() != depth) throw InvalidInput("mixture: stacks of one component must share depth");
    for (const auto& f : c.flows[d].layers()) {
      if (f.kind() == FlowKind::partial) throw InvalidInput("mixture: partial flows are not supported here");
    }
  }
}

FlowMixture FlowMixture::shift_only(const std::vector<int>& cardinalities,
                                    std::vector<std::vector<BaseDist>> bases, SeededRng& rng) {
  std::vector<MixtureComponent> comps;
  for (auto& bb : bases) {
    MixtureComponent c;
    for (int k : cardinalities) {
      Eigen::VectorXd logits(k);
      for (int i = 0; i < k; ++i) logits[i] = rng.normal();
      c.flows.emplace_back(std::vector<DiscreteFlow>{DiscreteFlow::shift_only(k, logits)});
    }
    c.bases = std::move(bb);
    comps.push_back(std::move(c));
  }
  const auto n = static_cast<Eigen::Index>(comps.size());
  return FlowMixture(cardinalities, std::move(comps), Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n)));
}

FlowMixture FlowMixture::shift_only_delta(const std::vector<int>& cardinalities, int b, SeededRng& rng) {
  if (b < 1) throw InvalidInput("mixture: B must be positive");
  std::vector<std::vector<BaseDist>> bases(static_cast<std::size_t>(b));
  for (auto& bb : bases) {
    for (int k : cardinalities) bb.emplace_back(DeltaBase(0, k));
  }
  return shift_only(cardinalities, std::move(bases), rng);
}

std::int64_t FlowMixture::config_count() const {
  std::int64_t n = 1;
  for (int k : cards_) {
    if (n > std::numeric_limits<std::int64_t>::max() / k) return std::numeric_limits<std::int64_t>::max();
    n *= k;
  }
  return n;
}

void FlowMixture::set_rho(const Eigen::VectorXd& rho) {
  check_rho(rho, components_.size());
  rho_ = rho;
}

void FlowMixture::add_component(MixtureComponent c, const Eigen::VectorXd& rho) {
  validate_component(c);
  check_rho(rho, components_.size() + 1);
  components_.push_back(std::move(c));
  rho_ = rho;
}

int FlowMixture::depth(int b) const { return static_cast<int>(component(b).flows.front().size()); }

Eigen::VectorXd FlowMixture::layer_logits(int b, int l) const {
  Eigen::VectorXd out(encoded_size_);
  int off = 0;
  for (std::size_t d = 0; d < cards_.size(); ++d) {
    out.segment(off, cards_[d]) = component(b).flows[d].layer(static_cast<std::size_t>(l)).shift_logits();
    off += cards_[d];
  }
  return out;
}

void FlowMixture::set_layer_logits(int b, int l, const Eigen::VectorXd& logits) {
  if (logits.size() != encoded_size_) throw InvalidInput("mixture: layer logits have wrong length");
  int off = 0;
  for (std::size_t d = 0; d < cards_.size(); ++d) {
    component(b).flows[d].layer(static_cast<std::size_t>(l)).set_shift_logits(logits.segment(off, cards_[d]));
    off += cards_[d];
  }
}

std::vector<int> FlowMixture::layer_sigmas(int b, int l) const {
  std::vector<int> s;
  for (const auto& stack : component(b).flows) s.push_back(stack.layer(static_cast<std::size_t>(l)).sigma());
  return s;
}

Eigen::VectorXd FlowMixture::component_parameters(int b) const {
  const int depth_b = depth(b);
  Eigen::VectorXd p(depth_b * encoded_size_);
  for (int l = 0; l < depth_b; ++l) p.segment(l * encoded_size_, encoded_size_) = layer_logits(b, l);
  return p;
}

void FlowMixture::set_component_parameters(int b, const Eigen::VectorXd& params) {
  const int depth_b = depth(b);
  if (params.size() != depth_b * encoded_size_) throw InvalidInput("mixture: parameter vector has wrong length");
  for (int l = 0; l < depth_b; ++l) set_layer_logits(b, l, params.segment(l * encoded_size_, encoded_size_));
}

Config FlowMixture::forward(int b, const Config& u) const {
  if (u.size() != cards_.size()) throw InvalidInput("mixture: configuration has wrong length");
  Config x(u.size());
  for (std::size_t d = 0; d < u.size(); ++d) x[d] = component(b).flows[d].forward_index(u[d]);
  return x;
}

Config FlowMixture::inverse(int b, const Config& x) const {
  if (x.size() != cards_.size()) throw InvalidInput("mixture: configuration has wrong length");
  Config u(x.size());
  for (std::size_t d = 0; d < x.size(); ++d) u[d] = component(b).flows[d].inverse_index(x[d]);
  return u;
}

double FlowMixture::prob(const Config& x) const {
  double total = 0.0;
  for (int b = 0; b < components(); ++b) {
    if (rho_[b] == 0.0) continue;
    const Config u = inverse(b, x);
    double p = rho_[b];
    for (std::size_t d = 0; d < u.size() && p > 0.0; ++d) {
      const auto& base = component(b).bases[d];
      if (const auto* delta = std::get_if<DeltaBase>(&base)) {
        p = u[d] == delta->atom ? p : 0.0;
      } else {
        p *= std::get<CategoricalParams>(base).probs()[u[d]];
      }
    }
    total += p;
  }
  return total;
}

double FlowMixture::log_prob(const Config& x) const {
  // Log-space accumulation so products of many small base probabilities survive.
  double m = kNegInf;
  std::vector<double> terms;
  terms.reserve(static_cast<std::size_t>(components()));
  for (int b = 0; b < components(); ++b) {
    if (rho_[b] == 0.0) continue;
    const Config u = inverse(b, x);
    double lp = std::log(rho_[b]);
    for (std::size_t d = 0; d < u.size() && lp > kNegInf; ++d) {
      const auto& base = component(b).bases[d];
      if (const auto* delta = std::get_if<DeltaBase>(&base)) {
        if (u[d] != delta->atom) lp = kNegInf;
      } else {
        lp += std::log(std::get<CategoricalParams>(base).probs()[u[d]]);
      }
    }
    if (lp > kNegInf) {
      terms.push_back(lp);
      m = std::max(m, lp);
    }
  }
  if (terms.empty()) return kNegInf;
  double s = 0.0;
  for (double v : terms) s += std::exp(v - m);
  return m + std::log(s);
}

Config FlowMixture::sample_base(int b, SeededRng& rng) const {
  Config u(cards_.size());
  for (std::size_t d = 0; d < cards_.size(); ++d) {
    const auto& base = component(b).bases[d];
    if (const auto* delta = std::get_if<DeltaBase>(&base)) {
      u[d] = delta->atom;
    } else {
      u[d] = sample_categorical(std::get<CategoricalParams>(base), rng);
    }
  }
  return u;
}

Config FlowMixture::sample(SeededRng& rng) const {
  const int b = sample_index(rho_, rng);
  return forward(b, sample_base(b, rng));
}

std::int64_t FlowMixture::config_index(const Config& x) const {
  if (x.size() != cards_.size()) throw InvalidInput("mixture: configuration has wrong length");
  std::int64_t idx = 0;
  for (std::size_t d = 0; d < x.size(); ++d) {
    if (x[d] < 0 || x[d] >= cards_[d]) throw InvalidInput("mixture: category out of range");
    idx = idx * cards_[d] + x[d];
  }
  return idx;
}

Config FlowMixture::config_at(std::int64_t index) const {
  Config x(cards_.size());
  for (std::size_t d = cards_.size(); d-- > 0;) {
    x[d] = static_cast<int>(index % cards_[d]);
    index /= cards_[d];
  }
  return x;
}

Eigen::VectorXd FlowMixture::encode(const Config& x) const {
  if (x.size() != cards_.size()) throw InvalidInput("mixture: configuration has wrong length");
  Eigen::VectorXd v = Eigen::VectorXd::Zero(encoded_size_);
  int off = 0;
  for (std::size_t d = 0; d < x.size(); ++d) {
    if (x[d] < 0 || x[d] >= cards_[d]) throw InvalidInput("mixture: category out of range");
    v[off + x[d]] = 1.0;
    off += cards_[d];
  }
  return v;
}

Config FlowMixture::decode(const Eigen::Ref<const Eigen::VectorXd>& onehot) const {
  if (onehot.size() != encoded_size_) throw InvalidInput("mixture: encoded configuration has wrong length");
  Config x(cards_.size());
  int off = 0;
  for (std::size_t d = 0; d < cards_.size(); ++d) {
    Eigen::Index best = 0;
    onehot.segment(off, cards_[d]).maxCoeff(&best);
    x[d] = static_cast<int>(best);
    off += cards_[d];
  }
  return x;
}

// --- traced evaluation ---------------------------------------------------------------

TracedComponent trace_component(Trace& t, const FlowMixture& m, int b, Temperature tau, bool soft) {
  TracedComponent c;
  const Blocks blocks = m.blocks();
  std::vector<int> sigma(static_cast<std::size_t>(m.dims()), 1);
  for (int l = 0; l < m.depth(b); ++l) {
    const Var leaf = t.leaf(m.layer_logits(b, l));
    c.leaves.push_back(leaf);
    const Var relaxed = softmax_temp(t, leaf, tau, blocks);
    const Var s = soft ? relaxed : straight_through(t, relaxed, blocks);
    const std::vector<int> ls = m.layer_sigmas(b, l);
    if (l == 0) {
      c.shift = s;
      sigma = ls;
    } else {
      const Var carried = all_ones(ls) ? c.shift : permute(t, c.shift, scale_destinations(blocks, ls));
      c.shift = circular_convolve(t, s, carried, blocks);
      for (std::size_t d = 0; d < sigma.size(); ++d) sigma[d] = mod(sigma[d] * ls[d], blocks[d]);
    }
  }
  c.sigmas = sigma;
  c.inverse_base.resize(m.encoded_size());
  int off = 0;
  for (int d = 0; d < m.dims(); ++d) {
    const int k = m.cardinalities()[static_cast<std::size_t>(d)];
    const Eigen::VectorXd p = base_probs(m.component(b).bases[static_cast<std::size_t>(d)]);
    const int inv = modular_inverse(sigma[static_cast<std::size_t>(d)], k);
    for (int i = 0; i < k; ++i) c.inverse_base[off + i] = p[mod(inv * i, k)];
    off += k;
  }
  return c;
}

TracedMixture trace_mixture(Trace& t, const FlowMixture& m, Temperature tau, Var weights, bool soft) {
  if (static_cast<int>(t.size(weights)) != m.components()) throw InvalidInput("trace_mixture: weights length");
  TracedMixture tm;
  tm.weights = weights;
  for (int b = 0; b < m.components(); ++b) tm.comps.push_back(trace_component(t, m, b, tau, soft));
  return tm;
}

TracedMixture trace_mixture(Trace& t, const FlowMixture& m, Temperature tau, bool soft) {
  const Var w = t.constant(m.rho());
  return trace_mixture(t, m, tau, w, soft);
}

Var sample_component(Trace& t, const FlowMixture& m, const TracedComponent& c, int b, SeededRng& rng) {
  const Var u = t.constant(m.encode(m.sample_base(b, rng)));
  return blockwise_forward(t, c.shift, u, m.blocks(), c.sigmas);
}

Var sample_forward(Trace& t, const FlowMixture& m, const TracedMixture& tm, SeededRng& rng) {
  const int b = sample_index(t.value(tm.weights), rng);
  return sample_component(t, m, tm.comps[static_cast<std::size_t>(b)], b, rng);
}

std::vector<Var> sample_batch_masked(Trace& t, const FlowMixture& m, const TracedMixture& tm,
                                     std::span<const int> masks, SeededRng& rng) {
  const int nb = m.components();
  std::vector<Var> out;
  out.reserve(masks.size());
  std::vector<Var> terms(static_cast<std::size_t>(nb));
  for (int assigned : masks) {
    if (assigned < 0 || assigned >= nb) throw InvalidInput("sample_batch_masked: mask out of range");
    for (int b = 0; b < nb; ++b) {
      const Var fb = sample_component(t, m, tm.comps[static_cast<std::size_t>(b)], b, rng);
      terms[static_cast<std::size_t>(b)] = mul(t, t.scalar(b == assigned ? 1.0 : 0.0), fb);
    }
    out.push_back(sum(t, terms));
  }
  return out;
}

std::vector<Var> sample_batch_masked(Trace& t, const FlowMixture& m, const TracedMixture& tm, int n,
                                     SeededRng& rng) {
  if (n < 1) throw InvalidInput("sample_batch_masked: n must be positive");
  std::vector<int> masks(static_cast<std::size_t>(n));
  const Eigen::VectorXd w = t.value(tm.weights);
  for (auto& mk : masks) mk = sample_index(w, rng);
  return sample_batch_masked(t, m, tm, masks, rng);
}

std::vector<Var> sample_deterministic(Trace& t, const FlowMixture& m, const TracedMixture& tm, SeededRng& rng) {
  std::vector<Var> out;
  for (int b = 0; b < m.components(); ++b) {
    out.push_back(sample_component(t, m, tm.comps[static_cast<std::size_t>(b)], b, rng));
  }
  return out;
}

Var mixture_log_prob(Trace& t, const TracedMixture& tm, Var x, Blocks blocks) {
  const std::size_t n = t.size(x);
  const std::size_t nb = tm.comps.size();
  if (t.size(tm.weights) != nb) throw InvalidInput("mixture_log_prob: weights length");
  std::size_t total = 0;
  for (int k : blocks) total += static_cast<std::size_t>(k);
  if (total != n) throw InvalidInput("mixture_log_prob: blocks do not cover x");
  std::vector<Var> parents{x, tm.weights};
  std::vector<double> bases(nb * n);
  for (std::size_t b = 0; b < nb; ++b) {
    const auto& c = tm.comps[b];
    if (t.size(c.shift) != n || static_cast<std::size_t>(c.inverse_base.size()) != n) {
      throw InvalidInput("mixture_log_prob: component size mismatch");
    }
    parents.push_back(c.shift);
    std::copy(c.inverse_base.data(), c.inverse_base.data() + n, bases.begin() + static_cast<std::ptrdiff_t>(b * n));
  }
  const Var out = t.push(mixture_backward, 1, std::span<const Var>(parents), bases, blocks);
  t.mutable_value(out)[0] = mixture_terms(t, out.id).log_q;
  return out;
}

Var log_prob(Trace& t, const FlowMixture& m, const TracedMixture& tm, Var x) {
  return mixture_log_prob(t, tm, x, m.blocks());
}

Eigen::VectorXd component_gradient(const Trace& t, const TracedComponent& c) {
  Eigen::Index n = 0;
  for (Var v : c.leaves) n += static_cast<Eigen::Index>(t.size(v));
  Eigen::VectorXd g(n);
  Eigen::Index off = 0;
  for (Var v : c.leaves) {
    const auto s = static_cast<Eigen::Index>(t.size(v));
    g.segment(off, s) = t.grad(v);
    off += s;
  }
  return g;
}

// --- construction --------------------------------------------------------------------------

Eigen::VectorXd shift_logits_for(int shift, int k, double gap) {
  if (shift < 0 || shift >= k) throw InvalidInput("shift_logits_for: shift out of range");
  Eigen::VectorXd v = Eigen::VectorXd::Zero(k);
  v[shift] = gap;
  return v;
}

std::vector<int> constructive_allocation(const Eigen::VectorXd& target, int b) {
  if (b < 1) throw InvalidInput("constructive_fit: B must be positive");
  const auto k = static_cast<int>(target.size());
  std::vector<int> alloc(static_cast<std::size_t>(k));
  std::vector<double> residual(static_cast<std::size_t>(k));
  int used = 0;
  for (int i = 0; i < k; ++i) {
    const double scaled = target[i] * b;
    alloc[static_cast<std::size_t>(i)] = static_cast<int>(std::floor(scaled));
    residual[static_cast<std::size_t>(i)] = scaled - std::floor(scaled);
    used += alloc[static_cast<std::size_t>(i)];
  }
  std::vector<int> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int c) {
    return residual[static_cast<std::size_t>(a)] > residual[static_cast<std::size_t>(c)];
  });
  for (std::size_t i = 0; used < b; ++i) {
    ++alloc[static_cast<std::size_t>(order[i % order.size()])];
    ++used;
  }
  return alloc;
}

FlowMixture constructive_fit(const CategoricalParams& target, int b) {
  const int k = target.cardinality();
  const std::vector<int> alloc = constructive_allocation(target.probs(), b);
  std::vector<MixtureComponent> comps;
  for (int c = 0; c < k; ++c) {
    for (int r = 0; r < alloc[static_cast<std::size_t>(c)]; ++r) {
      MixtureComponent mc;
      mc.flows.emplace_back(std::vector<DiscreteFlow>{DiscreteFlow::shift_only(k, shift_logits_for(c, k))});
      mc.bases.emplace_back(DeltaBase(0, k));
      comps.push_back(std::move(mc));
    }
  }
  return FlowMixture({k}, std::move(comps), Eigen::VectorXd::Constant(b, 1.0 / b));
}

FlowMixture table_fit(const std::vector<int>& cardinalities, const Eigen::VectorXd& table) {
  std::int64_t count = 1;
  for (int k : cardinalities) count *= k;
  if (table.size() != count) throw InvalidInput("table_fit: table size does not match cardinalities");
  std::vector<MixtureComponent> comps;
  std::vector<double> weights;
  for (std::int64_t i = 0; i < count; ++i) {
    if (!(table[i] > 0.0)) continue;
    MixtureComponent mc;
    std::int64_t rest = i;
    std::vector<int> x(cardinalities.size());
    for (std::size_t d = cardinalities.size(); d-- > 0;) {
      x[d] = static_cast<int>(rest % cardinalities[d]);
      rest /= cardinalities[d];
    }
    for (std::size_t d = 0; d < cardinalities.size(); ++d) {
      const int k = cardinalities[d];
      mc.flows.emplace_back(std::vector<DiscreteFlow>{DiscreteFlow::shift_only(k, shift_logits_for(x[d], k))});
      mc.bases.emplace_back(DeltaBase(0, k));
    }
    comps.push_back(std::move(mc));
    weights.push_back(table[i]);
  }
  if (comps.empty()) throw InvalidInput("table_fit: table has no mass");
  Eigen::VectorXd rho = Eigen::Map<Eigen::VectorXd>(weights.data(), static_cast<Eigen::Index>(weights.size()));
  rho /= rho.sum();
  return FlowMixture(cardinalities, std::move(comps), std::move(rho));
}

// --- serialization ---------------------------------------------------------------------------

void save_mixture(std::ostream& out, const FlowMixture& m) {
  out << "MDNF 1\n";
  out << "dims " << m.dims() << "\n";
  out << "cardinalities";
  for (int k : m.cardinalities()) out << ' ' << k;
  out << "\ncomponents " << m.components() << "\nrho";
  for (Eigen::Index b = 0; b < m.rho().size(); ++b) out << ' ' << fmt(m.rho()[b]);
  out << '\n';
  for (int b = 0; b < m.components(); ++b) {
    const auto& c = m.component(b);
    out << "component " << b << " depth " << m.depth(b) << '\n';
    for (int d = 0; d < m.dims(); ++d) {
      const auto& base = c.bases[static_cast<std::size_t>(d)];
      out << "base " << d;
      if (const auto* delta = std::get_if<DeltaBase>(&base)) {
        out << " delta " << delta->atom << '\n';
      } else {
        out << " categorical";
        const auto& p = std::get<CategoricalParams>(base).probs();
        for (Eigen::Index i = 0; i < p.size(); ++i) out << ' ' << fmt(p[i]);
        out << '\n';
      }
    }
    for (int d = 0; d < m.dims(); ++d) {
      const auto& stack = c.flows[static_cast<std::size_t>(d)];
      for (std::size_t l = 0; l < stack.size(); ++l) {
        const auto& f = stack.layer(l);
        out << "flow " << d << ' ' << l << ' ' << to_string(f.kind()) << ' ' << f.sigma();
        for (Eigen::Index i = 0; i < f.shift_logits().size(); ++i) out << ' ' << fmt(f.shift_logits()[i]);
        out << '\n';
      }
    }
  }
  out << "end\n";
}

namespace {

struct LineReader {
  std::istream& in;
  int line = 0;

  std::istringstream next(const std::string& keyword) {
    std::string text;
    while (std::getline(in, text)) {
      ++line;
      if (text.find_first_not_of(" \t\r") != std::string::npos) break;
      text.clear();
    }
    std::istringstream ss(text);
    std::string word;
    ss >> word;
    if (word != keyword) fail("expected '" + keyword + "', found '" + word + "'");
    return ss;
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw InvalidInput("mixture file line " + std::to_string(line) + ": " + msg);
  }

  template <typename T>
  T read(std::istringstream& ss, const char* what) const {
    T v{};
    if (!(ss >> v)) fail(std::string("cannot read ") + what);
    return v;
  }
};

}  // namespace

FlowMixture load_mixture(std::istream& in) {
  LineReader r{in};
  {
    auto ss = r.next("MDNF");
    if (r.read<int>(ss, "version") != 1) r.fail("unsupported version");
  }
  auto ss = r.next("dims");
  const int dims = r.read<int>(ss, "dims");
  if (dims < 1) r.fail("dims must be positive");
  ss = r.next("cardinalities");
  std::vector<int> cards(static_cast<std::size_t>(dims));
  for (auto& k : cards) k = r.read<int>(ss, "cardinality");
  ss = r.next("components");
  const int nb = r.read<int>(ss, "component count");
  if (nb < 1) r.fail("component count must be positive");
  ss = r.next("rho");
  Eigen::VectorXd rho(nb);
  for (int b = 0; b < nb; ++b) rho[b] = r.read<double>(ss, "rho");
  std::vector<MixtureComponent> comps;
  for (int b = 0; b < nb; ++b) {
    ss = r.next("component");
    if (r.read<int>(ss, "component index") != b) r.fail("components out of order");
    std::string word;
    ss >> word;
    if (word != "depth") r.fail("expected depth");
    const int depth = r.read<int>(ss, "depth");
    if (depth < 1) r.fail("depth must be positive");
    MixtureComponent c;
    for (int d = 0; d < dims; ++d) {
      ss = r.next("base");
      if (r.read<int>(ss, "base dimension") != d) r.fail("bases out of order");
      const auto kind = r.read<std::string>(ss, "base kind");
      const int k = cards[static_cast<std::size_t>(d)];
      if (kind == "delta") {
        c.bases.emplace_back(DeltaBase(r.read<int>(ss, "atom"), k));
      } else if (kind == "categorical") {
        Eigen::VectorXd p(k);
        for (int i = 0; i < k; ++i) p[i] = r.read<double>(ss, "base probability");
        c.bases.emplace_back(CategoricalParams(p));
      } else {
        r.fail("unknown base kind '" + kind + "'");
      }
    }
    for (int d = 0; d < dims; ++d) {
      const int k = cards[static_cast<std::size_t>(d)];
      std::vector<DiscreteFlow> layers;
      for (int l = 0; l < depth; ++l) {
        ss = r.next("flow");
        if (r.read<int>(ss, "flow dimension") != d || r.read<int>(ss, "flow layer") != l) {
          r.fail("flows out of order");
        }
        const FlowKind kind = flow_kind_from_string(r.read<std::string>(ss, "flow kind"));
        const int sigma = r.read<int>(ss, "sigma");
        Eigen::VectorXd logits(k);
        for (int i = 0; i < k; ++i) logits[i] = r.read<double>(ss, "shift logit");
        if (kind == FlowKind::shift_only) {
          layers.push_back(DiscreteFlow::shift_only(k, logits));
        } else if (kind == FlowKind::loc_scale) {
          layers.push_back(DiscreteFlow::loc_scale(k, sigma, logits));
        } else {
          r.fail("partial flows cannot appear in a mixture file");
        }
      }
      c.flows.emplace_back(std::move(layers));
    }
    comps.push_back(std::move(c));
  }
  r.next("end");
  return FlowMixture(std::move(cards), std::move(comps), std::move(rho));
}

void save_mixture(const std::string& path, const FlowMixture& m) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  save_mixture(out, m);
  if (!out) throw std::runtime_error("failed writing " + path);
}

FlowMixture load_mixture(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return load_mixture(in);
}

}  // namespace mdnf
