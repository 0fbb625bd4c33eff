#include "mdnf/flows.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace mdnf {

namespace {

int argmax_lowest(const Eigen::VectorXd& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return static_cast<int>(best);
}

int mod(int a, int k) { return ((a % k) + k) % k; }

void require_one_hot(const Trace& t, Var u, int k) {
  const auto v = t.value(u);
  if (v.size() != k) throw InvalidInput("flow: input length does not match cardinality");
  int ones = 0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (v[i] == 1.0) {
      ++ones;
    } else if (v[i] != 0.0) {
      throw InvalidInput("flow: input is not one-hot");
    }
  }
  if (ones != 1) throw InvalidInput("flow: input is not one-hot");
}

// dest[i] = sigma * i mod K, blockwise; identity when all sigmas are one.
std::vector<int> scaling_permutation(Blocks blocks, std::span<const int> sigmas) {
  std::vector<int> dest;
  int offset = 0;
  for (std::size_t d = 0; d < blocks.size(); ++d) {
    const int k = blocks[d];
    for (int i = 0; i < k; ++i) dest.push_back(offset + mod(sigmas[d] * i, k));
    offset += k;
  }
  return dest;
}

bool all_ones(std::span<const int> sigmas) {
  return std::all_of(sigmas.begin(), sigmas.end(), [](int s) { return s == 1; });
}

}  // namespace

const char* to_string(FlowKind kind) {
  switch (kind) {
    case FlowKind::loc_scale:
      return "loc_scale";
    case FlowKind::shift_only:
      return "shift_only";
    case FlowKind::partial:
      return "partial";
  }
  return "unknown";
}

FlowKind flow_kind_from_string(const std::string& name) {
  if (name == "loc_scale" || name == "loc-scale") return FlowKind::loc_scale;
  if (name == "shift_only" || name == "shift-only") return FlowKind::shift_only;
  if (name == "partial") return FlowKind::partial;
  throw InvalidInput("unknown flow kind: " + name);
}

int gcd(int a, int b) { return std::gcd(a, b); }

void validate_coprime(int sigma, int k) {
  if (sigma < 1 || k < 1) throw InvalidInput("validate_coprime: sigma and K must be positive");
  if (std::gcd(sigma, k) != 1) {
    throw InvalidInput("sigma=" + std::to_string(sigma) + " and K=" + std::to_string(k) + " are not coprime");
  }
}

int modular_inverse(int sigma, int k) {
  validate_coprime(sigma, k);
  if (k == 1) return 0;
  int old_r = mod(sigma, k), r = k;
  int old_s = 1, s = 0;
  while (r != 0) {
    const int q = old_r / r;
    std::tie(old_r, r) = std::pair{r, old_r - q * r};
    std::tie(old_s, s) = std::pair{s, old_s - q * s};
  }
  return mod(old_s, k);
}

// --- DiscreteFlow ----------------------------------------------------------------

DiscreteFlow::DiscreteFlow(FlowKind kind, int k, int sigma, std::vector<int> subset, Eigen::VectorXd logits)
    : kind_(kind), k_(k), sigma_(sigma), sigma_inverse_(1), subset_(std::move(subset)) {
  if (k < 1) throw InvalidInput("flow: cardinality must be positive");
  validate_coprime(sigma_, k_);
  sigma_inverse_ = modular_inverse(sigma_, k_);
  if (kind_ == FlowKind::partial) {
    if (sigma_ != 1) throw InvalidInput("partial flow: only sigma = 1 is supported");
    if (subset_.empty()) throw InvalidInput("partial flow: empty subset");
    std::vector<char> seen(static_cast<std::size_t>(k_), 0);
    for (int s : subset_) {
      if (s < 0 || s >= k_ || seen[static_cast<std::size_t>(s)]) {
        throw InvalidInput("partial flow: subset positions must be distinct and within [0, K)");
      }
      seen[static_cast<std::size_t>(s)] = 1;
    }
  } else if (!subset_.empty()) {
    throw InvalidInput("flow: subset only applies to partial flows");
  }
  set_shift_logits(logits);
}

DiscreteFlow DiscreteFlow::shift_only(int k, Eigen::VectorXd shift_logits) {
  return DiscreteFlow(FlowKind::shift_only, k, 1, {}, std::move(shift_logits));
}

DiscreteFlow DiscreteFlow::loc_scale(int k, int sigma, Eigen::VectorXd shift_logits) {
  return DiscreteFlow(FlowKind::loc_scale, k, sigma, {}, std::move(shift_logits));
}

DiscreteFlow DiscreteFlow::partial(int k, std::vector<int> subset, Eigen::VectorXd shift_logits) {
  return DiscreteFlow(FlowKind::partial, k, 1, std::move(subset), std::move(shift_logits));
}

void DiscreteFlow::set_shift_logits(const Eigen::VectorXd& logits) {
  const auto expected = kind_ == FlowKind::partial ? subset_.size() : static_cast<std::size_t>(k_);
  if (static_cast<std::size_t>(logits.size()) != expected) throw InvalidInput("flow: shift logits have wrong length");
  if (!logits.allFinite()) throw InvalidInput("flow: shift logits must be finite");
  shift_logits_ = logits;
}

int DiscreteFlow::shift() const { return argmax_lowest(shift_logits_); }

int DiscreteFlow::forward_index(int u) const {
  if (u < 0 || u >= k_) throw InvalidInput("flow: category out of range");
  const int mu = shift();
  if (kind_ == FlowKind::partial) {
    const auto it = std::find(subset_.begin(), subset_.end(), u);
    if (it == subset_.end()) return u;
    const int m = static_cast<int>(subset_.size());
    return subset_[static_cast<std::size_t>(mod(static_cast<int>(it - subset_.begin()) + mu, m))];
  }
  return mod(mu + sigma_ * u, k_);
}

int DiscreteFlow::inverse_index(int x) const {
  if (x < 0 || x >= k_) throw InvalidInput("flow: category out of range");
  const int mu = shift();
  if (kind_ == FlowKind::partial) {
    const auto it = std::find(subset_.begin(), subset_.end(), x);
    if (it == subset_.end()) return x;
    const int m = static_cast<int>(subset_.size());
    return subset_[static_cast<std::size_t>(mod(static_cast<int>(it - subset_.begin()) - mu, m))];
  }
  return mod(sigma_inverse_ * (x - mu), k_);
}

// --- FlowStack ----------------------------------------------------------------------

FlowStack::FlowStack(std::vector<DiscreteFlow> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw InvalidInput("flow stack: no layers");
  k_ = layers_.front().cardinality();
  for (const auto& f : layers_) {
    if (f.cardinality() != k_) throw InvalidInput("flow stack: layers must share one cardinality");
  }
}

int FlowStack::forward_index(int u) const {
  for (const auto& f : layers_) u = f.forward_index(u);
  return u;
}

int FlowStack::inverse_index(int x) const {
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) x = it->inverse_index(x);
  return x;
}

std::vector<int> FlowStack::permutation() const {
  std::vector<int> perm(static_cast<std::size_t>(k_));
  for (int u = 0; u < k_; ++u) perm[static_cast<std::size_t>(u)] = forward_index(u);
  return perm;
}

FlowStack build_sorting_network(int k) {
  if (k < 2) throw InvalidInput("sorting network: K must be at least 2");
  std::vector<DiscreteFlow> layers;
  for (int pass = 0; pass < k - 1; ++pass) {
    for (int j = 0; j < k - 1 - pass; ++j) {
      layers.push_back(DiscreteFlow::partial(k, {j, j + 1}, Eigen::VectorXd::Zero(2)));
    }
  }
  return FlowStack(std::move(layers));
}

void set_sorting_network_permutation(FlowStack& stack, const std::vector<int>& target) {
  const int k = stack.cardinality();
  if (static_cast<int>(target.size()) != k) throw InvalidInput("sorting network: target has wrong length");
  // Bubble sort keyed by destination; each comparator records whether it swaps.
  std::vector<int> at(static_cast<std::size_t>(k));
  std::iota(at.begin(), at.end(), 0);
  for (auto& layer : stack.layers()) {
    const auto& s = layer.subset();
    if (layer.kind() != FlowKind::partial || s.size() != 2 || s[1] != s[0] + 1) {
      throw InvalidInput("sorting network: layers must be adjacent-pair partial flows");
    }
    const auto j = static_cast<std::size_t>(s[0]);
    const bool swap = target[static_cast<std::size_t>(at[j])] > target[static_cast<std::size_t>(at[j + 1])];
    Eigen::VectorXd logits(2);
    logits << (swap ? 0.0 : 1.0), (swap ? 1.0 : 0.0);
    layer.set_shift_logits(logits);
    if (swap) std::swap(at[j], at[j + 1]);
  }
}

// --- traced application ---------------------------------------------------------------

TracedShift trace_shift(Trace& t, const DiscreteFlow& f, Temperature tau) {
  TracedShift s;
  s.logits = t.leaf(f.shift_logits());
  s.relaxed = softmax_temp(t, s.logits, tau);
  s.shift = straight_through(t, s.relaxed);
  return s;
}

TracedShift trace_soft_shift(Trace& t, const DiscreteFlow& f, Temperature tau) {
  TracedShift s;
  s.logits = t.leaf(f.shift_logits());
  s.relaxed = softmax_temp(t, s.logits, tau);
  s.shift = s.relaxed;
  return s;
}

Var flow_forward(Trace& t, const DiscreteFlow& f, Var shift, Var u) {
  require_one_hot(t, u, f.cardinality());
  if (static_cast<int>(t.size(shift)) != f.shift_size()) throw InvalidInput("flow_forward: shift has wrong length");
  if (f.kind() == FlowKind::partial) {
    const Var sub = gather(t, u, f.subset());
    return scatter_replace(t, u, circular_convolve(t, shift, sub), f.subset());
  }
  Var scaled = u;
  if (f.sigma() != 1) {
    const int k = f.cardinality();
    const int sigma = f.sigma();
    scaled = permute(t, u, scaling_permutation(std::span<const int>(&k, 1), std::span<const int>(&sigma, 1)));
  }
  return circular_convolve(t, shift, scaled);
}

Var flow_inverse(Trace& t, const DiscreteFlow& f, Var shift, Var x) {
  if (static_cast<int>(t.size(x)) != f.cardinality()) throw InvalidInput("flow_inverse: length mismatch");
  if (static_cast<int>(t.size(shift)) != f.shift_size()) throw InvalidInput("flow_inverse: shift has wrong length");
  if (f.kind() == FlowKind::partial) {
    const Var sub = gather(t, x, f.subset());
    return scatter_replace(t, x, circular_correlate(t, sub, shift), f.subset());
  }
  const Var unshifted = circular_correlate(t, x, shift);
  if (f.sigma() == 1) return unshifted;
  const int k = f.cardinality();
  const int inv = f.sigma_inverse();
  return permute(t, unshifted, scaling_permutation(std::span<const int>(&k, 1), std::span<const int>(&inv, 1)));
}

Var stack_forward(Trace& t, const FlowStack& s, std::span<const TracedShift> shifts, Var u) {
  if (shifts.size() != s.size()) throw InvalidInput("stack_forward: one shift per layer required");
  for (std::size_t i = 0; i < s.size(); ++i) u = flow_forward(t, s.layer(i), shifts[i].shift, u);
  return u;
}

Var stack_inverse(Trace& t, const FlowStack& s, std::span<const TracedShift> shifts, Var x) {
  if (shifts.size() != s.size()) throw InvalidInput("stack_inverse: one shift per layer required");
  for (std::size_t i = s.size(); i-- > 0;) x = flow_inverse(t, s.layer(i), shifts[i].shift, x);
  return x;
}

Var blockwise_forward(Trace& t, Var shift, Var u, Blocks blocks, std::span<const int> sigmas) {
  if (sigmas.size() != blocks.size()) throw InvalidInput("blockwise_forward: one sigma per block required");
  const Var scaled = all_ones(sigmas) ? u : permute(t, u, scaling_permutation(blocks, sigmas));
  return circular_convolve(t, shift, scaled, blocks);
}

Var blockwise_inverse(Trace& t, Var shift, Var x, Blocks blocks, std::span<const int> sigma_inverses) {
  if (sigma_inverses.size() != blocks.size()) throw InvalidInput("blockwise_inverse: one sigma per block required");
  const Var unshifted = circular_correlate(t, x, shift, blocks);
  if (all_ones(sigma_inverses)) return unshifted;
  return permute(t, unshifted, scaling_permutation(blocks, sigma_inverses));
}

}  // namespace mdnf
