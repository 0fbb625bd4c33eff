#pragma once

#include <Eigen/Core>

#include <vector>

#include "mdnf/diffcore.hpp"

namespace mdnf {

enum class FlowKind { loc_scale, shift_only, partial };

const char* to_string(FlowKind kind);
FlowKind flow_kind_from_string(const std::string& name);

int gcd(int a, int b);
/// Throws InvalidInput unless gcd(sigma, k) == 1.
void validate_coprime(int sigma, int k);
/// Inverse of sigma modulo k (extended Euclid). Requires coprimality.
int modular_inverse(int sigma, int k);

/// One invertible map on {0, ..., K-1}:
///   loc_scale:  x = (mu + sigma * u) mod K
///   shift_only: x = (mu + u) mod K
///   partial:    the shift acts on the positions listed in `subset` only.
/// The shift mu is the straight-through argmax of softmax(shift_logits / tau).
class DiscreteFlow {
 public:
  static DiscreteFlow shift_only(int k, Eigen::VectorXd shift_logits);
  static DiscreteFlow loc_scale(int k, int sigma, Eigen::VectorXd shift_logits);
  static DiscreteFlow partial(int k, std::vector<int> subset, Eigen::VectorXd shift_logits);

  FlowKind kind() const { return kind_; }
  int cardinality() const { return k_; }
  int sigma() const { return sigma_; }
  int sigma_inverse() const { return sigma_inverse_; }
  const std::vector<int>& subset() const { return subset_; }
  /// Length of the shift vector: K, or |subset| for partial flows.
  int shift_size() const { return static_cast<int>(shift_logits_.size()); }

  const Eigen::VectorXd& shift_logits() const { return shift_logits_; }
  void set_shift_logits(const Eigen::VectorXd& logits);

  /// Current discrete shift (argmax of the logits, lowest index on ties).
  int shift() const;
  int forward_index(int u) const;
  int inverse_index(int x) const;

 private:
  DiscreteFlow(FlowKind kind, int k, int sigma, std::vector<int> subset, Eigen::VectorXd logits);

  FlowKind kind_;
  int k_;
  int sigma_;
  int sigma_inverse_;
  std::vector<int> subset_;
  Eigen::VectorXd shift_logits_;
};

/// Layers applied in order on a shared cardinality.
class FlowStack {
 public:
  FlowStack() = default;
  explicit FlowStack(std::vector<DiscreteFlow> layers);

  int cardinality() const { return k_; }
  std::size_t size() const { return layers_.size(); }
  const std::vector<DiscreteFlow>& layers() const { return layers_; }
  std::vector<DiscreteFlow>& layers() { return layers_; }
  const DiscreteFlow& layer(std::size_t i) const { return layers_[i]; }
  DiscreteFlow& layer(std::size_t i) { return layers_[i]; }

  int forward_index(int u) const;
  int inverse_index(int x) const;
  /// perm[u] = forward_index(u).
  std::vector<int> permutation() const;

 private:
  std::vector<DiscreteFlow> layers_;
  int k_ = 0;
};

/// Bubble-sort arrangement of K(K-1)/2 adjacent-pair partial flows. Logits
/// start at zero, so every layer is initially the identity.
FlowStack build_sorting_network(int k);
/// Sets swap states of a sorting network so it realizes `target`
/// (target[u] = destination of category u).
void set_sorting_network_permutation(FlowStack& stack, const std::vector<int>& target);

// --- traced application ---------------------------------------------------------

/// Trainable leaf and its straight-through shift for one layer.
struct TracedShift {
  Var logits;
  Var relaxed;
  Var shift;
};

TracedShift trace_shift(Trace& t, const DiscreteFlow& f, Temperature tau);
/// Soft variant: shift = softmax(logits / tau) without discretization. Used
/// by finite-difference checks.
TracedShift trace_soft_shift(Trace& t, const DiscreteFlow& f, Temperature tau);

/// Throws InvalidInput when `u` is not a one-hot vector of length K.
Var flow_forward(Trace& t, const DiscreteFlow& f, Var shift, Var u);
Var flow_inverse(Trace& t, const DiscreteFlow& f, Var shift, Var x);

Var stack_forward(Trace& t, const FlowStack& s, std::span<const TracedShift> shifts, Var u);
Var stack_inverse(Trace& t, const FlowStack& s, std::span<const TracedShift> shifts, Var x);

/// Location-scale maps applied blockwise to a concatenated configuration:
/// x_d = (shift_d + sigma_d * u_d) mod K_d for every block d.
Var blockwise_forward(Trace& t, Var shift, Var u, Blocks blocks, std::span<const int> sigmas);
Var blockwise_inverse(Trace& t, Var shift, Var x, Blocks blocks, std::span<const int> sigma_inverses);

}  // namespace mdnf
