#pragma once

// Reverse-mode differentiation over short dense vectors.
//
// A Trace is a flat arena of nodes created in evaluation order. Each node
// stores its forward value, a gradient accumulator of the same length and a
// plain function pointer implementing its local vector-Jacobian product.
// Because parents always precede children, sweeping the arena backwards
// visits every node after all of its consumers.
//
// Most vector ops accept an optional block layout: a vector of length
// sum(blocks) is treated as consecutive independent blocks (one per latent
// dimension), so a whole D-dimensional one-hot configuration is one node.

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdnf {

class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class InternalError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Strictly positive relaxation temperature.
class Temperature {
 public:
  explicit Temperature(double tau);
  double value() const { return tau_; }

 private:
  double tau_;
};

/// Handle to a node of a Trace. Only meaningful together with its trace.
struct Var {
  std::uint32_t id = 0;
};

class Trace;
using BackwardFn = void (*)(Trace&, std::uint32_t node);

/// Block sizes of a blocked vector. Empty means "one block spanning all".
using Blocks = std::span<const int>;

class Trace {
 public:
  using ConstMap = Eigen::Map<const Eigen::VectorXd>;
  using Map = Eigen::Map<Eigen::VectorXd>;

  Trace() = default;

  /// Drops all nodes but keeps allocated capacity.
  void clear();
  std::size_t node_count() const { return nodes_.size(); }

  Var constant(std::span<const double> value);
  Var constant(const Eigen::VectorXd& value);
  Var scalar(double value);
  /// Leaves are constants whose gradient the caller intends to read.
  Var leaf(const Eigen::VectorXd& value) { return constant(value); }

  ConstMap value(Var v) const;
  double scalar_value(Var v) const;
  ConstMap grad(Var v) const;
  std::size_t size(Var v) const { return node(v.id).size; }

  /// Zeroes every accumulator, seeds the scalar root with 1 and propagates.
  void reverse_sweep(Var root);

  // --- op implementer interface -------------------------------------------

  /// Appends a node with a zero value of length `size`. Spans previously
  /// obtained from this trace are invalidated.
  Var push(BackwardFn backward, std::size_t size, std::span<const Var> parents,
           std::span<const double> aux = {}, std::span<const int> iaux = {});
  Var push(BackwardFn backward, std::size_t size, std::initializer_list<Var> parents,
           std::span<const double> aux = {}, std::span<const int> iaux = {}) {
    return push(backward, size, std::span<const Var>(parents.begin(), parents.size()), aux, iaux);
  }

  std::span<double> mutable_value(Var v);
  std::span<const double> raw_value(std::uint32_t id) const;
  std::span<const double> raw_grad(std::uint32_t id) const;
  std::span<double> mutable_grad(std::uint32_t id);
  std::span<const std::uint32_t> parents(std::uint32_t id) const;
  std::span<const double> aux(std::uint32_t id) const;
  std::span<const int> iaux(std::uint32_t id) const;

 private:
  struct Node {
    BackwardFn backward = nullptr;
    std::uint32_t value_offset = 0;
    std::uint32_t size = 0;
    std::uint32_t parent_offset = 0;
    std::uint32_t parent_count = 0;
    std::uint32_t aux_offset = 0;
    std::uint32_t aux_count = 0;
    std::uint32_t iaux_offset = 0;
    std::uint32_t iaux_count = 0;
  };

  const Node& node(std::uint32_t id) const;

  std::vector<Node> nodes_;
  std::vector<double> values_;
  std::vector<double> grads_;
  std::vector<std::uint32_t> parent_ids_;
  std::vector<double> aux_;
  std::vector<int> iaux_;
};

// --- core ops ----------------------------------------------------------------

Var softmax_temp(Trace& t, Var logits, Temperature tau, Blocks blocks = {});

/// Forward: one-hot of the per-block argmax (ties to the lowest index).
/// Backward: identity.
Var straight_through(Trace& t, Var relaxed, Blocks blocks = {});

/// Per block: out[k] = sum_j a[j] * b[(k - j) mod K].
Var circular_convolve(Trace& t, Var a, Var b, Blocks blocks = {});

/// Per block: out[k] = sum_j a[j] * x[(k + j) mod K]; undoes a convolution
/// of x by a one-hot `a`.
Var circular_correlate(Trace& t, Var x, Var a, Blocks blocks = {});

/// out[dest[i]] = v[i]; `dest` must be a permutation of 0..n-1.
Var permute(Trace& t, Var v, std::span<const int> dest);

/// sum_k x[k] * table[k], with 0 * (-inf) taken as 0.
Var log_lookup(Trace& t, Var x, const Eigen::VectorXd& table);

Var dot(Trace& t, Var a, Var b);
Var add(Trace& t, Var a, Var b);
Var sub(Trace& t, Var a, Var b);
Var scale(Trace& t, Var v, double factor);
Var add_constant(Trace& t, Var v, const Eigen::VectorXd& offset);
/// Scalar node times vector node.
Var mul(Trace& t, Var scalar, Var v);
/// 1 - v, elementwise.
Var one_minus(Trace& t, Var v);
Var sum(Trace& t, std::span<const Var> terms);
Var sum_elements(Trace& t, Var v);
Var log(Trace& t, Var v);
Var exp(Trace& t, Var v);
Var sigmoid(Trace& t, Var v);
/// log(sum_i exp(v_i)) over the elements of one vector node.
Var log_sum_exp(Trace& t, Var v);
Var concat(Trace& t, std::span<const Var> parts);
Var slice(Trace& t, Var v, int offset, int length);
/// out[i] = v[index[i]].
Var gather(Trace& t, Var v, std::span<const int> index);
/// Copy of `base` with base[index[i]] replaced by values[i].
Var scatter_replace(Trace& t, Var base, Var values, std::span<const int> index);
/// Sum over blocks of -sum_k p[k] log p[k].
Var entropy(Trace& t, Var p, Blocks blocks = {});

}  // namespace mdnf
