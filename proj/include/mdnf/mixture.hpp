#pragma once

// Mixtures of discrete flows over factorized multi-dimensional categorical
// configurations. A configuration is stored either as a list of category
// indices (one per dimension) or, inside a trace, as the concatenation of
// per-dimension one-hot blocks.

#include <Eigen/Core>

#include <iosfwd>
#include <string>
#include <variant>
#include <vector>

#include "mdnf/diffcore.hpp"
#include "mdnf/dists.hpp"
#include "mdnf/flows.hpp"

namespace mdnf {

using Config = std::vector<int>;
using BaseDist = std::variant<DeltaBase, CategoricalParams>;

int base_cardinality(const BaseDist& base);
Eigen::VectorXd base_probs(const BaseDist& base);
bool is_delta(const BaseDist& base);

/// One mixture component: a flow stack and a base distribution per dimension.
/// All stacks of a component have the same depth and no partial layers.
struct MixtureComponent {
  std::vector<FlowStack> flows;
  std::vector<BaseDist> bases;
};

class FlowMixture {
 public:
  FlowMixture() = default;
  FlowMixture(std::vector<int> cardinalities, std::vector<MixtureComponent> components, Eigen::VectorXd rho);

  /// B single-layer shift-only components with delta bases at category 0 and
  /// N(0, 1) shift logits.
  static FlowMixture shift_only_delta(const std::vector<int>& cardinalities, int b, SeededRng& rng);
  /// Same layout with caller-chosen bases, one list per component.
  static FlowMixture shift_only(const std::vector<int>& cardinalities, std::vector<std::vector<BaseDist>> bases,
                                SeededRng& rng);

  int dims() const { return static_cast<int>(cards_.size()); }
  int components() const { return static_cast<int>(components_.size()); }
  const std::vector<int>& cardinalities() const { return cards_; }
  Blocks blocks() const { return cards_; }
  /// Length of a concatenated one-hot configuration.
  int encoded_size() const { return encoded_size_; }
  /// Number of joint configurations (saturates at INT64_MAX).
  std::int64_t config_count() const;

  const Eigen::VectorXd& rho() const { return rho_; }
  void set_rho(const Eigen::VectorXd& rho);

  const MixtureComponent& component(int b) const { return components_[static_cast<std::size_t>(b)]; }
  MixtureComponent& component(int b) { return components_[static_cast<std::size_t>(b)]; }
  void add_component(MixtureComponent c, const Eigen::VectorXd& rho);

  int depth(int b) const;
  /// Concatenated shift logits of layer `l` of component `b` across dimensions.
  Eigen::VectorXd layer_logits(int b, int l) const;
  void set_layer_logits(int b, int l, const Eigen::VectorXd& logits);
  std::vector<int> layer_sigmas(int b, int l) const;

  /// All shift logits of component b, layer-major.
  Eigen::VectorXd component_parameters(int b) const;
  void set_component_parameters(int b, const Eigen::VectorXd& params);
  int component_parameter_count(int b) const { return depth(b) * encoded_size_; }

  // --- discrete evaluation with the current argmax shifts ---

  Config forward(int b, const Config& u) const;
  Config inverse(int b, const Config& x) const;
  double prob(const Config& x) const;
  double log_prob(const Config& x) const;
  Config sample(SeededRng& rng) const;
  Config sample_base(int b, SeededRng& rng) const;

  /// Row-major enumeration index (first dimension slowest).
  std::int64_t config_index(const Config& x) const;
  Config config_at(std::int64_t index) const;
  Eigen::VectorXd encode(const Config& x) const;
  Config decode(const Eigen::Ref<const Eigen::VectorXd>& onehot) const;

 private:
  void validate_component(const MixtureComponent& c) const;

  std::vector<int> cards_;
  std::vector<MixtureComponent> components_;
  Eigen::VectorXd rho_;
  int encoded_size_ = 0;
};

// --- traced evaluation ----------------------------------------------------------

struct TracedComponent {
  std::vector<Var> leaves;       // one per layer, concatenated across dimensions
  Var shift;                     // composed straight-through shift
  std::vector<int> sigmas;       // composed scale per dimension
  Eigen::VectorXd inverse_base;  // base probabilities indexed by the pre-scale offset
};

struct TracedMixture {
  std::vector<TracedComponent> comps;
  Var weights;
};

/// Puts every component's logits on the trace. With `soft`, shifts are the
/// relaxed softmax vectors instead of straight-through one-hots. `weights`
/// defaults to a constant copy of rho.
TracedMixture trace_mixture(Trace& t, const FlowMixture& m, Temperature tau, bool soft = false);
TracedMixture trace_mixture(Trace& t, const FlowMixture& m, Temperature tau, Var weights, bool soft = false);
TracedComponent trace_component(Trace& t, const FlowMixture& m, int b, Temperature tau, bool soft = false);

/// Pushes a base draw through component b.
Var sample_component(Trace& t, const FlowMixture& m, const TracedComponent& c, int b, SeededRng& rng);
/// Three-stage draw: b ~ rho, u ~ base, x = f_b(u).
Var sample_forward(Trace& t, const FlowMixture& m, const TracedMixture& tm, SeededRng& rng);
/// n draws in one trace: every component transforms its own base draw and
/// per-sample one-hot masks select one output each.
std::vector<Var> sample_batch_masked(Trace& t, const FlowMixture& m, const TracedMixture& tm, int n,
                                     SeededRng& rng);
/// Same with caller-provided assignments (masks[s] = component of sample s).
std::vector<Var> sample_batch_masked(Trace& t, const FlowMixture& m, const TracedMixture& tm,
                                     std::span<const int> masks, SeededRng& rng);
/// One draw per component, in component order.
std::vector<Var> sample_deterministic(Trace& t, const FlowMixture& m, const TracedMixture& tm, SeededRng& rng);

/// log sum_b w_b prod_d p_u^{b,d}(inv f_b(x)_d), fused into one node.
/// Returns -inf when no component covers x.
Var mixture_log_prob(Trace& t, const TracedMixture& tm, Var x, Blocks blocks);
Var log_prob(Trace& t, const FlowMixture& m, const TracedMixture& tm, Var x);

/// Copies gradients of the traced leaves into one flat vector per component.
Eigen::VectorXd component_gradient(const Trace& t, const TracedComponent& c);

// --- construction ------------------------------------------------------------------

/// Uniform-weight delta-base mixture whose shifts allocate floor(p * B) flows
/// per category and the remainder to the largest residuals.
FlowMixture constructive_fit(const CategoricalParams& target, int b);
/// Flow counts per category chosen by constructive_fit.
std::vector<int> constructive_allocation(const Eigen::VectorXd& target, int b);
/// One delta component per configuration with free weights equal to `table`.
FlowMixture table_fit(const std::vector<int>& cardinalities, const Eigen::VectorXd& table);
/// Shift logits (one-hot scaled by `gap`) that select category `shift`.
Eigen::VectorXd shift_logits_for(int shift, int k, double gap = 1.0);

// --- serialization -----------------------------------------------------------------

void save_mixture(std::ostream& out, const FlowMixture& m);
FlowMixture load_mixture(std::istream& in);
void save_mixture(const std::string& path, const FlowMixture& m);
FlowMixture load_mixture(const std::string& path);

}  // namespace mdnf
