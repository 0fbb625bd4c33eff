#pragma once

#include <vector>

#include "mdnf/diffcore.hpp"

namespace mdnf {

using Config = std::vector<int>;

/// Unnormalized log density over a factorized categorical latent space.
class LatentModel {
 public:
  virtual ~LatentModel() = default;

  virtual const std::vector<int>& cardinalities() const = 0;
  /// Exact log p(D, x); -inf for impossible configurations.
  virtual double log_joint(const Config& x) const = 0;
  /// Traced log p(D, x) on a concatenated one-hot (or relaxed) configuration.
  /// May floor impossible events to keep gradients finite.
  virtual Var log_joint(Trace& t, Var x) const = 0;
  /// Log density of a relaxed configuration under the relaxed prior with
  /// temperature tau_p. Models without a relaxation throw InvalidInput.
  virtual Var relaxed_log_joint(Trace& t, Var x, Temperature tau_p) const;
};

}  // namespace mdnf
