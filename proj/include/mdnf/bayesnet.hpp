#pragma once

#include <Eigen/Core>

#include <map>
#include <string>
#include <vector>

#include "mdnf/diffcore.hpp"
#include "mdnf/model.hpp"

namespace mdnf {

struct BnNode {
  std::string name;
  int cardinality = 0;
  std::vector<std::string> states;
  std::vector<int> parents;  // node indices, declaration order of the file
  Eigen::VectorXd cpt;       // row-major over parents, child categories last
};

class BayesNet {
 public:
  BayesNet() = default;
  explicit BayesNet(std::vector<BnNode> nodes);

  /// Parses the JSON network format; see README for the schema.
  static BayesNet parse(const std::string& text);
  static BayesNet load(const std::string& path);

  std::size_t size() const { return nodes_.size(); }
  const BnNode& node(std::size_t i) const { return nodes_[i]; }
  const std::vector<BnNode>& nodes() const { return nodes_; }
  const std::vector<int>& topological_order() const { return order_; }
  /// Throws InvalidInput for unknown names.
  int index_of(const std::string& name) const;

  /// P(node = value | parents = values[parents]) for a full assignment.
  double cpt_entry(int node, const std::vector<int>& values) const;
  /// Exact log joint of a full assignment over all nodes.
  double log_prob(const std::vector<int>& values) const;

 private:
  std::vector<BnNode> nodes_;
  std::vector<int> order_;
  std::map<std::string, int> index_;
};

/// Observed node values; node index -> category.
struct Evidence {
  std::map<int, int> observed;
};

/// Parses "NODE=INDEX" items. Unknown nodes and out-of-range indices throw
/// InvalidInput ("index out of range" for the latter).
Evidence parse_evidence(const BayesNet& net, const std::vector<std::string>& items);

struct ExactPosterior {
  Eigen::VectorXd table;  // over latent configurations, first latent node slowest
  double log_evidence = 0.0;
};

/// Posterior over latent nodes conditioned on evidence, with the latent
/// space in declaration order. Exposes the exact and traced log joint.
class BnPosterior : public LatentModel {
 public:
  static constexpr double kDefaultLogFloor = -50.0;

  BnPosterior(BayesNet net, Evidence ev, double log_floor = kDefaultLogFloor);

  const BayesNet& net() const { return net_; }
  const Evidence& evidence() const { return ev_; }
  const std::vector<int>& latent_nodes() const { return latent_; }
  const std::vector<int>& cardinalities() const override { return cards_; }
  double log_floor() const { return log_floor_; }

  /// Full assignment over all nodes from a latent configuration.
  std::vector<int> assignment(const Config& x) const;

  double log_joint(const Config& x) const override;
  /// Sum over nodes of the multilinear contraction of (floored) log CPTs
  /// with the latent blocks of x.
  Var log_joint(Trace& t, Var x) const override;
  /// Relaxed prior: each latent node gets a Gumbel-Softmax density with
  /// class weights mixed from its CPT rows by the relaxed parents; observed
  /// nodes contribute the log of their mixed probability.
  Var relaxed_log_joint(Trace& t, Var x, Temperature tau_p) const override;
  /// Probability vector of node `node` mixed from CPT rows by the relaxed
  /// parent values in x (observed parents fixed).
  Var cpt_mix(Trace& t, Var x, int node) const;

  std::int64_t config_count() const;
  ExactPosterior exact_posterior(std::int64_t cap = 1000000) const;

 private:
  struct Factor {
    int node = 0;
    std::vector<int> vars;  // parents then child, node indices
    Eigen::VectorXd log_table;
    Eigen::VectorXd prob_table;
  };
  std::vector<int> factor_layout(const Factor& f, bool include_child) const;

  BayesNet net_;
  Evidence ev_;
  double log_floor_;
  std::vector<int> latent_;
  std::vector<int> cards_;
  std::vector<int> offset_of_node_;  // -1 for observed nodes
  std::vector<Factor> factors_;
};

}  // namespace mdnf
