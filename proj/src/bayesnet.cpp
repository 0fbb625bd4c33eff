#include "mdnf/bayesnet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "mdnf/dists.hpp"

namespace mdnf {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Factor layout in iaux: pairs (cardinality, slot) per variable, child last.
// slot >= 0 is an offset into x; slot < 0 encodes the observed value -1 - slot.
struct Entry {
  int index;
  double weight;
};

struct FactorView {
  std::vector<int> cards;
  std::vector<int> slots;
  std::vector<int> strides;
};

FactorView view_of(std::span<const int> layout) {
  FactorView v;
  for (std::size_t i = 0; i + 1 < layout.size(); i += 2) {
    v.cards.push_back(layout[i]);
    v.slots.push_back(layout[i + 1]);
  }
  v.strides.assign(v.cards.size(), 1);
  for (std::size_t i = v.cards.size(); i-- > 1;) v.strides[i - 1] = v.strides[i] * v.cards[i];
  return v;
}

std::vector<std::vector<Entry>> choices(const FactorView& v, std::span<const double> x) {
  std::vector<std::vector<Entry>> ch(v.cards.size());
  for (std::size_t i = 0; i < v.cards.size(); ++i) {
    if (v.slots[i] < 0) {
      ch[i].push_back({-1 - v.slots[i], 1.0});
      continue;
    }
    for (int k = 0; k < v.cards[i]; ++k) {
      const double w = x[static_cast<std::size_t>(v.slots[i] + k)];
      if (w != 0.0) ch[i].push_back({k, w});
    }
  }
  return ch;
}

template <typename Fn>
void walk(const std::vector<std::vector<Entry>>& ch, const std::vector<int>& strides, std::size_t v, int row,
          double w, Fn& fn) {
  if (v == ch.size()) {
    fn(row, w);
    return;
  }
  for (const Entry& e : ch[v]) walk(ch, strides, v + 1, row + e.index * strides[v], w * e.weight, fn);
}

std::vector<Entry> all_entries(int k) {
  std::vector<Entry> e;
  for (int i = 0; i < k; ++i) e.push_back({i, 1.0});
  return e;
}

// Scalar contraction sum over combos of prod w * table[row].
void contract_backward(Trace& t, std::uint32_t id) {
  const double g = t.raw_grad(id)[0];
  if (g == 0.0) return;
  const auto px = t.parents(id)[0];
  const auto x = t.raw_value(px);
  auto gx = t.mutable_grad(px);
  const auto table = t.aux(id);
  const FactorView v = view_of(t.iaux(id));
  auto ch = choices(v, x);
  for (std::size_t i = 0; i < v.cards.size(); ++i) {
    if (v.slots[i] < 0) continue;
    auto saved = std::move(ch[i]);
    ch[i] = all_entries(v.cards[i]);
    auto fn = [&](int row, double w) {
      const int k = (row / v.strides[i]) % v.cards[i];
      const double tv = table[static_cast<std::size_t>(row)];
      if (w != 0.0) gx[static_cast<std::size_t>(v.slots[i] + k)] += g * w * tv;
    };
    // the free variable contributes weight 1, so w is the product over the others
    walk(ch, v.strides, 0, 0, 1.0, fn);
    ch[i] = std::move(saved);
  }
}

// Vector contraction over parents; output indexed by child category.
void mix_backward(Trace& t, std::uint32_t id) {
  const auto g = t.raw_grad(id);
  const auto px = t.parents(id)[0];
  const auto x = t.raw_value(px);
  auto gx = t.mutable_grad(px);
  const auto table = t.aux(id);
  const FactorView v = view_of(t.iaux(id));
  const std::size_t np = v.cards.size() - 1;
  const int kc = v.cards.back();
  auto ch = choices(v, x);
  ch.back() = all_entries(kc);
  for (std::size_t i = 0; i < np; ++i) {
    if (v.slots[i] < 0) continue;
    auto saved = std::move(ch[i]);
    ch[i] = all_entries(v.cards[i]);
    auto fn = [&](int row, double w) {
      const int k = (row / v.strides[i]) % v.cards[i];
      const int c = row % kc;
      gx[static_cast<std::size_t>(v.slots[i] + k)] += g[static_cast<std::size_t>(c)] * w *
                                                      table[static_cast<std::size_t>(row)];
    };
    walk(ch, v.strides, 0, 0, 1.0, fn);
    ch[i] = std::move(saved);
  }
}

[[noreturn]] void node_error(const std::string& node, const std::string& msg) {
  throw InvalidInput("node '" + node + "': " + msg);
}

}  // namespace

// --- LatentModel default --------------------------------------------------------------

Var LatentModel::relaxed_log_joint(Trace&, Var, Temperature) const {
  throw InvalidInput("this model has no relaxed prior");
}

// --- BayesNet ---------------------------------------------------------------------------

BayesNet::BayesNet(std::vector<BnNode> nodes) : nodes_(std::move(nodes)) {
  if (nodes_.empty()) throw InvalidInput("network has no nodes");
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto& n = nodes_[i];
    if (!index_.emplace(n.name, static_cast<int>(i)).second) node_error(n.name, "duplicate name");
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto& n = nodes_[i];
    if (n.cardinality < 1) node_error(n.name, "cardinality must be positive");
    if (!n.states.empty() && static_cast<int>(n.states.size()) != n.cardinality) {
      node_error(n.name, "state list does not match cardinality");
    }
    std::int64_t rows = 1;
    for (int p : n.parents) {
      if (p < 0 || static_cast<std::size_t>(p) >= nodes_.size()) node_error(n.name, "unknown parent");
      if (p == static_cast<int>(i)) node_error(n.name, "cycle: node is its own parent");
      rows *= nodes_[static_cast<std::size_t>(p)].cardinality;
    }
    if (n.cpt.size() != rows * n.cardinality) {
      node_error(n.name, "cpt has " + std::to_string(n.cpt.size()) + " entries, expected " +
                             std::to_string(rows * n.cardinality));
    }
    for (std::int64_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (int k = 0; k < n.cardinality; ++k) {
        const double p = n.cpt[r * n.cardinality + k];
        if (!(p >= 0.0) || !std::isfinite(p)) node_error(n.name, "cpt entries must be finite and nonnegative");
        s += p;
      }
      if (std::abs(s - 1.0) > 1e-9) node_error(n.name, "row " + std::to_string(r) + " does not sum to 1");
    }
  }
  // Kahn's algorithm; ties resolved by declaration order
  std::vector<int> indegree(nodes_.size(), 0);
  std::vector<std::vector<int>> children(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    for (int p : nodes_[i].parents) {
      ++indegree[i];
      children[static_cast<std::size_t>(p)].push_back(static_cast<int>(i));
    }
  }
  std::vector<int> ready;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (indegree[i] == 0) ready.push_back(static_cast<int>(i));
  }
  while (!ready.empty()) {
    const auto it = std::min_element(ready.begin(), ready.end());
    const int n = *it;
    ready.erase(it);
    order_.push_back(n);
    for (int c : children[static_cast<std::size_t>(n)]) {
      if (--indegree[static_cast<std::size_t>(c)] == 0) ready.push_back(c);
    }
  }
  if (order_.size() != nodes_.size()) {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (indegree[i] > 0) node_error(nodes_[i].name, "cycle detected");
    }
  }
}

BayesNet BayesNet::parse(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidInput(std::string("network file: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("nodes") || !doc["nodes"].is_array()) {
    throw InvalidInput("network file: top-level 'nodes' list missing");
  }
  const auto& list = doc["nodes"];
  std::map<std::string, int> names;
  for (std::size_t i = 0; i < list.size(); ++i) {
    const auto& n = list[i];
    if (!n.is_object() || !n.contains("name") || !n["name"].is_string()) {
      throw InvalidInput("network file: node " + std::to_string(i) + " has no 'name'");
    }
    names.emplace(n["name"].get<std::string>(), static_cast<int>(i));
  }
  std::vector<BnNode> nodes;
  for (std::size_t i = 0; i < list.size(); ++i) {
    const auto& n = list[i];
    BnNode node;
    node.name = n["name"].get<std::string>();
    try {
      node.cardinality = n.at("cardinality").get<int>();
      if (n.contains("states")) node.states = n["states"].get<std::vector<std::string>>();
      for (const auto& p : n.at("parents").get<std::vector<std::string>>()) {
        const auto it = names.find(p);
        if (it == names.end()) node_error(node.name, "unknown parent '" + p + "'");
        node.parents.push_back(it->second);
      }
      const auto cpt = n.at("cpt").get<std::vector<double>>();
      node.cpt = Eigen::Map<const Eigen::VectorXd>(cpt.data(), static_cast<Eigen::Index>(cpt.size()));
    } catch (const nlohmann::json::exception& e) {
      node_error(node.name, std::string("field error: ") + e.what());
    }
    nodes.push_back(std::move(node));
  }
  return BayesNet(std::move(nodes));
}

BayesNet BayesNet::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open network file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

int BayesNet::index_of(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw InvalidInput("unknown node '" + name + "'");
  return it->second;
}

double BayesNet::cpt_entry(int node, const std::vector<int>& values) const {
  const auto& n = nodes_[static_cast<std::size_t>(node)];
  std::int64_t row = 0;
  for (int p : n.parents) row = row * nodes_[static_cast<std::size_t>(p)].cardinality + values[static_cast<std::size_t>(p)];
  return n.cpt[row * n.cardinality + values[static_cast<std::size_t>(node)]];
}

double BayesNet::log_prob(const std::vector<int>& values) const {
  if (values.size() != nodes_.size()) throw InvalidInput("log_prob: assignment has wrong length");
  double lp = 0.0;
  for (std::size_t i = 0; i < nodes_.size(); ++i) lp += std::log(cpt_entry(static_cast<int>(i), values));
  return lp;
}

// --- evidence ----------------------------------------------------------------------------

Evidence parse_evidence(const BayesNet& net, const std::vector<std::string>& items) {
  Evidence ev;
  for (const auto& item : items) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw InvalidInput("evidence '" + item + "' is not NODE=INDEX");
    const std::string name = item.substr(0, eq);
    const std::string value = item.substr(eq + 1);
    const int node = net.index_of(name);
    int idx = 0;
    std::size_t used = 0;
    try {
      idx = std::stoi(value, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != value.size() || value.empty()) {
      // allow state names as well
      const auto& states = net.node(static_cast<std::size_t>(node)).states;
      const auto it = std::find(states.begin(), states.end(), value);
      if (it == states.end()) throw InvalidInput("evidence '" + item + "': not an index or state name");
      idx = static_cast<int>(it - states.begin());
    }
    if (idx < 0 || idx >= net.node(static_cast<std::size_t>(node)).cardinality) {
      throw InvalidInput("evidence '" + item + "': index out of range");
    }
    ev.observed[node] = idx;
  }
  if (ev.observed.size() >= net.size()) throw InvalidInput("evidence must leave at least one latent node");
  return ev;
}

// --- BnPosterior -------------------------------------------------------------------------

BnPosterior::BnPosterior(BayesNet net, Evidence ev, double log_floor)
    : net_(std::move(net)), ev_(std::move(ev)), log_floor_(log_floor) {
  offset_of_node_.assign(net_.size(), -1);
  int off = 0;
  for (std::size_t i = 0; i < net_.size(); ++i) {
    const auto it = ev_.observed.find(static_cast<int>(i));
    if (it != ev_.observed.end()) {
      if (it->second < 0 || it->second >= net_.node(i).cardinality) throw InvalidInput("evidence index out of range");
      continue;
    }
    latent_.push_back(static_cast<int>(i));
    cards_.push_back(net_.node(i).cardinality);
    offset_of_node_[i] = off;
    off += net_.node(i).cardinality;
  }
  if (latent_.empty()) throw InvalidInput("evidence must leave at least one latent node");
  const double floor_p = std::exp(log_floor_);
  for (std::size_t i = 0; i < net_.size(); ++i) {
    Factor f;
    f.node = static_cast<int>(i);
    f.vars = net_.node(i).parents;
    f.vars.push_back(static_cast<int>(i));
    const auto& cpt = net_.node(i).cpt;
    f.log_table = cpt.unaryExpr([&](double p) { return std::max(std::log(p), log_floor_); });
    f.prob_table = cpt.cwiseMax(floor_p);
    factors_.push_back(std::move(f));
  }
}

std::vector<int> BnPosterior::factor_layout(const Factor& f, bool include_child) const {
  std::vector<int> layout;
  const std::size_t n = include_child ? f.vars.size() : f.vars.size() - 1;
  for (std::size_t i = 0; i < f.vars.size(); ++i) {
    const auto v = static_cast<std::size_t>(f.vars[i]);
    layout.push_back(net_.node(v).cardinality);
    if (i >= n) {
      layout.push_back(0);  // child slot unused by the mixing op
    } else if (offset_of_node_[v] >= 0) {
      layout.push_back(offset_of_node_[v]);
    } else {
      layout.push_back(-1 - ev_.observed.at(static_cast<int>(v)));
    }
  }
  return layout;
}

std::vector<int> BnPosterior::assignment(const Config& x) const {
  if (x.size() != latent_.size()) throw InvalidInput("latent configuration has wrong length");
  std::vector<int> values(net_.size());
  for (std::size_t i = 0; i < latent_.size(); ++i) {
    if (x[i] < 0 || x[i] >= cards_[i]) throw InvalidInput("latent value out of range");
    values[static_cast<std::size_t>(latent_[i])] = x[i];
  }
  for (const auto& [node, value] : ev_.observed) values[static_cast<std::size_t>(node)] = value;
  return values;
}

double BnPosterior::log_joint(const Config& x) const { return net_.log_prob(assignment(x)); }

Var BnPosterior::log_joint(Trace& t, Var x) const {
  const std::size_t n = static_cast<std::size_t>(std::accumulate(cards_.begin(), cards_.end(), 0));
  if (t.size(x) != n) throw InvalidInput("log_joint: configuration has wrong length");
  std::vector<Var> terms;
  double constant = 0.0;
  for (const auto& f : factors_) {
    const bool any_latent = std::any_of(f.vars.begin(), f.vars.end(),
                                        [&](int v) { return offset_of_node_[static_cast<std::size_t>(v)] >= 0; });
    const std::vector<int> layout = factor_layout(f, true);
    if (!any_latent) {
      const FactorView v = view_of(layout);
      int row = 0;
      for (std::size_t i = 0; i < v.cards.size(); ++i) row += (-1 - v.slots[i]) * v.strides[i];
      constant += f.log_table[row];
      continue;
    }
    const Var out = t.push(contract_backward, 1, {x},
                           std::span<const double>(f.log_table.data(), static_cast<std::size_t>(f.log_table.size())),
                           layout);
    const FactorView v = view_of(layout);
    const auto ch = choices(v, t.raw_value(x.id));
    double acc = 0.0;
    auto fn = [&](int row, double w) { acc += w * f.log_table[row]; };
    walk(ch, v.strides, 0, 0, 1.0, fn);
    t.mutable_value(out)[0] = acc;
    terms.push_back(out);
  }
  terms.push_back(t.scalar(constant));
  return sum(t, terms);
}

Var BnPosterior::cpt_mix(Trace& t, Var x, int node) const {
  const auto& f = factors_[static_cast<std::size_t>(node)];
  const std::vector<int> layout = factor_layout(f, false);
  const int kc = net_.node(static_cast<std::size_t>(node)).cardinality;
  const Var out = t.push(mix_backward, static_cast<std::size_t>(kc), {x},
                         std::span<const double>(f.prob_table.data(), static_cast<std::size_t>(f.prob_table.size())),
                         layout);
  const FactorView v = view_of(layout);
  auto ch = choices(v, t.raw_value(x.id));
  ch.back() = all_entries(kc);
  auto y = t.mutable_value(out);
  auto fn = [&](int row, double w) { y[static_cast<std::size_t>(row % kc)] += w * f.prob_table[row]; };
  walk(ch, v.strides, 0, 0, 1.0, fn);
  return out;
}

Var BnPosterior::relaxed_log_joint(Trace& t, Var x, Temperature tau_p) const {
  std::vector<Var> terms;
  for (std::size_t i = 0; i < net_.size(); ++i) {
    const Var mix = cpt_mix(t, x, static_cast<int>(i));
    const Var log_mix = log(t, mix);
    const int off = offset_of_node_[i];
    if (off >= 0) {
      const Var xi = slice(t, x, off, net_.node(i).cardinality);
      terms.push_back(gs_log_density(t, xi, log_mix, tau_p));
    } else {
      Eigen::VectorXd pick = Eigen::VectorXd::Zero(net_.node(i).cardinality);
      pick[ev_.observed.at(static_cast<int>(i))] = 1.0;
      terms.push_back(dot(t, log_mix, t.constant(pick)));
    }
  }
  return sum(t, terms);
}

std::int64_t BnPosterior::config_count() const {
  std::int64_t n = 1;
  for (int k : cards_) {
    if (n > std::numeric_limits<std::int64_t>::max() / k) return std::numeric_limits<std::int64_t>::max();
    n *= k;
  }
  return n;
}

ExactPosterior BnPosterior::exact_posterior(std::int64_t cap) const {
  const std::int64_t count = config_count();
  if (count > cap) {
    throw InvalidInput("exact posterior needs " + std::to_string(count) + " configurations, above the cap of " +
                       std::to_string(cap));
  }
  ExactPosterior out;
  out.table.resize(count);
  Config x(cards_.size(), 0);
  double m = kNegInf;
  for (std::int64_t i = 0; i < count; ++i) {
    out.table[i] = log_joint(x);
    m = std::max(m, out.table[i]);
    for (std::size_t d = x.size(); d-- > 0;) {
      if (++x[d] < cards_[d]) break;
      x[d] = 0;
    }
  }
  if (m == kNegInf) throw InvalidInput("evidence has probability zero");
  double s = 0.0;
  for (std::int64_t i = 0; i < count; ++i) {
    out.table[i] = std::exp(out.table[i] - m);
    s += out.table[i];
  }
  out.table /= s;
  out.log_evidence = m + std::log(s);
  return out;
}

}  // namespace mdnf
