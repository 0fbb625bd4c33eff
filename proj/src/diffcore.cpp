#include "mdnf/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mdnf {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

template <typename Fn>
void for_each_block(std::span<const int> blocks, std::size_t n, Fn&& fn) {
  if (blocks.empty()) {
    fn(std::size_t{0}, n);
    return;
  }
  std::size_t offset = 0;
  for (int b : blocks) {
    fn(offset, static_cast<std::size_t>(b));
    offset += static_cast<std::size_t>(b);
  }
}

void check_blocks(Blocks blocks, std::size_t n, const char* op) {
  if (blocks.empty()) return;
  std::size_t total = 0;
  for (int b : blocks) {
    if (b < 1) throw InvalidInput(std::string(op) + ": block sizes must be positive");
    total += static_cast<std::size_t>(b);
  }
  if (total != n) throw InvalidInput(std::string(op) + ": block sizes do not cover the vector");
}

std::span<const int> stored_blocks(const Trace& t, std::uint32_t id) { return t.iaux(id); }

// --- backward rules ----------------------------------------------------------

void softmax_backward(Trace& t, std::uint32_t id) {
  const auto s = t.raw_value(id);
  const auto g = t.raw_grad(id);
  auto gin = t.mutable_grad(t.parents(id)[0]);
  const double inv_tau = 1.0 / t.aux(id)[0];
  for_each_block(stored_blocks(t, id), s.size(), [&](std::size_t off, std::size_t k) {
    double inner = 0.0;
    for (std::size_t i = off; i < off + k; ++i) inner += s[i] * g[i];
    for (std::size_t i = off; i < off + k; ++i) gin[i] += s[i] * (g[i] - inner) * inv_tau;
  });
}

void identity_backward(Trace& t, std::uint32_t id) {
  const auto g = t.raw_grad(id);
  auto gin = t.mutable_grad(t.parents(id)[0]);
  for (std::size_t i = 0; i < g.size(); ++i) gin[i] += g[i];
}

void convolve_backward(Trace& t, std::uint32_t id) {
  const auto pa = t.parents(id)[0];
  const auto pb = t.parents(id)[1];
  const auto a = t.raw_value(pa);
  const auto b = t.raw_value(pb);
  const auto g = t.raw_grad(id);
  auto ga = t.mutable_grad(pa);
  auto gb = t.mutable_grad(pb);
  for_each_block(stored_blocks(t, id), g.size(), [&](std::size_t off, std::size_t k) {
    for (std::size_t i = 0; i < k; ++i) {
      const double bi = b[off + i];
      if (bi == 0.0) continue;
      for (std::size_t j = 0; j < k; ++j) ga[off + j] += g[off + (i + j) % k] * bi;
    }
    for (std::size_t j = 0; j < k; ++j) {
      const double aj = a[off + j];
      if (aj == 0.0) continue;
      for (std::size_t i = 0; i < k; ++i) gb[off + i] += g[off + (i + j) % k] * aj;
    }
  });
}

void correlate_backward(Trace& t, std::uint32_t id) {
  const auto px = t.parents(id)[0];
  const auto pa = t.parents(id)[1];
  const auto x = t.raw_value(px);
  const auto a = t.raw_value(pa);
  const auto g = t.raw_grad(id);
  auto gx = t.mutable_grad(px);
  auto ga = t.mutable_grad(pa);
  for_each_block(stored_blocks(t, id), g.size(), [&](std::size_t off, std::size_t k) {
    for (std::size_t j = 0; j < k; ++j) {
      const double aj = a[off + j];
      double acc = 0.0;
      for (std::size_t i = 0; i < k; ++i) {
        const std::size_t src = off + (i + j) % k;
        acc += g[off + i] * x[src];
        if (aj != 0.0) gx[src] += g[off + i] * aj;
      }
      ga[off + j] += acc;
    }
  });
}

void permute_backward(Trace& t, std::uint32_t id) {
  const auto g = t.raw_grad(id);
  const auto dest = t.iaux(id);
  auto gin = t.mutable_grad(t.parents(id)[0]);
  for (std::size_t i = 0; i < dest.size(); ++i) gin[i] += g[static_cast<std::size_t>(dest[i])];
}

void log_lookup_backward(Trace& t, std::uint32_t id) {
  const double g = t.raw_grad(id)[0];
  const auto table = t.aux(id);
  auto gin = t.mutable_grad(t.parents(id)[0]);
  for (std::size_t k = 0; k < table.size(); ++k) gin[k] += g * table[k];
}

void dot_backward(Trace& t, std::uint32_t id) {
  const double g = t.raw_grad(id)[0];
  const auto pa = t.parents(id)[0];
  const auto pb = t.parents(id)[1];
  const auto a = t.raw_value(pa);
  const auto b = t.raw_value(pb);
  auto ga = t.mutable_grad(pa);
  for (std::size_t k = 0; k < a.size(); ++k) ga[k] += g * b[k];
  auto gb = t.mutable_grad(pb);
  for (std::size_t k = 0; k < a.size(); ++k) gb[k] += g * a[k];
}

void add_backward(Trace& t, std::uint32_t id) {
  const auto g = t.raw_grad(id);
  for (auto p : t.parents(id)) {
    auto gin = t.mutable_grad(p);
    for (std::size_t i = 0; i < g.size(); ++i) gin[i] += g[i];
  }
}

void sub_backward(Trace& t, std::uint32_t id) {
  const auto g = t.raw_grad(id);
  auto ga = t.mutable_grad(t.parents(id)[0]);
  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  auto gb = t.mutable_grad(t.parents(id)[1]);
  for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
}

void scale_backward(Trace& t, std::uint32_t id) {
  const auto g = t.raw_grad(id);
  const double factor = t.aux(id)[0];
  auto gin = t.mutable_grad(t.parents(id)[0]);
  for (std::size_t i = 0; i < g.size(); ++i) gin[i] += factor * g[i];
}

void mul_backward(Trace& t, std::uint32_t id) {
  const auto g = t.raw_grad(id);
  const auto ps = t.parents(id)[0];
  const auto pv = t.parents(id)[1];
  const double s = t.raw_value(ps)[0];
  const auto v = t.raw_value(pv);
  double gs = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) gs += g[i] * v[i];
  t.mutable_grad(ps)[0] += gs;
  auto gv = t.mutable_grad(pv);
  for (std::size_t i = 0; i < g.size(); ++i) gv[i] += s * g[i];
}

void negate_backward(Trace& t, std::uint32_t id) {
  const auto g = t.raw_grad(id);
  auto gin = t.mutable_grad(t.parents(id)[0]);
  for (std::size_t i = 0; i < g.size(); ++i) gin[i] -= g[i];
}

void sum_elements_backward(Trace& t, std::uint32_t id) {
  const double g = t.raw_grad(id)[0];
  auto gin = t.mutable_grad(t.parents(id)[0]);
  for (auto& x : gin) x += g;
}

void log_backward(Trace& t, std::uint32_t id) {
  const auto g = t.raw_grad(id);
  const auto p = t.parents(id)[0];
  const auto v = t.raw_value(p);
  auto gin = t.mutable_grad(p);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g[i] != 0.0) gin[i] += g[i] / v[i];
  }
}

void exp_backward(Trace& t, std::uint32_t id) {
  const auto g = t.raw_grad(id);
  const auto out = t.raw_value(id);
  auto gin = t.mutable_grad(t.parents(id)[0]);
  for (std::size_t i = 0; i < g.size(); ++i) gin[i] += g[i] * out[i];
}

void sigmoid_backward(Trace& t, std::uint32_t id) {
  const auto g = t.raw_grad(id);
  const auto s = t.raw_value(id);
  auto gin = t.mutable_grad(t.parents(id)[0]);
  for (std::size_t i = 0; i < g.size(); ++i) gin[i] += g[i] * s[i] * (1.0 - s[i]);
}

void log_sum_exp_backward(Trace& t, std::uint32_t id) {
  const double g = t.raw_grad(id)[0];
  const double out = t.raw_value(id)[0];
  if (g == 0.0 || out == kNegInf) return;
  const auto p = t.parents(id)[0];
  const auto v = t.raw_value(p);
  auto gin = t.mutable_grad(p);
  for (std::size_t i = 0; i < v.size(); ++i) gin[i] += g * std::exp(v[i] - out);
}

void concat_backward(Trace& t, std::uint32_t id) {
  const auto g = t.raw_grad(id);
  std::size_t offset = 0;
  for (auto p : t.parents(id)) {
    auto gin = t.mutable_grad(p);
    for (std::size_t i = 0; i < gin.size(); ++i) gin[i] += g[offset + i];
    offset += gin.size();
  }
}

void slice_backward(Trace& t, std::uint32_t id) {
  const auto g = t.raw_grad(id);
  const auto offset = static_cast<std::size_t>(t.iaux(id)[0]);
  auto gin = t.mutable_grad(t.parents(id)[0]);
  for (std::size_t i = 0; i < g.size(); ++i) gin[offset + i] += g[i];
}

void gather_backward(Trace& t, std::uint32_t id) {
  const auto g = t.raw_grad(id);
  const auto index = t.iaux(id);
  auto gin = t.mutable_grad(t.parents(id)[0]);
  for (std::size_t i = 0; i < index.size(); ++i) gin[static_cast<std::size_t>(index[i])] += g[i];
}

void scatter_replace_backward(Trace& t, std::uint32_t id) {
  const auto g = t.raw_grad(id);
  const auto index = t.iaux(id);
  auto gbase = t.mutable_grad(t.parents(id)[0]);
  auto gvals = t.mutable_grad(t.parents(id)[1]);
  std::vector<char> replaced(g.size(), 0);
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto k = static_cast<std::size_t>(index[i]);
    replaced[k] = 1;
    gvals[i] += g[k];
  }
  for (std::size_t k = 0; k < g.size(); ++k) {
    if (!replaced[k]) gbase[k] += g[k];
  }
}

void entropy_backward(Trace& t, std::uint32_t id) {
  const double g = t.raw_grad(id)[0];
  const auto p = t.parents(id)[0];
  const auto v = t.raw_value(p);
  auto gin = t.mutable_grad(p);
  for (std::size_t i = 0; i < v.size(); ++i) {
    gin[i] += -g * (std::log(std::max(v[i], 1e-300)) + 1.0);
  }
}

}  // namespace

// --- Temperature ---------------------------------------------------------------

Temperature::Temperature(double tau) : tau_(tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw InvalidInput("temperature must be positive and finite");
}

// --- Trace -------------------------------------------------------------------

void Trace::clear() {
  nodes_.clear();
  values_.clear();
  grads_.clear();
  parent_ids_.clear();
  aux_.clear();
  iaux_.clear();
}

const Trace::Node& Trace::node(std::uint32_t id) const {
  if (id >= nodes_.size()) throw InternalError("trace: node id out of range");
  return nodes_[id];
}

Var Trace::push(BackwardFn backward, std::size_t size, std::span<const Var> parents,
                std::span<const double> aux, std::span<const int> iaux) {
  const auto id = static_cast<std::uint32_t>(nodes_.size());
  Node n;
  n.backward = backward;
  n.value_offset = static_cast<std::uint32_t>(values_.size());
  n.size = static_cast<std::uint32_t>(size);
  n.parent_offset = static_cast<std::uint32_t>(parent_ids_.size());
  n.parent_count = static_cast<std::uint32_t>(parents.size());
  for (const Var& p : parents) {
    if (p.id >= id) throw InternalError("trace: parent does not precede its consumer");
    parent_ids_.push_back(p.id);
  }
  n.aux_offset = static_cast<std::uint32_t>(aux_.size());
  n.aux_count = static_cast<std::uint32_t>(aux.size());
  aux_.insert(aux_.end(), aux.begin(), aux.end());
  n.iaux_offset = static_cast<std::uint32_t>(iaux_.size());
  n.iaux_count = static_cast<std::uint32_t>(iaux.size());
  iaux_.insert(iaux_.end(), iaux.begin(), iaux.end());
  values_.resize(values_.size() + size, 0.0);
  nodes_.push_back(n);
  return Var{id};
}

Var Trace::constant(std::span<const double> value) {
  const Var v = push(nullptr, value.size(), std::span<const Var>{});
  std::copy(value.begin(), value.end(), mutable_value(v).begin());
  return v;
}

Var Trace::constant(const Eigen::VectorXd& value) {
  return constant(std::span<const double>(value.data(), static_cast<std::size_t>(value.size())));
}

Var Trace::scalar(double value) { return constant(std::span<const double>(&value, 1)); }

Trace::ConstMap Trace::value(Var v) const {
  const Node& n = node(v.id);
  return ConstMap(values_.data() + n.value_offset, n.size);
}

double Trace::scalar_value(Var v) const {
  const Node& n = node(v.id);
  if (n.size != 1) throw InvalidInput("trace: node is not scalar");
  return values_[n.value_offset];
}

Trace::ConstMap Trace::grad(Var v) const {
  const Node& n = node(v.id);
  if (grads_.size() != values_.size()) throw InternalError("trace: no reverse sweep has been run");
  return ConstMap(grads_.data() + n.value_offset, n.size);
}

std::span<double> Trace::mutable_value(Var v) {
  const Node& n = node(v.id);
  return {values_.data() + n.value_offset, n.size};
}

std::span<const double> Trace::raw_value(std::uint32_t id) const {
  const Node& n = nodes_[id];
  return {values_.data() + n.value_offset, n.size};
}

std::span<const double> Trace::raw_grad(std::uint32_t id) const {
  const Node& n = nodes_[id];
  return {grads_.data() + n.value_offset, n.size};
}

std::span<double> Trace::mutable_grad(std::uint32_t id) {
  const Node& n = nodes_[id];
  return {grads_.data() + n.value_offset, n.size};
}

std::span<const std::uint32_t> Trace::parents(std::uint32_t id) const {
  const Node& n = nodes_[id];
  return {parent_ids_.data() + n.parent_offset, n.parent_count};
}

std::span<const double> Trace::aux(std::uint32_t id) const {
  const Node& n = nodes_[id];
  return {aux_.data() + n.aux_offset, n.aux_count};
}

std::span<const int> Trace::iaux(std::uint32_t id) const {
  const Node& n = nodes_[id];
  return {iaux_.data() + n.iaux_offset, n.iaux_count};
}

void Trace::reverse_sweep(Var root) {
  if (node(root.id).size != 1) throw InvalidInput("reverse_sweep: root must be scalar");
  grads_.assign(values_.size(), 0.0);
  grads_[nodes_[root.id].value_offset] = 1.0;
  for (std::uint32_t id = root.id + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (n.backward == nullptr) continue;
    for (auto p : parents(id)) {
      if (p >= id) throw InternalError("reverse_sweep: cycle detected");
    }
    n.backward(*this, id);
  }
}

// --- ops -----------------------------------------------------------------------

Var softmax_temp(Trace& t, Var logits, Temperature tau, Blocks blocks) {
  const std::size_t n = t.size(logits);
  check_blocks(blocks, n, "softmax_temp");
  const double tv = tau.value();
  const Var out = t.push(softmax_backward, n, {logits}, std::span<const double>(&tv, 1), blocks);
  const auto x = t.raw_value(logits.id);
  auto s = t.mutable_value(out);
  for_each_block(blocks, n, [&](std::size_t off, std::size_t k) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t i = off; i < off + k; ++i) {
      if (!std::isfinite(x[i])) throw InvalidInput("softmax_temp: non-finite logit");
      m = std::max(m, x[i]);
    }
    double z = 0.0;
    for (std::size_t i = off; i < off + k; ++i) {
      s[i] = std::exp((x[i] - m) / tv);
      z += s[i];
    }
    for (std::size_t i = off; i < off + k; ++i) s[i] /= z;
  });
  return out;
}

Var straight_through(Trace& t, Var relaxed, Blocks blocks) {
  const std::size_t n = t.size(relaxed);
  check_blocks(blocks, n, "straight_through");
  const Var out = t.push(identity_backward, n, {relaxed}, {}, blocks);
  const auto x = t.raw_value(relaxed.id);
  auto y = t.mutable_value(out);
  for_each_block(blocks, n, [&](std::size_t off, std::size_t k) {
    std::size_t best = off;
    for (std::size_t i = off + 1; i < off + k; ++i) {
      if (x[i] > x[best]) best = i;
    }
    y[best] = 1.0;
  });
  return out;
}

Var circular_convolve(Trace& t, Var a, Var b, Blocks blocks) {
  const std::size_t n = t.size(a);
  if (t.size(b) != n) throw InvalidInput("circular_convolve: length mismatch");
  check_blocks(blocks, n, "circular_convolve");
  const Var out = t.push(convolve_backward, n, {a, b}, {}, blocks);
  const auto av = t.raw_value(a.id);
  const auto bv = t.raw_value(b.id);
  auto y = t.mutable_value(out);
  for_each_block(blocks, n, [&](std::size_t off, std::size_t k) {
    for (std::size_t j = 0; j < k; ++j) {
      const double aj = av[off + j];
      if (aj == 0.0) continue;
      for (std::size_t i = 0; i < k; ++i) {
        const double bi = bv[off + i];
        if (bi != 0.0) y[off + (i + j) % k] += aj * bi;
      }
    }
  });
  return out;
}

Var circular_correlate(Trace& t, Var x, Var a, Blocks blocks) {
  const std::size_t n = t.size(x);
  if (t.size(a) != n) throw InvalidInput("circular_correlate: length mismatch");
  check_blocks(blocks, n, "circular_correlate");
  const Var out = t.push(correlate_backward, n, {x, a}, {}, blocks);
  const auto xv = t.raw_value(x.id);
  const auto av = t.raw_value(a.id);
  auto y = t.mutable_value(out);
  for_each_block(blocks, n, [&](std::size_t off, std::size_t k) {
    for (std::size_t j = 0; j < k; ++j) {
      const double aj = av[off + j];
      if (aj == 0.0) continue;
      for (std::size_t i = 0; i < k; ++i) y[off + i] += aj * xv[off + (i + j) % k];
    }
  });
  return out;
}

Var permute(Trace& t, Var v, std::span<const int> dest) {
  const std::size_t n = t.size(v);
  if (dest.size() != n) throw InvalidInput("permute: permutation length mismatch");
  std::vector<char> seen(n, 0);
  for (int d : dest) {
    if (d < 0 || static_cast<std::size_t>(d) >= n || seen[static_cast<std::size_t>(d)]) {
      throw InvalidInput("permute: not a permutation");
    }
    seen[static_cast<std::size_t>(d)] = 1;
  }
  const Var out = t.push(permute_backward, n, {v}, {}, dest);
  const auto x = t.raw_value(v.id);
  auto y = t.mutable_value(out);
  for (std::size_t i = 0; i < n; ++i) y[static_cast<std::size_t>(dest[i])] = x[i];
  return out;
}

Var log_lookup(Trace& t, Var x, const Eigen::VectorXd& table) {
  const std::size_t n = t.size(x);
  if (static_cast<std::size_t>(table.size()) != n) throw InvalidInput("log_lookup: length mismatch");
  const Var out = t.push(log_lookup_backward, 1, {x},
                         std::span<const double>(table.data(), n));
  const auto xv = t.raw_value(x.id);
  double acc = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (xv[k] != 0.0) acc += xv[k] * table[static_cast<Eigen::Index>(k)];
  }
  t.mutable_value(out)[0] = acc;
  return out;
}

Var dot(Trace& t, Var a, Var b) {
  const std::size_t n = t.size(a);
  if (t.size(b) != n) throw InvalidInput("dot: length mismatch");
  const Var out = t.push(dot_backward, 1, {a, b});
  t.mutable_value(out)[0] = t.value(a).dot(t.value(b));
  return out;
}

Var add(Trace& t, Var a, Var b) {
  const std::size_t n = t.size(a);
  if (t.size(b) != n) throw InvalidInput("add: length mismatch");
  const Var out = t.push(add_backward, n, {a, b});
  const auto av = t.raw_value(a.id);
  const auto bv = t.raw_value(b.id);
  auto y = t.mutable_value(out);
  for (std::size_t i = 0; i < n; ++i) y[i] = av[i] + bv[i];
  return out;
}

Var sub(Trace& t, Var a, Var b) {
  const std::size_t n = t.size(a);
  if (t.size(b) != n) throw InvalidInput("sub: length mismatch");
  const Var out = t.push(sub_backward, n, {a, b});
  const auto av = t.raw_value(a.id);
  const auto bv = t.raw_value(b.id);
  auto y = t.mutable_value(out);
  for (std::size_t i = 0; i < n; ++i) y[i] = av[i] - bv[i];
  return out;
}

Var scale(Trace& t, Var v, double factor) {
  const std::size_t n = t.size(v);
  const Var out = t.push(scale_backward, n, {v}, std::span<const double>(&factor, 1));
  const auto x = t.raw_value(v.id);
  auto y = t.mutable_value(out);
  for (std::size_t i = 0; i < n; ++i) y[i] = factor * x[i];
  return out;
}

Var add_constant(Trace& t, Var v, const Eigen::VectorXd& offset) {
  const std::size_t n = t.size(v);
  if (static_cast<std::size_t>(offset.size()) != n) throw InvalidInput("add_constant: length mismatch");
  const Var out = t.push(identity_backward, n, {v});
  const auto x = t.raw_value(v.id);
  auto y = t.mutable_value(out);
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] + offset[static_cast<Eigen::Index>(i)];
  return out;
}

Var mul(Trace& t, Var scalar, Var v) {
  if (t.size(scalar) != 1) throw InvalidInput("mul: first operand must be scalar");
  const std::size_t n = t.size(v);
  const Var out = t.push(mul_backward, n, {scalar, v});
  const double s = t.raw_value(scalar.id)[0];
  const auto x = t.raw_value(v.id);
  auto y = t.mutable_value(out);
  for (std::size_t i = 0; i < n; ++i) y[i] = s * x[i];
  return out;
}

Var one_minus(Trace& t, Var v) {
  const std::size_t n = t.size(v);
  const Var out = t.push(negate_backward, n, {v});
  const auto x = t.raw_value(v.id);
  auto y = t.mutable_value(out);
  for (std::size_t i = 0; i < n; ++i) y[i] = 1.0 - x[i];
  return out;
}

Var sum(Trace& t, std::span<const Var> terms) {
  if (terms.empty()) throw InvalidInput("sum: no terms");
  const std::size_t n = t.size(terms[0]);
  for (const Var& v : terms) {
    if (t.size(v) != n) throw InvalidInput("sum: length mismatch");
  }
  const Var out = t.push(add_backward, n, terms);
  auto y = t.mutable_value(out);
  for (const Var& v : terms) {
    const auto x = t.raw_value(v.id);
    for (std::size_t i = 0; i < n; ++i) y[i] += x[i];
  }
  return out;
}

Var sum_elements(Trace& t, Var v) {
  const Var out = t.push(sum_elements_backward, 1, {v});
  t.mutable_value(out)[0] = t.value(v).sum();
  return out;
}

Var log(Trace& t, Var v) {
  const std::size_t n = t.size(v);
  const Var out = t.push(log_backward, n, {v});
  const auto x = t.raw_value(v.id);
  auto y = t.mutable_value(out);
  for (std::size_t i = 0; i < n; ++i) y[i] = std::log(x[i]);
  return out;
}

Var exp(Trace& t, Var v) {
  const std::size_t n = t.size(v);
  const Var out = t.push(exp_backward, n, {v});
  const auto x = t.raw_value(v.id);
  auto y = t.mutable_value(out);
  for (std::size_t i = 0; i < n; ++i) y[i] = std::exp(x[i]);
  return out;
}

Var sigmoid(Trace& t, Var v) {
  const std::size_t n = t.size(v);
  const Var out = t.push(sigmoid_backward, n, {v});
  const auto x = t.raw_value(v.id);
  auto y = t.mutable_value(out);
  for (std::size_t i = 0; i < n; ++i) y[i] = 1.0 / (1.0 + std::exp(-x[i]));
  return out;
}

Var log_sum_exp(Trace& t, Var v) {
  const Var out = t.push(log_sum_exp_backward, 1, {v});
  const auto x = t.raw_value(v.id);
  double m = kNegInf;
  for (double xi : x) m = std::max(m, xi);
  double result = m;
  if (m != kNegInf) {
    double z = 0.0;
    for (double xi : x) z += std::exp(xi - m);
    result = m + std::log(z);
  }
  t.mutable_value(out)[0] = result;
  return out;
}

Var concat(Trace& t, std::span<const Var> parts) {
  std::size_t n = 0;
  for (const Var& p : parts) n += t.size(p);
  const Var out = t.push(concat_backward, n, parts);
  auto y = t.mutable_value(out);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const auto x = t.raw_value(p.id);
    std::copy(x.begin(), x.end(), y.begin() + static_cast<std::ptrdiff_t>(offset));
    offset += x.size();
  }
  return out;
}

Var slice(Trace& t, Var v, int offset, int length) {
  if (offset < 0 || length < 0 || static_cast<std::size_t>(offset + length) > t.size(v)) {
    throw InvalidInput("slice: range out of bounds");
  }
  const int meta[1] = {offset};
  const Var out = t.push(slice_backward, static_cast<std::size_t>(length), {v}, {}, meta);
  const auto x = t.raw_value(v.id);
  auto y = t.mutable_value(out);
  std::copy(x.begin() + offset, x.begin() + offset + length, y.begin());
  return out;
}

Var gather(Trace& t, Var v, std::span<const int> index) {
  const std::size_t n = t.size(v);
  for (int i : index) {
    if (i < 0 || static_cast<std::size_t>(i) >= n) throw InvalidInput("gather: index out of range");
  }
  const Var out = t.push(gather_backward, index.size(), {v}, {}, index);
  const auto x = t.raw_value(v.id);
  auto y = t.mutable_value(out);
  for (std::size_t i = 0; i < index.size(); ++i) y[i] = x[static_cast<std::size_t>(index[i])];
  return out;
}

Var scatter_replace(Trace& t, Var base, Var values, std::span<const int> index) {
  const std::size_t n = t.size(base);
  if (t.size(values) != index.size()) throw InvalidInput("scatter_replace: length mismatch");
  for (int i : index) {
    if (i < 0 || static_cast<std::size_t>(i) >= n) throw InvalidInput("scatter_replace: index out of range");
  }
  const Var out = t.push(scatter_replace_backward, n, {base, values}, {}, index);
  const auto b = t.raw_value(base.id);
  const auto v = t.raw_value(values.id);
  auto y = t.mutable_value(out);
  std::copy(b.begin(), b.end(), y.begin());
  for (std::size_t i = 0; i < index.size(); ++i) y[static_cast<std::size_t>(index[i])] = v[i];
  return out;
}

Var entropy(Trace& t, Var p, Blocks blocks) {
  check_blocks(blocks, t.size(p), "entropy");
  const Var out = t.push(entropy_backward, 1, {p});
  double h = 0.0;
  for (double pi : t.raw_value(p.id)) {
    if (pi > 0.0) h -= pi * std::log(pi);
  }
  t.mutable_value(out)[0] = h;
  return out;
}

}  // namespace mdnf
