#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "pcmp/container.hpp"
#include "pcmp/tensor.hpp"

namespace pcmp::ad {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while its graph lives.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the reverse
/// of insertion order is a valid reverse topological order; backward walks it
/// exactly once. Frozen inputs are plain constants and never get gradients.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor t) { return push(std::move(t), nullptr, false, {}); }

  /// Non-owning constant; `t` must outlive the graph.
  Var constant_ref(const Tensor& t) { return push({}, &t, false, {}); }

  /// Differentiable input. `t` must outlive the graph.
  Var input_ref(const Tensor& t) { return push({}, &t, true, {}); }
  Var input(Tensor t) { return push(std::move(t), nullptr, true, {}); }

  Var make(Tensor value, bool requires_grad, BackwardFn fn) {
    return push(std::move(value), nullptr, requires_grad, requires_grad ? std::move(fn) : BackwardFn{});
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.ref ? *n.ref : n.owned;
  }
  const Tensor& value(Var v) const { return value(v.id); }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id); }

  /// Gradient of the last backward() target w.r.t. `v`; zeros if it received none.
  Tensor grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.empty()) return Tensor(value(v).shape());
    return n.grad;
  }

  /// Adds `g` into the gradient slot of node `id` (no-op for constants).
  void accumulate(std::size_t id, const Tensor& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      n.grad = g;
      return;
    }
    double* dst = n.grad.data();
    const double* src = g.data();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
  }

  /// Writable gradient buffer for `id`, zero-initialized on first use.
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(value(id).shape());
    return n.grad;
  }

  void backward(Var target) {
    if (value(target).size() != 1) {
      throw ContractError("backward needs a scalar output, got shape " + shape_str(value(target).shape()));
    }
    for (auto& n : nodes_) n.grad = Tensor();
    if (!nodes_[target.id].requires_grad) return;
    nodes_[target.id].grad = Tensor(value(target).shape(), 1.0);
    for (std::size_t i = target.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      const Tensor out_grad = n.grad;
      n.backward(*this, out_grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* ref = nullptr;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor owned, const Tensor* ref, bool requires_grad, BackwardFn fn) {
    Node n;
    n.owned = std::move(owned);
    n.ref = ref;
    n.requires_grad = requires_grad;
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph->value(id); }

/// Named parameter slots, each trainable or frozen.
class ParamSet {
 public:
  ParamSet() = default;
  explicit ParamSet(TensorMap values) : values_(std::move(values)) {}

  void add(const std::string& name, Tensor t, bool trainable = true) {
    values_[name] = std::move(t);
    if (trainable)
      frozen_.erase(name);
    else
      frozen_.insert(name);
  }

  bool contains(const std::string& name) const { return values_.count(name) != 0; }
  bool trainable(const std::string& name) const { return contains(name) && frozen_.count(name) == 0; }
  void freeze(const std::string& name) { frozen_.insert(name); }
  void unfreeze(const std::string& name) { frozen_.erase(name); }
  void freeze_all() {
    for (const auto& [k, v] : values_) frozen_.insert(k);
  }

  const Tensor& at(const std::string& name) const {
    auto it = values_.find(name);
    if (it == values_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }
  Tensor& at(const std::string& name) {
    auto it = values_.find(name);
    if (it == values_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  const TensorMap& values() const { return values_; }
  TensorMap& values() { return values_; }

  std::vector<std::string> trainable_names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_)
      if (!frozen_.count(k)) out.push_back(k);
    return out;
  }

 private:
  TensorMap values_;
  std::set<std::string> frozen_;
};

/// Binds ParamSet slots into a graph (once per name) and collects their gradients.
class Binder {
 public:
  Binder(Graph& graph, const ParamSet& params) : graph_(graph), params_(params) {}

  Graph& graph() { return graph_; }

  Var operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const Tensor& t = params_.at(name);
    Var v = params_.trainable(name) ? graph_.input_ref(t) : graph_.constant_ref(t);
    bound_.emplace(name, v);
    return v;
  }

  /// Gradients for every bound trainable slot (zeros when unreached).
  TensorMap gradients() const {
    TensorMap out;
    for (const auto& [name, v] : bound_)
      if (params_.trainable(name)) out.emplace(name, graph_.grad(v));
    return out;
  }

 private:
  Graph& graph_;
  const ParamSet& params_;
  std::map<std::string, Var> bound_;
};

namespace detail {

inline void require_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline void require_matrix(const Var& a, const char* op) {
  if (a.value().rank() != 2) throw DimensionError(std::string(op) + " expects a matrix, got " + shape_str(a.shape()));
}

inline bool any_grad(std::initializer_list<Var> vs) {
  for (const Var& v : vs)
    if (v.graph->requires_grad(v)) return true;
  return false;
}

}  // namespace detail

// ---- elementwise ----------------------------------------------------------

inline Var add(Var a, Var b) {
  detail::require_same(a, b, "add");
  Tensor out = a.value();
  const double* bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.graph->make(std::move(out), detail::any_grad({a, b}), [a, b](Graph& g, const Tensor& go) {
    g.accumulate(a.id, go);
    g.accumulate(b.id, go);
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same(a, b, "sub");
  Tensor out = a.value();
  const double* bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.graph->make(std::move(out), detail::any_grad({a, b}), [a, b](Graph& g, const Tensor& go) {
    g.accumulate(a.id, go);
    if (g.requires_grad(b.id)) {
      Tensor neg = go;
      for (double& v : neg.values()) v = -v;
      g.accumulate(b.id, neg);
    }
  });
}

inline Var mul(Var a, Var b) {
  detail::require_same(a, b, "mul");
  Tensor out = a.value();
  const double* bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.graph->make(std::move(out), detail::any_grad({a, b}), [a, b](Graph& g, const Tensor& go) {
    if (g.requires_grad(a.id)) {
      Tensor ga = go;
      const double* bv = g.value(b).data();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= bv[i];
      g.accumulate(a.id, ga);
    }
    if (g.requires_grad(b.id)) {
      Tensor gb = go;
      const double* av = g.value(a).data();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= av[i];
      g.accumulate(b.id, gb);
    }
  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= s;
  return a.graph->make(std::move(out), detail::any_grad({a}), [a, s](Graph& g, const Tensor& go) {
    Tensor ga = go;
    for (double& v : ga.values()) v *= s;
    g.accumulate(a.id, ga);
  });
}

inline Var add_scalar(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v += s;
  return a.graph->make(std::move(out), detail::any_grad({a}), [a](Graph& g, const Tensor& go) { g.accumulate(a.id, go); });
}

/// a[m x n] + bias broadcast over rows; bias has n elements (any rank).
inline Var add_row(Var a, Var bias) {
  detail::require_matrix(a, "add_row");
  const std::size_t m = a.rows(), n = a.cols();
  if (bias.value().size() != n) {
    throw DimensionError("add_row: bias " + shape_str(bias.shape()) + " does not fit " + shape_str(a.shape()));
  }
  Tensor out = a.value();
  const double* bv = bias.value().data();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out.at(r, c) += bv[c];
  return a.graph->make(std::move(out), detail::any_grad({a, bias}), [a, bias, m, n](Graph& g, const Tensor& go) {
    g.accumulate(a.id, go);
    if (g.requires_grad(bias.id)) {
      Tensor& gb = g.grad_buffer(bias.id);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) gb[c] += go.at(r, c);
    }
  });
}

template <typename F, typename DF>
Var unary(Var a, F f, DF df) {
  Tensor out = a.value();
  for (double& v : out.values()) v = f(v);
  return a.graph->make(std::move(out), detail::any_grad({a}), [a, df](Graph& g, const Tensor& go) {
    Tensor ga = go;
    const double* x = g.value(a).data();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= df(x[i]);
    g.accumulate(a.id, ga);
  });
}

inline Var relu(Var a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var tanh(Var a) {
  return unary(a, [](double x) { return std::tanh(x); },
               [](double x) {
                 const double t = std::tanh(x);
                 return 1.0 - t * t;
               });
}

inline Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

/// tanh-approximated GELU.
inline Var gelu(Var a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return unary(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x))); },
      [](double x) {
        const double u = k * (x + 0.044715 * x * x * x);
        const double t = std::tanh(u);
        const double du = k * (1.0 + 3.0 * 0.044715 * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      });
}

// ---- reductions -------------------------------------------------------------

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.graph->make(Tensor({1}, s), detail::any_grad({a}), [a](Graph& g, const Tensor& go) {
    g.accumulate(a.id, Tensor(g.value(a).shape(), go[0]));
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Euclidean norm of each row -> vector[m]. Zero rows get a zero subgradient.
inline Var row_norms(Var a) {
  detail::require_matrix(a, "row_norms");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out({m});
  for (std::size_t r = 0; r < m; ++r) out[r] = l2_norm(a.value().row(r));
  Tensor norms = out;
  return a.graph->make(std::move(out), detail::any_grad({a}), [a, m, n, norms](Graph& g, const Tensor& go) {
    Tensor ga({m, n});
    const Tensor& x = g.value(a);
    for (std::size_t r = 0; r < m; ++r) {
      if (norms[r] == 0.0) continue;
      const double s = go[r] / norms[r];
      for (std::size_t c = 0; c < n; ++c) ga.at(r, c) = s * x.at(r, c);
    }
    g.accumulate(a.id, ga);
  });
}

// ---- linear algebra ---------------------------------------------------------

inline Var matmul(Var a, Var b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out({m, n});
  kernels::matmul(a.value().data(), b.value().data(), out.data(), m, k, n);
  return a.graph->make(std::move(out), detail::any_grad({a, b}), [a, b, m, k, n](Graph& g, const Tensor& go) {
    if (g.requires_grad(a.id)) {
      Tensor& ga = g.grad_buffer(a.id);
      kernels::matmul_nt(go.data(), g.value(b).data(), ga.data(), m, n, k, true);
    }
    if (g.requires_grad(b.id)) {
      Tensor& gb = g.grad_buffer(b.id);
      kernels::matmul_tn(g.value(a).data(), go.data(), gb.data(), m, k, n, true);
    }
  });
}

/// a[m x k] * b[n x k]^T
inline Var matmul_nt(Var a, Var b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  }
  Tensor out({m, n});
  kernels::matmul_nt(a.value().data(), b.value().data(), out.data(), m, k, n);
  return a.graph->make(std::move(out), detail::any_grad({a, b}), [a, b, m, k, n](Graph& g, const Tensor& go) {
    if (g.requires_grad(a.id)) {
      Tensor& ga = g.grad_buffer(a.id);
      kernels::matmul(go.data(), g.value(b).data(), ga.data(), m, n, k, true);
    }
    if (g.requires_grad(b.id)) {
      Tensor& gb = g.grad_buffer(b.id);
      kernels::matmul_tn(go.data(), g.value(a).data(), gb.data(), m, n, k, true);
    }
  });
}

inline Var transpose(Var a) {
  detail::require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out({n, m});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out.at(c, r) = a.value().at(r, c);
  return a.graph->make(std::move(out), detail::any_grad({a}), [a, m, n](Graph& g, const Tensor& go) {
    Tensor& ga = g.grad_buffer(a.id);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) ga.at(r, c) += go.at(c, r);
  });
}

// ---- normalization ----------------------------------------------------------

inline Var softmax_rows(Var x) {
  detail::require_matrix(x, "softmax_rows");
  Tensor out = pcmp::softmax_rows(x.value());
  const std::size_t m = x.rows(), n = x.cols();
  return x.graph->make(out, detail::any_grad({x}), [x, out, m, n](Graph& g, const Tensor& go) {
    Tensor gx({m, n});
    for (std::size_t r = 0; r < m; ++r) {
      double d = 0.0;
      for (std::size_t c = 0; c < n; ++c) d += go.at(r, c) * out.at(r, c);
      for (std::size_t c = 0; c < n; ++c) gx.at(r, c) = out.at(r, c) * (go.at(r, c) - d);
    }
    g.accumulate(x.id, gx);
  });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Per-row standardization (population variance, eps inside the sqrt) then affine.
inline Var layer_norm(Var x, Var gain, Var bias) {
  detail::require_matrix(x, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  if (n < 2) throw DimensionError("layer_norm needs at least 2 columns");
  if (gain.value().size() != n || bias.value().size() != n) {
    throw DimensionError("layer_norm: gain/bias do not match width " + std::to_string(n));
  }
  Tensor xhat({m, n});
  std::vector<double> inv_std(m);
  const Tensor& xv = x.value();
  for (std::size_t r = 0; r < m; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += xv.at(r, c);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      const double d = xv.at(r, c) - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t c = 0; c < n; ++c) xhat.at(r, c) = (xv.at(r, c) - mu) * inv_std[r];
  }
  Tensor out = xhat;
  const double* gv = gain.value().data();
  const double* bv = bias.value().data();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out.at(r, c) = out.at(r, c) * gv[c] + bv[c];
  return x.graph->make(std::move(out), detail::any_grad({x, gain, bias}),
                       [x, gain, bias, xhat, inv_std, m, n](Graph& g, const Tensor& go) {
                         if (g.requires_grad(gain.id) || g.requires_grad(bias.id)) {
                           Tensor gg(g.value(gain).shape());
                           Tensor gb(g.value(bias).shape());
                           for (std::size_t r = 0; r < m; ++r)
                             for (std::size_t c = 0; c < n; ++c) {
                               gg[c] += go.at(r, c) * xhat.at(r, c);
                               gb[c] += go.at(r, c);
                             }
                           g.accumulate(gain.id, gg);
                           g.accumulate(bias.id, gb);
                         }
                         if (g.requires_grad(x.id)) {
                           const double* gv = g.value(gain).data();
                           Tensor gx({m, n});
                           const double inv_n = 1.0 / static_cast<double>(n);
                           for (std::size_t r = 0; r < m; ++r) {
                             double s1 = 0.0, s2 = 0.0;
                             for (std::size_t c = 0; c < n; ++c) {
                               const double dxh = go.at(r, c) * gv[c];
                               s1 += dxh;
                               s2 += dxh * xhat.at(r, c);
                             }
                             for (std::size_t c = 0; c < n; ++c) {
                               const double dxh = go.at(r, c) * gv[c];
                               gx.at(r, c) = inv_std[r] * (dxh - inv_n * s1 - xhat.at(r, c) * inv_n * s2);
                             }
                           }
                           g.accumulate(x.id, gx);
                         }
                       });
}

/// Rows scaled to unit L2 norm; a zero row is a degenerate input.
inline Var l2_normalize_rows(Var a) {
  detail::require_matrix(a, "l2_normalize_rows");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = pcmp::l2_normalize_rows(a.value());
  std::vector<double> norms(m);
  for (std::size_t r = 0; r < m; ++r) norms[r] = l2_norm(a.value().row(r));
  return a.graph->make(out, detail::any_grad({a}), [a, out, norms, m, n](Graph& g, const Tensor& go) {
    Tensor ga({m, n});
    for (std::size_t r = 0; r < m; ++r) {
      double d = 0.0;
      for (std::size_t c = 0; c < n; ++c) d += go.at(r, c) * out.at(r, c);
      for (std::size_t c = 0; c < n; ++c) ga.at(r, c) = (go.at(r, c) - d * out.at(r, c)) / norms[r];
    }
    g.accumulate(a.id, ga);
  });
}

// ---- structural ---------------------------------------------------------------

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  for (const Var& p : parts) {
    detail::require_matrix(p, "concat_rows");
    if (p.cols() != n) throw DimensionError("concat_rows: width mismatch");
    m += p.rows();
  }
  Tensor out({m, n});
  std::size_t off = 0;
  bool rg = false;
  for (const Var& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), out.data() + off * n);
    off += p.rows();
    rg = rg || p.graph->requires_grad(p);
  }
  return parts.front().graph->make(std::move(out), rg, [parts, n](Graph& g, const Tensor& go) {
    std::size_t off = 0;
    for (const Var& p : parts) {
      const std::size_t rows = g.value(p).rows();
      if (g.requires_grad(p.id)) {
        Tensor gp({rows, n});
        std::copy(go.data() + off * n, go.data() + (off + rows) * n, gp.data());
        g.accumulate(p.id, gp);
      }
      off += rows;
    }
  });
}

inline Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  detail::require_matrix(a, "slice_rows");
  const std::size_t n = a.cols();
  if (begin >= end || end > a.rows()) throw IndexError("slice_rows range out of bounds");
  Tensor out({end - begin, n});
  std::copy(a.value().data() + begin * n, a.value().data() + end * n, out.data());
  return a.graph->make(std::move(out), detail::any_grad({a}), [a, begin, end, n](Graph& g, const Tensor& go) {
    Tensor& ga = g.grad_buffer(a.id);
    for (std::size_t i = 0; i < (end - begin) * n; ++i) ga[begin * n + i] += go[i];
  });
}

inline Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  detail::require_matrix(a, "slice_cols");
  const std::size_t m = a.rows(), n = a.cols(), w = end - begin;
  if (begin >= end || end > n) throw IndexError("slice_cols range out of bounds");
  Tensor out({m, w});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < w; ++c) out.at(r, c) = a.value().at(r, begin + c);
  return a.graph->make(std::move(out), detail::any_grad({a}), [a, begin, m, w](Graph& g, const Tensor& go) {
    Tensor& ga = g.grad_buffer(a.id);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < w; ++c) ga.at(r, begin + c) += go.at(r, c);
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  bool rg = false;
  for (const Var& p : parts) {
    detail::require_matrix(p, "concat_cols");
    if (p.rows() != m) throw DimensionError("concat_cols: height mismatch");
    n += p.cols();
    rg = rg || p.graph->requires_grad(p);
  }
  Tensor out({m, n});
  std::size_t off = 0;
  for (const Var& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < w; ++c) out.at(r, off + c) = p.value().at(r, c);
    off += w;
  }
  return parts.front().graph->make(std::move(out), rg, [parts, m](Graph& g, const Tensor& go) {
    std::size_t off = 0;
    for (const Var& p : parts) {
      const std::size_t w = g.value(p).cols();
      if (g.requires_grad(p.id)) {
        Tensor gp({m, w});
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < w; ++c) gp.at(r, c) = go.at(r, off + c);
        g.accumulate(p.id, gp);
      }
      off += w;
    }
  });
}

/// out[i] = table[indices[i]]; backward scatter-adds.
inline Var gather_rows(Var table, std::vector<std::size_t> indices) {
  detail::require_matrix(table, "gather_rows");
  const std::size_t n = table.cols(), vocab = table.rows();
  Tensor out({indices.size(), n});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= vocab) {
      throw IndexError("gather_rows index " + std::to_string(indices[i]) + " >= " + std::to_string(vocab));
    }
    std::copy_n(table.value().data() + indices[i] * n, n, out.data() + i * n);
  }
  return table.graph->make(std::move(out), detail::any_grad({table}),
                           [table, indices = std::move(indices), n](Graph& g, const Tensor& go) {
                             Tensor& gt = g.grad_buffer(table.id);
                             for (std::size_t i = 0; i < indices.size(); ++i)
                               for (std::size_t c = 0; c < n; ++c) gt.at(indices[i], c) += go.at(i, c);
                           });
}

/// Stacks `times` copies of `a` vertically.
inline Var repeat_rows(Var a, std::size_t times) {
  std::vector<Var> parts(times, a);
  return concat_rows(parts);
}

/// Treats `h` as `batch` sequences of `seq` rows and `prefix` as `batch`
/// blocks of `plen` rows; returns each sequence with its prefix block in front.
inline Var prepend_per_sequence(Var h, std::size_t batch, std::size_t seq, Var prefix, std::size_t plen) {
  detail::require_matrix(h, "prepend_per_sequence");
  detail::require_matrix(prefix, "prepend_per_sequence");
  const std::size_t n = h.cols();
  if (h.rows() != batch * seq || prefix.rows() != batch * plen || prefix.cols() != n) {
    throw DimensionError("prepend_per_sequence: " + shape_str(h.shape()) + " with prefix " + shape_str(prefix.shape()));
  }
  const std::size_t out_seq = seq + plen;
  Tensor out({batch * out_seq, n});
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(prefix.value().data() + b * plen * n, plen * n, out.data() + b * out_seq * n);
    std::copy_n(h.value().data() + b * seq * n, seq * n, out.data() + (b * out_seq + plen) * n);
  }
  return h.graph->make(std::move(out), detail::any_grad({h, prefix}),
                       [h, prefix, batch, seq, plen, n, out_seq](Graph& g, const Tensor& go) {
                         if (g.requires_grad(prefix.id)) {
                           Tensor& gp = g.grad_buffer(prefix.id);
                           for (std::size_t b = 0; b < batch; ++b)
                             for (std::size_t i = 0; i < plen * n; ++i) gp[b * plen * n + i] += go[b * out_seq * n + i];
                         }
                         if (g.requires_grad(h.id)) {
                           Tensor& gh = g.grad_buffer(h.id);
                           for (std::size_t b = 0; b < batch; ++b)
                             for (std::size_t i = 0; i < seq * n; ++i)
                               gh[b * seq * n + i] += go[(b * out_seq + plen) * n + i];
                         }
                       });
}

/// Multi-head scaled dot-product attention over `batch` independent sequences
/// of length `seq`, fused into one node. q, k, v are [batch*seq x D]; head h
/// uses columns [h*D/heads, (h+1)*D/heads). No masking.
inline Var multihead_attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t heads) {
  detail::require_same(q, k, "multihead_attention");
  detail::require_same(q, v, "multihead_attention");
  const std::size_t d = q.cols();
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention heads (" + std::to_string(heads) + ") must divide width " + std::to_string(d));
  }
  if (q.rows() != batch * seq) throw DimensionError("multihead_attention: rows != batch*seq");
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  Tensor probs({batch * heads * seq, seq});
  Tensor out({batch * seq, d});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t co = h * dh;
      for (std::size_t i = 0; i < seq; ++i) {
        double* prow = probs.data() + ((b * heads + h) * seq + i) * seq;
        const double* qi = qv.data() + (b * seq + i) * d + co;
        for (std::size_t j = 0; j < seq; ++j) {
          const double* kj = kv.data() + (b * seq + j) * d + co;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          prow[j] = s * sc;
        }
        kernels::softmax_inplace(prow, seq);
        double* oi = out.data() + (b * seq + i) * d + co;
        for (std::size_t j = 0; j < seq; ++j) {
          const double* vj = vv.data() + (b * seq + j) * d + co;
          const double p = prow[j];
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p * vj[c];
        }
      }
    }
  return q.graph->make(
      std::move(out), detail::any_grad({q, k, v}),
      [q, k, v, probs, batch, seq, heads, d, dh, sc](Graph& g, const Tensor& go) {
        const Tensor& qv = g.value(q);
        const Tensor& kv = g.value(k);
        const Tensor& vv = g.value(v);
        Tensor gq({batch * seq, d}), gk({batch * seq, d}), gv({batch * seq, d});
        std::vector<double> dp(seq);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t co = h * dh;
            for (std::size_t i = 0; i < seq; ++i) {
              const double* prow = probs.data() + ((b * heads + h) * seq + i) * seq;
              const double* goi = go.data() + (b * seq + i) * d + co;
              double dot_pd = 0.0;
              for (std::size_t j = 0; j < seq; ++j) {
                const double* vj = vv.data() + (b * seq + j) * d + co;
                double* gvj = gv.data() + (b * seq + j) * d + co;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) {
                  s += goi[c] * vj[c];
                  gvj[c] += prow[j] * goi[c];
                }
                dp[j] = s;
                dot_pd += s * prow[j];
              }
              const double* qi = qv.data() + (b * seq + i) * d + co;
              double* gqi = gq.data() + (b * seq + i) * d + co;
              for (std::size_t j = 0; j < seq; ++j) {
                const double ds = prow[j] * (dp[j] - dot_pd) * sc;
                const double* kj = kv.data() + (b * seq + j) * d + co;
                double* gkj = gk.data() + (b * seq + j) * d + co;
                for (std::size_t c = 0; c < dh; ++c) {
                  gqi[c] += ds * kj[c];
                  gkj[c] += ds * qi[c];
                }
              }
            }
          }
        g.accumulate(q.id, gq);
        g.accumulate(k.id, gk);
        g.accumulate(v.id, gv);
      });
}

// ---- losses -------------------------------------------------------------------

/// Mean negative log-softmax probability of the labelled class.
inline Var cross_entropy(Var logits, const std::vector<std::size_t>& labels) {
  detail::require_matrix(logits, "cross_entropy");
  const std::size_t b = logits.rows(), c = logits.cols();
  if (labels.size() != b) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(b) + " rows");
  }
  for (std::size_t y : labels)
    if (y >= c) throw IndexError("label " + std::to_string(y) + " out of range for " + std::to_string(c) + " classes");
  Tensor probs = pcmp::softmax_rows(logits.value());
  double loss = 0.0;
  for (std::size_t r = 0; r < b; ++r) {
    const auto row = logits.value().row(r);
    double mx = row[0];
    for (double v : row) mx = v > mx ? v : mx;
    double s = 0.0;
    for (double v : row) s += std::exp(v - mx);
    loss += (mx + std::log(s)) - row[labels[r]];
  }
  loss /= static_cast<double>(b);
  return logits.graph->make(Tensor({1}, loss), detail::any_grad({logits}),
                            [logits, probs, labels, b, c](Graph& g, const Tensor& go) {
                              Tensor gl = probs;
                              for (std::size_t r = 0; r < b; ++r) gl.at(r, labels[r]) -= 1.0;
                              const double s = go[0] / static_cast<double>(b);
                              for (double& v : gl.values()) v *= s;
                              (void)c;
                              g.accumulate(logits.id, gl);
                            });
}

// ---- gradient verification ----------------------------------------------------

/// Builds a scalar loss from bound parameters.
using Objective = std::function<Var(Binder&)>;

inline double evaluate(const Objective& objective, const ParamSet& params) {
  Graph g;
  Binder bind(g, params);
  Var out = objective(bind);
  if (out.value().size() != 1) throw ContractError("objective is not scalar: " + shape_str(out.shape()));
  return out.value()[0];
}

inline TensorMap analytic_gradients(const Objective& objective, const ParamSet& params) {
  Graph g;
  Binder bind(g, params);
  Var out = objective(bind);
  g.backward(out);
  return bind.gradients();
}

/// Smallest gradient scale used as the relative-error denominator.
inline constexpr double kGradScaleFloor = 1e-3;

struct GradCheckReport {
  std::string param;
  std::size_t elements = 0;
  double max_abs_error = 0.0;
  /// max_i |analytic_i - numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|, kGradScaleFloor)
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

/// Compares a supplied analytic gradient for `name` with central differences of step `h`.
inline GradCheckReport compare_gradient(const Tensor& analytic, const Objective& objective, ParamSet params,
                                        const std::string& name, double h, double tolerance) {
  Tensor& theta = params.at(name);
  if (analytic.shape() != theta.shape()) throw DimensionError("analytic gradient shape mismatch for " + name);
  GradCheckReport rep;
  rep.param = name;
  rep.elements = theta.size();
  rep.tolerance = tolerance;
  double scale = 0.0;
  std::vector<double> numeric(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double orig = theta[i];
    theta[i] = orig + h;
    const double fp = evaluate(objective, params);
    theta[i] = orig - h;
    const double fm = evaluate(objective, params);
    theta[i] = orig;
    numeric[i] = (fp - fm) / (2.0 * h);
    scale = std::max({scale, std::abs(numeric[i]), std::abs(analytic[i])});
  }
  for (std::size_t i = 0; i < theta.size(); ++i)
    rep.max_abs_error = std::max(rep.max_abs_error, std::abs(analytic[i] - numeric[i]));
  rep.max_rel_error = rep.max_abs_error / std::max(scale, kGradScaleFloor);
  rep.passed = std::isfinite(rep.max_rel_error) && rep.max_rel_error < tolerance;
  return rep;
}

inline GradCheckReport finite_diff_check(const Objective& objective, const ParamSet& params, const std::string& name,
                                         double tolerance = 1e-6, double h = 1e-5) {
  if (!params.trainable(name)) throw ConfigError("parameter '" + name + "' is not trainable");
  const TensorMap grads = analytic_gradients(objective, params);
  auto it = grads.find(name);
  const Tensor analytic = it != grads.end() ? it->second : Tensor(params.at(name).shape());
  return compare_gradient(analytic, objective, params, name, h, tolerance);
}

}  // namespace pcmp::ad
