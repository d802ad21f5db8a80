#pragma once

// Dense row-major tensors and a define-by-run graph with reverse-mode
// gradients. Every differentiable operation is a free function over Var
// handles; a Graph is rebuilt for every forward pass.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#include "vekit/errors.hpp"

namespace vekit {

#ifdef VEKIT_SINGLE_PRECISION
using real = float;
#else
using real = double;
#endif

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

struct Tensor {
  Shape shape;
  std::vector<real> data;
  bool requires_grad = false;
  std::optional<std::vector<real>> grad;

  Tensor() = default;

  Tensor(Shape s, std::vector<real> values, bool needs_grad = false)
      : shape(std::move(s)), data(std::move(values)), requires_grad(needs_grad) {
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("shape " + shape_str(shape) + " does not match " +
                           std::to_string(data.size()) + " values");
    }
  }

  static Tensor zeros(Shape s, bool needs_grad = false) {
    const auto n = shape_numel(s);
    return Tensor(std::move(s), std::vector<real>(n, real(0)), needs_grad);
  }

  static Tensor filled(Shape s, real value) {
    const auto n = shape_numel(s);
    return Tensor(std::move(s), std::vector<real>(n, value));
  }

  static Tensor scalar(real value) { return Tensor({1, 1}, {value}); }

  static Tensor matrix(std::initializer_list<std::initializer_list<real>> rows) {
    if (rows.size() == 0 || rows.begin()->size() == 0) throw DimensionError("empty matrix literal");
    const std::size_t n = rows.begin()->size();
    std::vector<real> values;
    values.reserve(rows.size() * n);
    for (const auto& row : rows) {
      if (row.size() != n) throw DimensionError("ragged matrix literal");
      values.insert(values.end(), row.begin(), row.end());
    }
    return Tensor({rows.size(), n}, std::move(values));
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }

  std::size_t rows() const {
    require_matrix();
    return shape[0];
  }
  std::size_t cols() const {
    require_matrix();
    return shape[1];
  }

  real& operator()(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  real operator()(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

  real item() const {
    if (data.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape));
    return data[0];
  }

  std::vector<real>& ensure_grad() {
    if (!grad) grad.emplace(data.size(), real(0));
    return *grad;
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), real(0));
  }

 private:
  void require_matrix() const {
    if (shape.size() != 2) throw DimensionError("expected a matrix, got shape " + shape_str(shape));
  }
};

enum class OpKind {
  leaf,
  constant,
  matmul,
  add,
  sub,
  mul,
  scale,
  add_scalar,
  tanh,
  sigmoid,
  relu,
  softmax_rows,
  transpose,
  add_bias,
  concat_cols,
  concat_rows,
  repeat_rows,
  slice_row,
  sum,
  sum_rows,
  gather_rows,
  cross_entropy,
};

class Graph;

/// Handle to one node of a Graph.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  struct Node {
    OpKind kind = OpKind::constant;
    std::vector<std::size_t> inputs;
    Tensor owned;
    const Tensor* bound = nullptr;
    Tensor* sink = nullptr;
    bool needs_grad = false;
    std::vector<real> grad;
    BackwardFn backward;

    const Tensor& value() const { return bound ? *bound : owned; }
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Binds a tensor by reference. If it requires grad, backward() adds the
  /// gradient into t.grad. Binding the same tensor twice yields the same node.
  Var variable(Tensor& t) {
    if (auto it = bindings_.find(&t); it != bindings_.end()) return {this, it->second};
    Node n;
    n.kind = OpKind::leaf;
    n.bound = &t;
    n.needs_grad = t.requires_grad;
    n.sink = t.requires_grad ? &t : nullptr;
    return push_leaf(std::move(n), &t);
  }

  /// Binds a tensor read-only. Gradients stay inside the graph and are
  /// retrieved with grad_of(); the tensor itself is never written.
  Var param(const Tensor& t) {
    if (auto it = bindings_.find(&t); it != bindings_.end()) return {this, it->second};
    Node n;
    n.kind = OpKind::leaf;
    n.bound = &t;
    n.needs_grad = t.requires_grad && grad_enabled_;
    return push_leaf(std::move(n), &t);
  }

  Var constant(Tensor t) {
    Node n;
    n.kind = OpKind::constant;
    n.owned = std::move(t);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  /// Appends an operation node. Inputs must already belong to this graph.
  Var record(OpKind kind, std::initializer_list<Var> inputs, Tensor value, BackwardFn backward) {
    return record(kind, std::vector<Var>(inputs), std::move(value), std::move(backward));
  }

  Var record(OpKind kind, const std::vector<Var>& inputs, Tensor value, BackwardFn backward) {
    Node n;
    n.kind = kind;
    n.owned = std::move(value);
    n.inputs.reserve(inputs.size());
    for (const auto& v : inputs) {
      if (&v.graph() != this) throw ContractError("operand belongs to a different graph");
      n.inputs.push_back(v.id());
      n.needs_grad = n.needs_grad || nodes_[v.id()].needs_grad;
    }
    if (n.needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  /// With gradients disabled, param() bindings never require grad, so no
  /// backward closures are stored. Used for evaluation.
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  const Tensor& value(std::size_t id) const { return nodes_[id].value(); }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  /// Upstream gradient of a node during backward; empty if none arrived.
  std::span<const real> grad(std::size_t id) const { return nodes_[id].grad; }

  /// Mutable gradient accumulator of a node, zero-initialized on first use.
  std::span<real> grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value().numel(), real(0));
    return n.grad;
  }

  /// Reverse pass from a scalar loss. Node-level gradients are recomputed on
  /// every call; gradients written into bound tensors accumulate across calls.
  void backward(Var loss) {
    if (&loss.graph() != this) throw ContractError("loss belongs to a different graph");
    if (loss.value().numel() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    for (auto& n : nodes_) n.grad.clear();
    grad_buffer(loss.id())[0] = real(1);
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      auto& n = nodes_[id];
      if (n.grad.empty() || !n.needs_grad || !n.backward) continue;
      n.backward(*this, id);
    }
    for (auto& n : nodes_) {
      if (!n.sink) continue;
      auto& dst = n.sink->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) dst[i] += n.grad[i];
    }
  }

  /// Gradient of the most recent backward() with respect to a bound tensor.
  /// Zeros if the tensor was bound but unreachable; nullopt if never bound.
  std::optional<std::vector<real>> grad_of(const Tensor& t) const {
    auto it = bindings_.find(&t);
    if (it == bindings_.end()) return std::nullopt;
    const auto& n = nodes_[it->second];
    if (n.grad.empty()) return std::vector<real>(t.numel(), real(0));
    return n.grad;
  }

 private:
  Var push_leaf(Node n, const Tensor* key) {
    nodes_.push_back(std::move(n));
    bindings_.emplace(key, nodes_.size() - 1);
    return {this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;  // deque: value() references survive later nodes
  std::unordered_map<const Tensor*, std::size_t> bindings_;
  bool grad_enabled_ = true;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }

namespace detail {

inline void require_same_graph(const Var& a, const Var& b) {
  if (&a.graph() != &b.graph()) throw ContractError("operands belong to different graphs");
}

inline void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// C (m x n) (+)= A (m x k) * B (k x n)
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const real* a, const real* b, real* c) {
  for (std::size_t i = 0; i < m; ++i) {
    real* crow = c + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const real av = a[i * k + t];
      if (av == real(0)) continue;
      const real* brow = b + t * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C (m x k) += A (m x n) * B^T, B is (k x n)
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const real* a, const real* b, real* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const real* arow = a + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const real* brow = b + t * n;
      real acc = 0;
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      c[i * k + t] += acc;
    }
  }
}

// C (k x n) += A^T * B, A is (m x k), B is (m x n)
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const real* a, const real* b, real* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const real* brow = b + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const real av = a[i * k + t];
      if (av == real(0)) continue;
      real* crow = c + t * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename Fwd, typename Deriv>
Var unary(OpKind kind, Var a, Fwd fwd, Deriv deriv) {
  Tensor out = a.value();
  out.requires_grad = false;
  out.grad.reset();
  for (auto& x : out.data) x = fwd(x);
  const auto ia = a.id();
  return a.graph().record(kind, {a}, std::move(out), [ia, deriv](Graph& g, std::size_t self) {
    auto gout = g.grad(self);
    const auto& x = g.value(ia).data;
    const auto& y = g.value(self).data;
    auto gin = g.grad_buffer(ia);
    for (std::size_t i = 0; i < gin.size(); ++i) gin[i] += gout[i] * deriv(x[i], y[i]);
  });
}

inline real stable_sigmoid(real x) {
  if (x >= 0) return real(1) / (real(1) + std::exp(-x));
  const real e = std::exp(x);
  return e / (real(1) + e);
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  detail::require_same_graph(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
    throw DimensionError("matmul: cannot multiply " + shape_str(av.shape) + " by " + shape_str(bv.shape));
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor out = Tensor::zeros({m, n});
  detail::gemm_nn(m, k, n, av.data.data(), bv.data.data(), out.data.data());
  const auto ia = a.id(), ib = b.id();
  return a.graph().record(OpKind::matmul, {a, b}, std::move(out), [ia, ib, m, k, n](Graph& g, std::size_t self) {
    auto gout = g.grad(self);
    if (g.needs_grad(ia)) {
      detail::gemm_nt(m, n, k, gout.data(), g.value(ib).data.data(), g.grad_buffer(ia).data());
    }
    if (g.needs_grad(ib)) {
      detail::gemm_tn(m, k, n, g.value(ia).data.data(), gout.data(), g.grad_buffer(ib).data());
    }
  });
}

inline Var add(Var a, Var b) {
  detail::require_same_graph(a, b);
  detail::require_same_shape("add", a, b);
  Tensor out = Tensor::zeros(a.shape());
  const auto& x = a.value().data;
  const auto& y = b.value().data;
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x[i] + y[i];
  const auto ia = a.id(), ib = b.id();
  return a.graph().record(OpKind::add, {a, b}, std::move(out), [ia, ib](Graph& g, std::size_t self) {
    auto gout = g.grad(self);
    for (auto id : {ia, ib}) {
      if (!g.needs_grad(id)) continue;
      auto gin = g.grad_buffer(id);
      for (std::size_t i = 0; i < gin.size(); ++i) gin[i] += gout[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_graph(a, b);
  detail::require_same_shape("sub", a, b);
  Tensor out = Tensor::zeros(a.shape());
  const auto& x = a.value().data;
  const auto& y = b.value().data;
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x[i] - y[i];
  const auto ia = a.id(), ib = b.id();
  return a.graph().record(OpKind::sub, {a, b}, std::move(out), [ia, ib](Graph& g, std::size_t self) {
    auto gout = g.grad(self);
    if (g.needs_grad(ia)) {
      auto gin = g.grad_buffer(ia);
      for (std::size_t i = 0; i < gin.size(); ++i) gin[i] += gout[i];
    }
    if (g.needs_grad(ib)) {
      auto gin = g.grad_buffer(ib);
      for (std::size_t i = 0; i < gin.size(); ++i) gin[i] -= gout[i];
    }
  });
}

/// Elementwise (Hadamard) product.
inline Var mul(Var a, Var b) {
  detail::require_same_graph(a, b);
  detail::require_same_shape("mul", a, b);
  Tensor out = Tensor::zeros(a.shape());
  const auto& x = a.value().data;
  const auto& y = b.value().data;
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x[i] * y[i];
  const auto ia = a.id(), ib = b.id();
  return a.graph().record(OpKind::mul, {a, b}, std::move(out), [ia, ib](Graph& g, std::size_t self) {
    auto gout = g.grad(self);
    const auto& x = g.value(ia).data;
    const auto& y = g.value(ib).data;
    if (g.needs_grad(ia)) {
      auto gin = g.grad_buffer(ia);
      for (std::size_t i = 0; i < gin.size(); ++i) gin[i] += gout[i] * y[i];
    }
    if (g.needs_grad(ib)) {
      auto gin = g.grad_buffer(ib);
      for (std::size_t i = 0; i < gin.size(); ++i) gin[i] += gout[i] * x[i];
    }
  });
}

inline Var scale(Var a, real s) {
  return detail::unary(
      OpKind::scale, a, [s](real x) { return s * x; }, [s](real, real) { return s; });
}

inline Var add_scalar(Var a, real s) {
  return detail::unary(
      OpKind::add_scalar, a, [s](real x) { return x + s; }, [](real, real) { return real(1); });
}

inline Var tanh(Var a) {
  return detail::unary(
      OpKind::tanh, a, [](real x) { return std::tanh(x); }, [](real, real y) { return real(1) - y * y; });
}

inline Var sigmoid(Var a) {
  return detail::unary(
      OpKind::sigmoid, a, [](real x) { return detail::stable_sigmoid(x); },
      [](real, real y) { return y * (real(1) - y); });
}

/// max(x, 0); the derivative at 0 is taken as 0.
inline Var relu(Var a) {
  return detail::unary(
      OpKind::relu, a, [](real x) { return x > real(0) ? x : real(0); },
      [](real x, real) { return x > real(0) ? real(1) : real(0); });
}

/// 1 - a, used by the GRU interpolation.
inline Var one_minus(Var a) { return add_scalar(scale(a, real(-1)), real(1)); }

/// Row-wise softmax with per-row max subtraction. When `valid_cols` is given,
/// columns flagged false receive exactly zero weight (equivalent to a score
/// of -inf) and every row must keep at least one valid column.
inline Var softmax_rows(Var x, const std::vector<bool>& valid_cols = {}) {
  const auto& xv = x.value();
  if (xv.rank() != 2) throw DimensionError("softmax_rows: expected a matrix, got " + shape_str(xv.shape));
  const std::size_t n = xv.rows(), m = xv.cols();
  std::vector<bool> valid(m, true);
  if (!valid_cols.empty()) {
    if (valid_cols.size() != m) {
      throw DimensionError("softmax_rows: mask of length " + std::to_string(valid_cols.size()) + " for " +
                           std::to_string(m) + " columns");
    }
    valid = valid_cols;
    if (std::none_of(valid.begin(), valid.end(), [](bool b) { return b; })) {
      throw DomainError("softmax_rows: every column is masked");
    }
  }
  Tensor out = Tensor::zeros(xv.shape);
  for (std::size_t i = 0; i < n; ++i) {
    real mx = -std::numeric_limits<real>::infinity();
    for (std::size_t j = 0; j < m; ++j) {
      if (valid[j]) mx = std::max(mx, xv(i, j));
    }
    real total = 0;
    for (std::size_t j = 0; j < m; ++j) {
      if (!valid[j]) continue;
      out(i, j) = std::exp(xv(i, j) - mx);
      total += out(i, j);
    }
    for (std::size_t j = 0; j < m; ++j) out(i, j) /= total;
  }
  const auto ix = x.id();
  return x.graph().record(OpKind::softmax_rows, {x}, std::move(out), [ix, n, m](Graph& g, std::size_t self) {
    auto gout = g.grad(self);
    const auto& y = g.value(self).data;
    auto gin = g.grad_buffer(ix);
    for (std::size_t i = 0; i < n; ++i) {
      real dot = 0;
      for (std::size_t j = 0; j < m; ++j) dot += gout[i * m + j] * y[i * m + j];
      for (std::size_t j = 0; j < m; ++j) gin[i * m + j] += (gout[i * m + j] - dot) * y[i * m + j];
    }
  });
}

inline Var transpose(Var a) {
  const auto& av = a.value();
  const std::size_t r = av.rows(), c = av.cols();
  Tensor out = Tensor::zeros({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(j, i) = av(i, j);
  const auto ia = a.id();
  return a.graph().record(OpKind::transpose, {a}, std::move(out), [ia, r, c](Graph& g, std::size_t self) {
    auto gout = g.grad(self);
    auto gin = g.grad_buffer(ia);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gin[i * c + j] += gout[j * r + i];
  });
}

/// X (m x n) + b (1 x n) added to every row. An explicit op, not broadcasting.
inline Var add_bias(Var x, Var b) {
  detail::require_same_graph(x, b);
  const auto& xv = x.value();
  const auto& bv = b.value();
  if (xv.rank() != 2 || bv.rank() != 2 || bv.rows() != 1 || bv.cols() != xv.cols()) {
    throw DimensionError("add_bias: cannot add bias " + shape_str(bv.shape) + " to " + shape_str(xv.shape));
  }
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor out = xv;
  out.requires_grad = false;
  out.grad.reset();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) += bv.data[j];
  const auto ix = x.id(), ib = b.id();
  return x.graph().record(OpKind::add_bias, {x, b}, std::move(out), [ix, ib, m, n](Graph& g, std::size_t self) {
    auto gout = g.grad(self);
    if (g.needs_grad(ix)) {
      auto gin = g.grad_buffer(ix);
      for (std::size_t i = 0; i < gin.size(); ++i) gin[i] += gout[i];
    }
    if (g.needs_grad(ib)) {
      auto gb = g.grad_buffer(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += gout[i * n + j];
    }
  });
}

/// Horizontal concatenation; all parts share the row count.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no operands");
  const std::size_t m = parts[0].rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_same_graph(parts[0], p);
    if (p.rows() != m) {
      throw DimensionError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    total += p.cols();
  }
  Tensor out = Tensor::zeros({m, total});
  std::vector<std::size_t> ids, offsets, widths;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& pv = p.value();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < pv.cols(); ++j) out(i, off + j) = pv(i, j);
    ids.push_back(p.id());
    offsets.push_back(off);
    widths.push_back(pv.cols());
    off += pv.cols();
  }
  return parts[0].graph().record(
      OpKind::concat_cols, parts, std::move(out), [ids, offsets, widths, m, total](Graph& g, std::size_t self) {
        auto gout = g.grad(self);
        for (std::size_t p = 0; p < ids.size(); ++p) {
          if (!g.needs_grad(ids[p])) continue;
          auto gin = g.grad_buffer(ids[p]);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < widths[p]; ++j) gin[i * widths[p] + j] += gout[i * total + offsets[p] + j];
        }
      });
}

/// Vertical concatenation; all parts share the column count.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no operands");
  const std::size_t n = parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_same_graph(parts[0], p);
    if (p.cols() != n) {
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    total += p.rows();
  }
  std::vector<real> values;
  values.reserve(total * n);
  std::vector<std::size_t> ids, offsets;
  for (const auto& p : parts) {
    offsets.push_back(values.size());
    ids.push_back(p.id());
    values.insert(values.end(), p.value().data.begin(), p.value().data.end());
  }
  return parts[0].graph().record(OpKind::concat_rows, parts, Tensor({total, n}, std::move(values)),
                                 [ids, offsets](Graph& g, std::size_t self) {
                                   auto gout = g.grad(self);
                                   for (std::size_t p = 0; p < ids.size(); ++p) {
                                     if (!g.needs_grad(ids[p])) continue;
                                     auto gin = g.grad_buffer(ids[p]);
                                     for (std::size_t i = 0; i < gin.size(); ++i) gin[i] += gout[offsets[p] + i];
                                   }
                                 });
}

/// Stacks `times` copies of a single row.
inline Var repeat_rows(Var row, std::size_t times) {
  const auto& rv = row.value();
  if (rv.rank() != 2 || rv.rows() != 1) throw DimensionError("repeat_rows: expected 1 x n, got " + shape_str(rv.shape));
  if (times == 0) throw ContractError("repeat_rows: times must be positive");
  const std::size_t n = rv.cols();
  std::vector<real> values;
  values.reserve(times * n);
  for (std::size_t i = 0; i < times; ++i) values.insert(values.end(), rv.data.begin(), rv.data.end());
  const auto ir = row.id();
  return row.graph().record(OpKind::repeat_rows, {row}, Tensor({times, n}, std::move(values)),
                            [ir, times, n](Graph& g, std::size_t self) {
                              auto gout = g.grad(self);
                              auto gin = g.grad_buffer(ir);
                              for (std::size_t i = 0; i < times; ++i)
                                for (std::size_t j = 0; j < n; ++j) gin[j] += gout[i * n + j];
                            });
}

inline Var slice_row(Var x, std::size_t index) {
  const auto& xv = x.value();
  if (index >= xv.rows()) {
    throw DimensionError("slice_row: row " + std::to_string(index) + " of " + shape_str(xv.shape));
  }
  const std::size_t n = xv.cols();
  std::vector<real> values(xv.data.begin() + index * n, xv.data.begin() + (index + 1) * n);
  const auto ix = x.id();
  return x.graph().record(OpKind::slice_row, {x}, Tensor({1, n}, std::move(values)),
                          [ix, index, n](Graph& g, std::size_t self) {
                            auto gout = g.grad(self);
                            auto gin = g.grad_buffer(ix);
                            for (std::size_t j = 0; j < n; ++j) gin[index * n + j] += gout[j];
                          });
}

/// Sum of all entries as a 1 x 1 tensor.
inline Var sum(Var x) {
  real total = 0;
  for (auto v : x.value().data) total += v;
  const auto ix = x.id();
  return x.graph().record(OpKind::sum, {x}, Tensor::scalar(total), [ix](Graph& g, std::size_t self) {
    const real go = g.grad(self)[0];
    for (auto& v : g.grad_buffer(ix)) v += go;
  });
}

/// Column sums: (m x n) -> (1 x n).
inline Var sum_rows(Var x) {
  const auto& xv = x.value();
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor out = Tensor::zeros({1, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[j] += xv(i, j);
  const auto ix = x.id();
  return x.graph().record(OpKind::sum_rows, {x}, std::move(out), [ix, m, n](Graph& g, std::size_t self) {
    auto gout = g.grad(self);
    auto gin = g.grad_buffer(ix);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gin[i * n + j] += gout[j];
  });
}

/// Rows of `table` selected by index, in order; gradients scatter-add back.
inline Var gather_rows(Var table, std::span<const std::int32_t> indices) {
  const auto& tv = table.value();
  if (indices.empty()) throw ContractError("gather_rows: no indices");
  const std::size_t n = tv.cols();
  std::vector<real> values;
  values.reserve(indices.size() * n);
  for (auto idx : indices) {
    if (idx < 0 || static_cast<std::size_t>(idx) >= tv.rows()) {
      throw DimensionError("gather_rows: index " + std::to_string(idx) + " out of range for " + shape_str(tv.shape));
    }
    values.insert(values.end(), tv.data.begin() + idx * n, tv.data.begin() + (idx + 1) * n);
  }
  std::vector<std::int32_t> idx(indices.begin(), indices.end());
  const auto it = table.id();
  Tensor out({idx.size(), n}, std::move(values));
  return table.graph().record(OpKind::gather_rows, {table}, std::move(out),
                              [it, idx = std::move(idx), n](Graph& g, std::size_t self) {
                                auto gout = g.grad(self);
                                auto gin = g.grad_buffer(it);
                                for (std::size_t r = 0; r < idx.size(); ++r)
                                  for (std::size_t j = 0; j < n; ++j) gin[idx[r] * n + j] += gout[r * n + j];
                              });
}

enum class ElementwiseKind { add, mul, tanh, sigmoid, relu, scale };

/// Second operand of elementwise(): none for unary kinds, a tensor for
/// add/mul, a scalar for scale (or for add, meaning tensor + scalar).
using Operand = std::variant<std::monostate, Var, real>;

inline Var elementwise(ElementwiseKind kind, Var a, Operand b = {}) {
  auto need_var = [&](const char* name) -> Var {
    if (auto* v = std::get_if<Var>(&b)) return *v;
    throw ContractError(std::string("elementwise ") + name + " requires a tensor operand");
  };
  switch (kind) {
    case ElementwiseKind::add:
      if (auto* s = std::get_if<real>(&b)) return add_scalar(a, *s);
      return add(a, need_var("add"));
    case ElementwiseKind::mul:
      if (auto* s = std::get_if<real>(&b)) return scale(a, *s);
      return mul(a, need_var("mul"));
    case ElementwiseKind::scale:
      if (auto* s = std::get_if<real>(&b)) return scale(a, *s);
      throw ContractError("elementwise scale requires a scalar operand");
    case ElementwiseKind::tanh:
      return tanh(a);
    case ElementwiseKind::sigmoid:
      return sigmoid(a);
    case ElementwiseKind::relu:
      return relu(a);
  }
  throw ContractError("unknown elementwise kind");
}

struct GradCheckReport {
  real max_rel_error = 0;
  std::size_t coordinates = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  real worst_analytic = 0;
  real worst_numeric = 0;
};

/// Builds a fresh graph from the current parameter values and returns the
/// scalar loss. Parameters must be bound with Graph::param or Graph::variable.
using LossBuilder = std::function<Var(Graph&)>;

/// Compares backward() against central differences for every coordinate of
/// every parameter. Relative error uses max(|a|, |b|, 1e-8) as denominator.
inline GradCheckReport finite_diff_check(const LossBuilder& f, std::span<Tensor* const> params, real eps = real(1e-5)) {
  if (!(eps > real(0))) throw ContractError("finite_diff_check: eps must be positive");

  auto eval = [&]() {
    Graph g;
    return f(g).value().item();
  };

  std::vector<std::vector<real>> analytic;
  real base = 0;
  {
    Graph g;
    Var loss = f(g);
    base = loss.value().item();
    g.backward(loss);
    for (const Tensor* p : params) {
      auto gp = g.grad_of(*p);
      analytic.push_back(gp ? *gp : std::vector<real>(p->numel(), real(0)));
    }
  }
  if (eval() != base) throw ContractError("finite_diff_check: loss is not deterministic");

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = *params[pi];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const real orig = p.data[i];
      p.data[i] = orig + eps;
      const real up = eval();
      p.data[i] = orig - eps;
      const real down = eval();
      p.data[i] = orig;
      const real numeric = (up - down) / (real(2) * eps);
      const real a = analytic[pi][i];
      const real denom = std::max({std::abs(a), std::abs(numeric), real(1e-8)});
      const real rel = std::abs(a - numeric) / denom;
      ++report.coordinates;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = pi;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace vekit
