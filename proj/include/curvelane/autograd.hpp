#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// tensors. Each op computes its value eagerly and, when any input requires a
// gradient, records a closure that pushes the output gradient back into its
// inputs. `backward(loss)` runs those closures in reverse topological order.

#include <Eigen/Dense>

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace curvelane::ag {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + ")";
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

template <class S>
struct Node {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  S* grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
    return grad.data();
  }
  bool has_grad() const { return grad.size() == value.size() && !value.empty(); }
};

template <class S>
class Tensor {
 public:
  using NodePtr = std::shared_ptr<Node<S>>;

  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor constant(Shape shape, std::vector<S> values) {
    if (numel(shape) != values.size()) {
      throw ShapeError("constant: shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                       " values");
    }
    auto n = std::make_shared<Node<S>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape) {
    const auto n = numel(shape);
    return constant(std::move(shape), std::vector<S>(n, S(0)));
  }

  static Tensor full(Shape shape, S v) {
    const auto n = numel(shape);
    return constant(std::move(shape), std::vector<S>(n, v));
  }

  /// Leaf that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<S> values) {
    Tensor t = constant(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i < 0 ? i + rank() : i)); }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  const std::vector<S>& values() const { return node_->value; }
  std::vector<S>& mutable_values() { return node_->value; }
  const S* data() const { return node_->value.data(); }
  S operator[](std::size_t i) const { return node_->value[i]; }
  S item() const {
    if (size() != 1) throw ShapeError("item: tensor has " + std::to_string(size()) + " elements");
    return node_->value[0];
  }

  const std::vector<S>& grad() const { return node_->grad; }
  bool has_grad() const { return node_->has_grad(); }
  void zero_grad() { node_->grad.clear(); }

  /// Same values, cut from the graph.
  Tensor detach() const { return constant(node_->shape, node_->value); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

template <class S>
Tensor<S> make_result(Shape shape, std::vector<S> value, std::vector<Tensor<S>> inputs,
                      std::function<void(Node<S>&)> backward) {
  auto n = std::make_shared<Node<S>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& t : inputs) any = any || (t.defined() && t.requires_grad());
    if (any) {
      n->requires_grad = true;
      for (auto& t : inputs) n->parents.push_back(t.node());
      n->backward_fn = std::move(backward);
    }
  }
  return Tensor<S>(std::move(n));
}

template <class S>
S* grad_of(Node<S>& self, std::size_t parent) {
  auto& p = self.parents[parent];
  return p && p->requires_grad ? p->grad_buffer() : nullptr;
}

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapMat = Eigen::Map<RowMat<S>>;
template <class S>
using CMapMat = Eigen::Map<const RowMat<S>>;

inline void check_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

inline void check_rank(const Shape& a, std::size_t r, const char* op) {
  if (a.size() != r) throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(a));
}

}  // namespace detail

/// Reverse pass from a scalar. Gradients accumulate into every leaf that
/// requires them.
template <class S>
void backward(const Tensor<S>& root) {
  if (root.size() != 1) throw ShapeError("backward: root must be a scalar");
  if (!root.requires_grad()) return;
  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> seen;
  std::vector<std::pair<Node<S>*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<S>* p = n->parents[i++].get();
      if (p && p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node()->grad_buffer()[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* n = *it;
    if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
  }
  // Release intermediate graph state; leaves keep their gradients.
  for (Node<S>* n : order) {
    if (n->backward_fn) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same(a.shape(), b.shape(), "add");
  std::vector<S> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
  return detail::make_result<S>(a.shape(), std::move(v), {a, b}, [](Node<S>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (S* g = detail::grad_of(self, p)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same(a.shape(), b.shape(), "sub");
  std::vector<S> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] - b[i];
  return detail::make_result<S>(a.shape(), std::move(v), {a, b}, [](Node<S>& self) {
    if (S* g = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (S* g = detail::grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same(a.shape(), b.shape(), "mul");
  std::vector<S> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * b[i];
  return detail::make_result<S>(a.shape(), std::move(v), {a, b}, [](Node<S>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (S* g = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (S* g = detail::grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

/// Elementwise map with a pointwise derivative expressed through the input
/// value `x` and output value `y`.
template <class S, class F, class DF>
Tensor<S> unary(const Tensor<S>& a, F f, DF df) {
  std::vector<S> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(a[i]);
  return detail::make_result<S>(a.shape(), std::move(v), {a}, [df](Node<S>& self) {
    if (S* g = detail::grad_of(self, 0)) {
      const auto& x = self.parents[0]->value;
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * df(x[i], self.value[i]);
    }
  });
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  return unary(a, [c](S x) { return c * x; }, [c](S, S) { return c; });
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  return unary(a, [c](S x) { return x + c; }, [](S, S) { return S(1); });
}

template <class S>
Tensor<S> relu(const Tensor<S>& a) {
  return unary(a, [](S x) { return x > S(0) ? x : S(0); }, [](S x, S) { return x > S(0) ? S(1) : S(0); });
}

template <class S>
S sigmoid_value(S x) {
  return x >= S(0) ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
}

template <class S>
S softplus_value(S x) {
  return x > S(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  return unary(a, [](S x) { return sigmoid_value(x); }, [](S, S y) { return y * (S(1) - y); });
}

/// log(x / (1 - x)); callers clamp x away from 0 and 1 first.
template <class S>
Tensor<S> logit(const Tensor<S>& a) {
  return unary(a, [](S x) { return std::log(x / (S(1) - x)); }, [](S x, S) { return S(1) / (x * (S(1) - x)); });
}

/// softplus(beta * x) / beta
template <class S>
Tensor<S> softplus(const Tensor<S>& a, S beta = S(1)) {
  return unary(a, [beta](S x) { return softplus_value(beta * x) / beta; },
               [beta](S x, S) { return sigmoid_value(beta * x); });
}

template <class S>
Tensor<S> abs(const Tensor<S>& a) {
  return unary(a, [](S x) { return std::abs(x); },
               [](S x, S) { return x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0)); });
}

/// Clamp with pass-through gradient inside [lo, hi] and zero outside.
template <class S>
Tensor<S> clamp(const Tensor<S>& a, S lo, S hi) {
  return unary(a, [lo, hi](S x) { return std::clamp(x, lo, hi); },
               [lo, hi](S x, S) { return (x >= lo && x <= hi) ? S(1) : S(0); });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (numel(shape) != a.size()) throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  return detail::make_result<S>(std::move(shape), a.values(), {a}, [](Node<S>& self) {
    if (S* g = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

/// Column-wise concatenation of 2-D tensors with equal row counts.
template <class S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const int rows = parts[0].dim(0);
  int cols = 0;
  for (const auto& p : parts) {
    detail::check_rank(p.shape(), 2, "concat_cols");
    if (p.dim(0) != rows) throw ShapeError("concat_cols: row count mismatch");
    cols += p.dim(1);
  }
  std::vector<S> v(static_cast<std::size_t>(rows) * cols);
  std::vector<int> offsets;
  int off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const int pc = p.dim(1);
    for (int r = 0; r < rows; ++r) {
      std::copy_n(p.data() + static_cast<std::size_t>(r) * pc, pc, v.data() + static_cast<std::size_t>(r) * cols + off);
    }
    off += pc;
  }
  return detail::make_result<S>({rows, cols}, std::move(v), parts, [rows, cols, offsets](Node<S>& self) {
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      S* g = detail::grad_of(self, p);
      if (!g) continue;
      const int pc = self.parents[p]->shape[1];
      for (int r = 0; r < rows; ++r) {
        const S* src = self.grad.data() + static_cast<std::size_t>(r) * cols + offsets[p];
        S* dst = g + static_cast<std::size_t>(r) * pc;
        for (int c = 0; c < pc; ++c) dst[c] += src[c];
      }
    }
  });
}

/// Row-wise concatenation of 2-D tensors with equal column counts.
template <class S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const int cols = parts[0].dim(1);
  int rows = 0;
  for (const auto& p : parts) {
    detail::check_rank(p.shape(), 2, "concat_rows");
    if (p.dim(1) != cols) throw ShapeError("concat_rows: column count mismatch");
    rows += p.dim(0);
  }
  std::vector<S> v;
  v.reserve(static_cast<std::size_t>(rows) * cols);
  for (const auto& p : parts) v.insert(v.end(), p.values().begin(), p.values().end());
  return detail::make_result<S>({rows, cols}, std::move(v), parts, [](Node<S>& self) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      const std::size_t n = self.parents[p]->value.size();
      if (S* g = detail::grad_of(self, p)) {
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[off + i];
      }
      off += n;
    }
  });
}

template <class S>
Tensor<S> slice_cols(const Tensor<S>& a, int begin, int count) {
  detail::check_rank(a.shape(), 2, "slice_cols");
  const int rows = a.dim(0), cols = a.dim(1);
  if (begin < 0 || count < 0 || begin + count > cols) throw ShapeError("slice_cols: out of range");
  std::vector<S> v(static_cast<std::size_t>(rows) * count);
  for (int r = 0; r < rows; ++r) {
    std::copy_n(a.data() + static_cast<std::size_t>(r) * cols + begin, count, v.data() + static_cast<std::size_t>(r) * count);
  }
  return detail::make_result<S>({rows, count}, std::move(v), {a}, [rows, cols, begin, count](Node<S>& self) {
    if (S* g = detail::grad_of(self, 0)) {
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < count; ++c) {
          g[static_cast<std::size_t>(r) * cols + begin + c] += self.grad[static_cast<std::size_t>(r) * count + c];
        }
      }
    }
  });
}

/// Selects rows of a 2-D tensor (indices may repeat).
template <class S>
Tensor<S> gather_rows(const Tensor<S>& a, std::vector<int> rows_idx) {
  detail::check_rank(a.shape(), 2, "gather_rows");
  const int cols = a.dim(1);
  std::vector<S> v(rows_idx.size() * static_cast<std::size_t>(cols));
  for (std::size_t i = 0; i < rows_idx.size(); ++i) {
    if (rows_idx[i] < 0 || rows_idx[i] >= a.dim(0)) throw ShapeError("gather_rows: index out of range");
    std::copy_n(a.data() + static_cast<std::size_t>(rows_idx[i]) * cols, cols, v.data() + i * cols);
  }
  const int n = static_cast<int>(rows_idx.size());
  return detail::make_result<S>({n, cols}, std::move(v), {a}, [idx = std::move(rows_idx), cols](Node<S>& self) {
    if (S* g = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < idx.size(); ++i) {
        for (int c = 0; c < cols; ++c) g[static_cast<std::size_t>(idx[i]) * cols + c] += self.grad[i * cols + c];
      }
    }
  });
}

template <class S>
Tensor<S> transpose(const Tensor<S>& a) {
  detail::check_rank(a.shape(), 2, "transpose");
  const int r = a.dim(0), c = a.dim(1);
  std::vector<S> v(a.size());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) v[static_cast<std::size_t>(j) * r + i] = a[static_cast<std::size_t>(i) * c + j];
  return detail::make_result<S>({c, r}, std::move(v), {a}, [r, c](Node<S>& self) {
    if (S* g = detail::grad_of(self, 0)) {
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) g[static_cast<std::size_t>(i) * c + j] += self.grad[static_cast<std::size_t>(j) * r + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// a (n x k) times b (k x m).
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_rank(a.shape(), 2, "matmul");
  detail::check_rank(b.shape(), 2, "matmul");
  const int n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<S> v(static_cast<std::size_t>(n) * m);
  detail::MapMat<S>(v.data(), n, m).noalias() = detail::CMapMat<S>(a.data(), n, k) * detail::CMapMat<S>(b.data(), k, m);
  return detail::make_result<S>({n, m}, std::move(v), {a, b}, [n, k, m](Node<S>& self) {
    detail::CMapMat<S> go(self.grad.data(), n, m);
    if (S* g = detail::grad_of(self, 0)) {
      detail::MapMat<S>(g, n, k).noalias() += go * detail::CMapMat<S>(self.parents[1]->value.data(), k, m).transpose();
    }
    if (S* g = detail::grad_of(self, 1)) {
      detail::MapMat<S>(g, k, m).noalias() += detail::CMapMat<S>(self.parents[0]->value.data(), n, k).transpose() * go;
    }
  });
}

/// x (n x in) W^T + b with W (out x in) and b (out); b may be undefined.
template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  detail::check_rank(x.shape(), 2, "linear");
  detail::check_rank(w.shape(), 2, "linear");
  const int n = x.dim(0), in = x.dim(1), out = w.dim(0);
  if (w.dim(1) != in) throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  const bool has_bias = b.defined();
  if (has_bias && static_cast<int>(b.size()) != out) throw ShapeError("linear: bias size mismatch");
  std::vector<S> v(static_cast<std::size_t>(n) * out);
  detail::MapMat<S> y(v.data(), n, out);
  y.noalias() = detail::CMapMat<S>(x.data(), n, in) * detail::CMapMat<S>(w.data(), out, in).transpose();
  if (has_bias) {
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < out; ++c) y(r, c) += b[static_cast<std::size_t>(c)];
  }
  std::vector<Tensor<S>> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return detail::make_result<S>({n, out}, std::move(v), std::move(inputs), [n, in, out, has_bias](Node<S>& self) {
    detail::CMapMat<S> go(self.grad.data(), n, out);
    if (S* g = detail::grad_of(self, 0)) {
      detail::MapMat<S>(g, n, in).noalias() += go * detail::CMapMat<S>(self.parents[1]->value.data(), out, in);
    }
    if (S* g = detail::grad_of(self, 1)) {
      detail::MapMat<S>(g, out, in).noalias() += go.transpose() * detail::CMapMat<S>(self.parents[0]->value.data(), n, in);
    }
    if (has_bias) {
      if (S* g = detail::grad_of(self, 2)) {
        for (int r = 0; r < n; ++r)
          for (int c = 0; c < out; ++c) g[c] += go(r, c);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <class S>
Tensor<S> sum(const Tensor<S>& a) {
  S s = S(0);
  for (S x : a.values()) s += x;
  return detail::make_result<S>({1}, {s}, {a}, [](Node<S>& self) {
    if (S* g = detail::grad_of(self, 0)) {
      const S go = self.grad[0];
      for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i) g[i] += go;
    }
  });
}

/// sum_i w_i * a_i with constant weights.
template <class S>
Tensor<S> weighted_sum(const Tensor<S>& a, std::vector<S> w) {
  if (w.size() != a.size()) throw ShapeError("weighted_sum: weight count mismatch");
  S s = S(0);
  for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * a[i];
  return detail::make_result<S>({1}, {s}, {a}, [w = std::move(w)](Node<S>& self) {
    if (S* g = detail::grad_of(self, 0)) {
      const S go = self.grad[0];
      for (std::size_t i = 0; i < w.size(); ++i) g[i] += go * w[i];
    }
  });
}

/// Sum of scalars.
template <class S>
Tensor<S> add_all(const std::vector<Tensor<S>>& terms) {
  if (terms.empty()) return Tensor<S>::zeros({1});
  S s = S(0);
  for (const auto& t : terms) s += t.item();
  return detail::make_result<S>({1}, {s}, terms, [](Node<S>& self) {
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      if (S* g = detail::grad_of(self, p)) g[0] += self.grad[0];
    }
  });
}

/// Rows grouped in consecutive blocks of `group`: out[q] = sum_g w[q*group+g] * a[q*group+g].
template <class S>
Tensor<S> group_weighted_sum(const Tensor<S>& a, int group, std::vector<S> w) {
  detail::check_rank(a.shape(), 2, "group_weighted_sum");
  const int rows = a.dim(0), cols = a.dim(1);
  if (group <= 0 || rows % group != 0 || static_cast<int>(w.size()) != rows) {
    throw ShapeError("group_weighted_sum: bad grouping");
  }
  const int q = rows / group;
  std::vector<S> v(static_cast<std::size_t>(q) * cols, S(0));
  for (int r = 0; r < rows; ++r) {
    if (w[r] == S(0)) continue;
    const S* src = a.data() + static_cast<std::size_t>(r) * cols;
    S* dst = v.data() + static_cast<std::size_t>(r / group) * cols;
    for (int c = 0; c < cols; ++c) dst[c] += w[r] * src[c];
  }
  return detail::make_result<S>({q, cols}, std::move(v), {a}, [group, cols, rows, w = std::move(w)](Node<S>& self) {
    if (S* g = detail::grad_of(self, 0)) {
      for (int r = 0; r < rows; ++r) {
        if (w[r] == S(0)) continue;
        const S* go = self.grad.data() + static_cast<std::size_t>(r / group) * cols;
        S* dst = g + static_cast<std::size_t>(r) * cols;
        for (int c = 0; c < cols; ++c) dst[c] += w[r] * go[c];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization and attention

template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, S eps = S(1e-5)) {
  detail::check_rank(x.shape(), 2, "layer_norm");
  const int n = x.dim(0), d = x.dim(1);
  if (static_cast<int>(gamma.size()) != d || static_cast<int>(beta.size()) != d) throw ShapeError("layer_norm: affine size");
  std::vector<S> v(x.size()), xhat(x.size()), inv_std(n);
  for (int r = 0; r < n; ++r) {
    const S* row = x.data() + static_cast<std::size_t>(r) * d;
    S mean = 0;
    for (int c = 0; c < d; ++c) mean += row[c];
    mean /= d;
    S var = 0;
    for (int c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= d;
    inv_std[r] = S(1) / std::sqrt(var + eps);
    for (int c = 0; c < d; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * d + c;
      xhat[i] = (row[c] - mean) * inv_std[r];
      v[i] = xhat[i] * gamma[c] + beta[c];
    }
  }
  return detail::make_result<S>(x.shape(), std::move(v), {x, gamma, beta},
                                [n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<S>& self) {
    const auto& gm = self.parents[1]->value;
    S* gx = detail::grad_of(self, 0);
    S* gg = detail::grad_of(self, 1);
    S* gb = detail::grad_of(self, 2);
    for (int r = 0; r < n; ++r) {
      const S* go = self.grad.data() + static_cast<std::size_t>(r) * d;
      const S* xh = xhat.data() + static_cast<std::size_t>(r) * d;
      S sum_dy = 0, sum_dy_xh = 0;
      for (int c = 0; c < d; ++c) {
        const S dy = go[c] * gm[c];
        sum_dy += dy;
        sum_dy_xh += dy * xh[c];
        if (gg) gg[c] += go[c] * xh[c];
        if (gb) gb[c] += go[c];
      }
      if (gx) {
        for (int c = 0; c < d; ++c) {
          const S dy = go[c] * gm[c];
          gx[static_cast<std::size_t>(r) * d + c] += inv_std[r] / d * (d * dy - sum_dy - xh[c] * sum_dy_xh);
        }
      }
    }
  });
}

/// Row-wise softmax over a 2-D tensor; entries with mask 0 get probability 0.
/// A row whose mask is all zero yields all-zero probabilities.
template <class S>
Tensor<S> masked_softmax_rows(const Tensor<S>& x, const std::vector<std::uint8_t>& mask) {
  detail::check_rank(x.shape(), 2, "masked_softmax_rows");
  const int n = x.dim(0), m = x.dim(1);
  const bool use_mask = !mask.empty();
  if (use_mask && mask.size() != x.size()) throw ShapeError("masked_softmax_rows: mask size mismatch");
  std::vector<S> v(x.size(), S(0));
  for (int r = 0; r < n; ++r) {
    const S* row = x.data() + static_cast<std::size_t>(r) * m;
    S mx = -std::numeric_limits<S>::infinity();
    for (int c = 0; c < m; ++c)
      if (!use_mask || mask[static_cast<std::size_t>(r) * m + c]) mx = std::max(mx, row[c]);
    if (!std::isfinite(mx)) continue;
    S z = 0;
    for (int c = 0; c < m; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * m + c;
      if (!use_mask || mask[i]) {
        v[i] = std::exp(row[c] - mx);
        z += v[i];
      }
    }
    for (int c = 0; c < m; ++c) v[static_cast<std::size_t>(r) * m + c] /= z;
  }
  return detail::make_result<S>(x.shape(), std::move(v), {x}, [n, m](Node<S>& self) {
    if (S* g = detail::grad_of(self, 0)) {
      for (int r = 0; r < n; ++r) {
        const S* y = self.value.data() + static_cast<std::size_t>(r) * m;
        const S* go = self.grad.data() + static_cast<std::size_t>(r) * m;
        S dot = 0;
        for (int c = 0; c < m; ++c) dot += y[c] * go[c];
        for (int c = 0; c < m; ++c) g[static_cast<std::size_t>(r) * m + c] += y[c] * (go[c] - dot);
      }
    }
  });
}

/// Scaled dot-product attention with `heads` heads over already-projected
/// q (n x d), k (m x d), v (m x d). Returns n x d (heads concatenated).
template <class S>
Tensor<S> attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, int heads) {
  detail::check_rank(q.shape(), 2, "attention");
  const int n = q.dim(0), d = q.dim(1), m = k.dim(0);
  if (k.dim(1) != d || v.dim(1) != d || v.dim(0) != m || d % heads != 0) throw ShapeError("attention: bad shapes");
  const int dh = d / heads;
  const S inv = S(1) / std::sqrt(static_cast<S>(dh));
  // probabilities, per head n x m
  std::vector<S> probs(static_cast<std::size_t>(heads) * n * m);
  std::vector<S> out(static_cast<std::size_t>(n) * d, S(0));
  for (int h = 0; h < heads; ++h) {
    S* p = probs.data() + static_cast<std::size_t>(h) * n * m;
    for (int i = 0; i < n; ++i) {
      S mx = -std::numeric_limits<S>::infinity();
      for (int j = 0; j < m; ++j) {
        S s = 0;
        for (int c = 0; c < dh; ++c) s += q[static_cast<std::size_t>(i) * d + h * dh + c] * k[static_cast<std::size_t>(j) * d + h * dh + c];
        p[static_cast<std::size_t>(i) * m + j] = s * inv;
        mx = std::max(mx, s * inv);
      }
      S z = 0;
      for (int j = 0; j < m; ++j) {
        S& e = p[static_cast<std::size_t>(i) * m + j];
        e = std::exp(e - mx);
        z += e;
      }
      for (int j = 0; j < m; ++j) {
        const S a = p[static_cast<std::size_t>(i) * m + j] /= z;
        for (int c = 0; c < dh; ++c) out[static_cast<std::size_t>(i) * d + h * dh + c] += a * v[static_cast<std::size_t>(j) * d + h * dh + c];
      }
    }
  }
  return detail::make_result<S>({n, d}, std::move(out), {q, k, v},
                                [n, m, d, dh, heads, inv, probs = std::move(probs)](Node<S>& self) {
    const auto& qv = self.parents[0]->value;
    const auto& kv = self.parents[1]->value;
    const auto& vv = self.parents[2]->value;
    S* gq = detail::grad_of(self, 0);
    S* gk = detail::grad_of(self, 1);
    S* gv = detail::grad_of(self, 2);
    std::vector<S> da(static_cast<std::size_t>(m));
    for (int h = 0; h < heads; ++h) {
      const S* p = probs.data() + static_cast<std::size_t>(h) * n * m;
      for (int i = 0; i < n; ++i) {
        const S* go = self.grad.data() + static_cast<std::size_t>(i) * d + h * dh;
        S dot = 0;
        for (int j = 0; j < m; ++j) {
          S s = 0;
          for (int c = 0; c < dh; ++c) s += go[c] * vv[static_cast<std::size_t>(j) * d + h * dh + c];
          da[j] = s;
          const S a = p[static_cast<std::size_t>(i) * m + j];
          dot += a * s;
          if (gv) {
            for (int c = 0; c < dh; ++c) gv[static_cast<std::size_t>(j) * d + h * dh + c] += a * go[c];
          }
        }
        for (int j = 0; j < m; ++j) {
          const S ds = p[static_cast<std::size_t>(i) * m + j] * (da[j] - dot) * inv;
          if (ds == S(0)) continue;
          for (int c = 0; c < dh; ++c) {
            if (gq) gq[static_cast<std::size_t>(i) * d + h * dh + c] += ds * kv[static_cast<std::size_t>(j) * d + h * dh + c];
            if (gk) gk[static_cast<std::size_t>(j) * d + h * dh + c] += ds * qv[static_cast<std::size_t>(i) * d + h * dh + c];
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Losses

/// sum_i w_i * min(-log sigmoid(+-x_i), -log eps), with the sign chosen by
/// target_i in {0, 1}: the eps-guarded binary cross-entropy on logits.
template <class S>
Tensor<S> bce_with_logits(const Tensor<S>& logits, std::vector<std::uint8_t> targets, std::vector<S> weights,
                          S eps = S(1e-12)) {
  if (targets.size() != logits.size() || weights.size() != logits.size()) {
    throw ShapeError("bce_with_logits: size mismatch");
  }
  const S cap = -std::log(eps);
  S total = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const S x = logits[i];
    const S l = targets[i] ? softplus_value(-x) : softplus_value(x);
    total += weights[i] * std::min(l, cap);
  }
  return detail::make_result<S>({1}, {total}, {logits}, [targets = std::move(targets), weights = std::move(weights), cap](Node<S>& self) {
    if (S* g = detail::grad_of(self, 0)) {
      const auto& xs = self.parents[0]->value;
      const S go = self.grad[0];
      for (std::size_t i = 0; i < xs.size(); ++i) {
        const S x = xs[i];
        const S l = targets[i] ? softplus_value(-x) : softplus_value(x);
        if (l > cap) continue;
        const S p = sigmoid_value(x);
        g[i] += go * weights[i] * (targets[i] ? p - S(1) : p);
      }
    }
  });
}

/// sum_i w_i * |a_i - target_i| with constant targets and weights.
template <class S>
Tensor<S> weighted_l1(const Tensor<S>& a, std::vector<S> target, std::vector<S> weights) {
  if (target.size() != a.size() || weights.size() != a.size()) throw ShapeError("weighted_l1: size mismatch");
  S total = 0;
  for (std::size_t i = 0; i < a.size(); ++i) total += weights[i] * std::abs(a[i] - target[i]);
  return detail::make_result<S>({1}, {total}, {a}, [target = std::move(target), weights = std::move(weights)](Node<S>& self) {
    if (S* g = detail::grad_of(self, 0)) {
      const auto& av = self.parents[0]->value;
      const S go = self.grad[0];
      for (std::size_t i = 0; i < av.size(); ++i) {
        const S d = av[i] - target[i];
        g[i] += go * weights[i] * (d > S(0) ? S(1) : (d < S(0) ? S(-1) : S(0)));
      }
    }
  });
}

}  // namespace curvelane::ag
