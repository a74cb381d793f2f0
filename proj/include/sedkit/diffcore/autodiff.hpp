#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sedkit/diffcore/tensor.hpp"

namespace sedkit {

namespace detail {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor& ensure_grad() {
    if (grad.empty()) grad = Tensor::zeros(value.shape());
    return grad;
  }
  Tensor& parent_grad(std::size_t i) { return parents[i]->ensure_grad(); }
  const Tensor& parent_value(std::size_t i) const { return parents[i]->value; }
  bool parent_needs_grad(std::size_t i) const { return parents[i]->requires_grad; }
};

inline bool& grad_disabled() {
  thread_local bool disabled = false;
  return disabled;
}

}  // namespace detail

/// Suspends graph construction on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_disabled()) { detail::grad_disabled() = true; }
  ~NoGradGuard() { detail::grad_disabled() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Handle to a node of the computation graph. Copies share the node.
class Var {
 public:
  Var() = default;

  static Var parameter(Tensor value) {
    auto node = std::make_shared<detail::Node>();
    node->grad = Tensor::zeros(value.shape());
    node->value = std::move(value);
    node->requires_grad = true;
    return Var(std::move(node));
  }

  static Var constant(Tensor value) {
    auto node = std::make_shared<detail::Node>();
    node->value = std::move(value);
    return Var(std::move(node));
  }

  bool defined() const noexcept { return node_ != nullptr; }
  bool requires_grad() const noexcept { return node_->requires_grad; }
  bool is_leaf() const noexcept { return !node_->backward; }

  const Tensor& value() const { return node_->value; }
  /// Direct access for optimizers and checkpoint loading.
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->ensure_grad(); }
  Tensor& mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->ensure_grad().fill(0.0); }

  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  double item() const { return node_->value.item(); }

  /// Constant copy of the current value; gradients never flow through it.
  Var detach() const { return constant(node_->value); }
  /// Fresh trainable parameter holding a copy of this value.
  Var clone_parameter() const { return parameter(node_->value); }

  bool same_node(const Var& other) const noexcept { return node_ == other.node_; }

  // Graph construction for operation implementations.
  static Var make(Tensor value, std::vector<Var> inputs, std::function<void(detail::Node&)> backward) {
    bool track = false;
    if (!detail::grad_disabled()) {
      for (const auto& in : inputs) track = track || in.requires_grad();
    }
    auto node = std::make_shared<detail::Node>();
    node->value = std::move(value);
    if (track) {
      node->requires_grad = true;
      node->parents.reserve(inputs.size());
      for (auto& in : inputs) node->parents.push_back(std::move(in.node_));
      node->backward = std::move(backward);
    }
    return Var(std::move(node));
  }

 private:
  explicit Var(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend void backward(const Var& loss);

  std::shared_ptr<detail::Node> node_;
};

/// Reverse-mode sweep from a scalar loss. Gradients of every node reachable
/// from `loss` (including leaf parameters) are reset and then filled with
/// d(loss)/d(node). Nodes not reachable from `loss` are left untouched.
inline void backward(const Var& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward on undefined Var");
  if (!loss.value().is_scalar()) {
    throw ShapeError("backward requires a scalar loss, got " + shape_to_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node_.get(), 0);
  seen.insert(loss.node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (auto* node : order) node->ensure_grad().fill(0.0);
  loss.node_->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

/// Zeroes every listed parameter, then runs backward. After the call each
/// parameter holds exactly d(loss)/d(parameter), zero when unreachable.
inline void backward(const Var& loss, std::span<Var> params) {
  for (auto& p : params) p.zero_grad();
  backward(loss);
}

namespace ops_detail {

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

inline void require_matrix(const Var& a, const char* op) {
  if (a.value().rank() != 2) {
    throw ShapeError(std::string(op) + ": expected rank-2 operand, got " + shape_to_string(a.shape()));
  }
}

// C[r x c] += A[r x k] * B[k x c]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t r, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < r; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[r x c] += A[r x k] * B[c x k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t r, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < r; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// C[k x n] += A[r x k]^T * B[r x n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t r, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < r; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class Forward, class Derivative>
Var unary(const Var& a, Forward f, Derivative df) {
  Tensor out = a.value();
  for (auto& x : out.storage()) x = f(x);
  return Var::make(std::move(out), {a}, [df](detail::Node& self) {
    const auto& x = self.parent_value(0).storage();
    const auto& y = self.value.storage();
    const auto& g = self.grad.storage();
    auto& gx = self.parent_grad(0).storage();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(x[i], y[i]);
  });
}

}  // namespace ops_detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Var add(const Var& a, const Var& b) {
  ops_detail::require_same_shape(a, b, "add");
  Tensor out = a.value();
  const auto& bv = b.value().storage();
  for (std::size_t i = 0; i < bv.size(); ++i) out[i] += bv[i];
  return Var::make(std::move(out), {a, b}, [](detail::Node& self) {
    const auto& g = self.grad.storage();
    for (std::size_t p = 0; p < 2; ++p) {
      if (!self.parent_needs_grad(p)) continue;
      auto& gp = self.parent_grad(p).storage();
      for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  ops_detail::require_same_shape(a, b, "sub");
  Tensor out = a.value();
  const auto& bv = b.value().storage();
  for (std::size_t i = 0; i < bv.size(); ++i) out[i] -= bv[i];
  return Var::make(std::move(out), {a, b}, [](detail::Node& self) {
    const auto& g = self.grad.storage();
    if (self.parent_needs_grad(0)) {
      auto& ga = self.parent_grad(0).storage();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (self.parent_needs_grad(1)) {
      auto& gb = self.parent_grad(1).storage();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  ops_detail::require_same_shape(a, b, "mul");
  Tensor out = a.value();
  const auto& bv = b.value().storage();
  for (std::size_t i = 0; i < bv.size(); ++i) out[i] *= bv[i];
  return Var::make(std::move(out), {a, b}, [](detail::Node& self) {
    const auto& g = self.grad.storage();
    const auto& av = self.parent_value(0).storage();
    const auto& bv = self.parent_value(1).storage();
    if (self.parent_needs_grad(0)) {
      auto& ga = self.parent_grad(0).storage();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (self.parent_needs_grad(1)) {
      auto& gb = self.parent_grad(1).storage();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var div(const Var& a, const Var& b) {
  ops_detail::require_same_shape(a, b, "div");
  Tensor out = a.value();
  const auto& bv = b.value().storage();
  for (std::size_t i = 0; i < bv.size(); ++i) out[i] /= bv[i];
  return Var::make(std::move(out), {a, b}, [](detail::Node& self) {
    const auto& g = self.grad.storage();
    const auto& av = self.parent_value(0).storage();
    const auto& bv = self.parent_value(1).storage();
    if (self.parent_needs_grad(0)) {
      auto& ga = self.parent_grad(0).storage();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
    }
    if (self.parent_needs_grad(1)) {
      auto& gb = self.parent_grad(1).storage();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

inline Var scale(const Var& a, double s) {
  return ops_detail::unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

inline Var add_scalar(const Var& a, double s) {
  return ops_detail::unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

/// Adds a 1 x c row to every row of an r x c matrix.
inline Var add_row(const Var& a, const Var& row) {
  ops_detail::require_matrix(a, "add_row");
  ops_detail::require_matrix(row, "add_row");
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row: row " + shape_to_string(row.shape()) + " does not broadcast over " +
                     shape_to_string(a.shape()));
  }
  Tensor out = a.value();
  const std::size_t r = a.rows(), c = a.cols();
  const auto& rv = row.value().storage();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += rv[j];
  return Var::make(std::move(out), {a, row}, [r, c](detail::Node& self) {
    const auto& g = self.grad.storage();
    if (self.parent_needs_grad(0)) {
      auto& ga = self.parent_grad(0).storage();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (self.parent_needs_grad(1)) {
      auto& gr = self.parent_grad(1).storage();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gr[j] += g[i * c + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities

inline Var square(const Var& a) {
  return ops_detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var exp(const Var& a) {
  return ops_detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
  return ops_detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var sqrt(const Var& a) {
  return ops_detail::unary(a, [](double x) { return std::sqrt(x); },
                           [](double, double y) { return 0.5 / y; });
}

inline Var abs(const Var& a) {
  return ops_detail::unary(a, [](double x) { return std::fabs(x); },
                           [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

inline Var tanh(const Var& a) {
  return ops_detail::unary(a, [](double x) { return std::tanh(x); },
                           [](double, double y) { return 1.0 - y * y; });
}

inline double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(const Var& a) {
  return ops_detail::unary(a, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

/// Tanh approximation of the Gaussian error linear unit.
inline Var gelu(const Var& a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  return ops_detail::unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::tanh(k * (x + c * x * x * x))); },
      [](double x, double) {
        const double t = std::tanh(k * (x + c * x * x * x));
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * c * x * x);
      });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double x : a.value().storage()) s += x;
  return Var::make(Tensor::scalar(s), {a}, [](detail::Node& self) {
    const double g = self.grad[0];
    for (auto& x : self.parent_grad(0).storage()) x += g;
  });
}

inline Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  double s = 0.0;
  for (double x : a.value().storage()) s += x;
  return Var::make(Tensor::scalar(s / n), {a}, [n](detail::Node& self) {
    const double g = self.grad[0] / n;
    for (auto& x : self.parent_grad(0).storage()) x += g;
  });
}

/// Column means over the rows of an r x c matrix; yields 1 x c.
inline Var mean_rows(const Var& a) {
  ops_detail::require_matrix(a, "mean_rows");
  const std::size_t r = a.rows(), c = a.cols();
  Tensor out = Tensor::zeros({1, c});
  const auto& av = a.value().storage();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += av[i * c + j];
  for (auto& x : out.storage()) x /= static_cast<double>(r);
  return Var::make(std::move(out), {a}, [r, c](detail::Node& self) {
    auto& ga = self.parent_grad(0).storage();
    const auto& g = self.grad.storage();
    const double inv = 1.0 / static_cast<double>(r);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j] * inv;
  });
}

/// Row sums of an r x c matrix; yields r x 1.
inline Var sum_cols(const Var& a) {
  ops_detail::require_matrix(a, "sum_cols");
  const std::size_t r = a.rows(), c = a.cols();
  Tensor out = Tensor::zeros({r, 1});
  const auto& av = a.value().storage();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += av[i * c + j];
  return Var::make(std::move(out), {a}, [r, c](detail::Node& self) {
    auto& ga = self.parent_grad(0).storage();
    const auto& g = self.grad.storage();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b) {
  ops_detail::require_matrix(a, "matmul");
  ops_detail::require_matrix(b, "matmul");
  const std::size_t r = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: " + shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
  }
  Tensor out = Tensor::zeros({r, n});
  ops_detail::gemm_nn(a.value().storage().data(), b.value().storage().data(), out.storage().data(), r, k, n);
  return Var::make(std::move(out), {a, b}, [r, k, n](detail::Node& self) {
    const double* g = self.grad.storage().data();
    if (self.parent_needs_grad(0)) {
      ops_detail::gemm_nt(g, self.parent_value(1).storage().data(), self.parent_grad(0).storage().data(), r,
                          n, k);
    }
    if (self.parent_needs_grad(1)) {
      ops_detail::gemm_tn(self.parent_value(0).storage().data(), g, self.parent_grad(1).storage().data(), r,
                          k, n);
    }
  });
}

/// a * b^T for a: r x k, b: n x k.
inline Var matmul_nt(const Var& a, const Var& b) {
  ops_detail::require_matrix(a, "matmul_nt");
  ops_detail::require_matrix(b, "matmul_nt");
  const std::size_t r = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw ShapeError("matmul_nt: " + shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()) + "^T");
  }
  Tensor out = Tensor::zeros({r, n});
  ops_detail::gemm_nt(a.value().storage().data(), b.value().storage().data(), out.storage().data(), r, k, n);
  return Var::make(std::move(out), {a, b}, [r, k, n](detail::Node& self) {
    const double* g = self.grad.storage().data();
    if (self.parent_needs_grad(0)) {
      ops_detail::gemm_nn(g, self.parent_value(1).storage().data(), self.parent_grad(0).storage().data(), r,
                          n, k);
    }
    if (self.parent_needs_grad(1)) {
      ops_detail::gemm_tn(g, self.parent_value(0).storage().data(), self.parent_grad(1).storage().data(), r,
                          n, k);
    }
  });
}

inline Var transpose(const Var& a) {
  ops_detail::require_matrix(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  Tensor out = Tensor::zeros({c, r});
  const auto& av = a.value().storage();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  return Var::make(std::move(out), {a}, [r, c](detail::Node& self) {
    auto& ga = self.parent_grad(0).storage();
    const auto& g = self.grad.storage();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
}

// ---------------------------------------------------------------------------
// Structural

inline Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  ops_detail::require_matrix(a, "slice_rows");
  if (begin >= end || end > a.rows()) throw ShapeError("slice_rows: invalid range");
  const std::size_t c = a.cols();
  const auto& av = a.value().storage();
  Tensor out({end - begin, c}, std::vector<double>(av.begin() + begin * c, av.begin() + end * c));
  return Var::make(std::move(out), {a}, [begin, c](detail::Node& self) {
    auto& ga = self.parent_grad(0).storage();
    const auto& g = self.grad.storage();
    for (std::size_t i = 0; i < g.size(); ++i) ga[begin * c + i] += g[i];
  });
}

inline Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
  ops_detail::require_matrix(a, "slice_cols");
  if (begin >= end || end > a.cols()) throw ShapeError("slice_cols: invalid range");
  const std::size_t r = a.rows(), c = a.cols(), w = end - begin;
  const auto& av = a.value().storage();
  Tensor out = Tensor::zeros({r, w});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = av[i * c + begin + j];
  return Var::make(std::move(out), {a}, [r, c, w, begin](detail::Node& self) {
    auto& ga = self.parent_grad(0).storage();
    const auto& g = self.grad.storage();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) ga[i * c + begin + j] += g[i * w + j];
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  const std::size_t r = parts.front().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    ops_detail::require_matrix(p, "concat_cols");
    if (p.rows() != r) throw ShapeError("concat_cols: row count mismatch");
    widths.push_back(p.cols());
    total += p.cols();
  }
  Tensor out = Tensor::zeros({r, total});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto& pv = p.value().storage();
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * total + offset + j] = pv[i * w + j];
    offset += w;
  }
  return Var::make(std::move(out), parts, [r, total, widths](detail::Node& self) {
    const auto& g = self.grad.storage();
    std::size_t offset = 0;
    for (std::size_t p = 0; p < widths.size(); ++p) {
      const std::size_t w = widths[p];
      if (self.parent_needs_grad(p)) {
        auto& gp = self.parent_grad(p).storage();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += g[i * total + offset + j];
      }
      offset += w;
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  const std::size_t c = parts.front().cols();
  std::vector<double> data;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    ops_detail::require_matrix(p, "concat_rows");
    if (p.cols() != c) throw ShapeError("concat_rows: column count mismatch");
    const auto& pv = p.value().storage();
    data.insert(data.end(), pv.begin(), pv.end());
    sizes.push_back(pv.size());
  }
  const std::size_t r = data.size() / c;
  return Var::make(Tensor({r, c}, std::move(data)), parts, [sizes](detail::Node& self) {
    const auto& g = self.grad.storage();
    std::size_t offset = 0;
    for (std::size_t p = 0; p < sizes.size(); ++p) {
      if (self.parent_needs_grad(p)) {
        auto& gp = self.parent_grad(p).storage();
        for (std::size_t i = 0; i < sizes[p]; ++i) gp[i] += g[offset + i];
      }
      offset += sizes[p];
    }
  });
}

/// Row lookup: out[i] = table[ids[i]].
inline Var gather_rows(const Var& table, std::vector<std::size_t> ids) {
  ops_detail::require_matrix(table, "gather_rows");
  if (ids.empty()) throw ShapeError("gather_rows: empty index list");
  const std::size_t c = table.cols();
  const auto& tv = table.value().storage();
  Tensor out = Tensor::zeros({ids.size(), c});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= table.rows()) throw ShapeError("gather_rows: index out of range");
    std::copy_n(tv.begin() + ids[i] * c, c, out.storage().begin() + i * c);
  }
  return Var::make(std::move(out), {table}, [ids = std::move(ids), c](detail::Node& self) {
    auto& gt = self.parent_grad(0).storage();
    const auto& g = self.grad.storage();
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) gt[ids[i] * c + j] += g[i * c + j];
  });
}

// ---------------------------------------------------------------------------
// Normalization and probabilistic heads

inline Var softmax_rows(const Var& a) {
  ops_detail::require_matrix(a, "softmax_rows");
  const std::size_t r = a.rows(), c = a.cols();
  Tensor out = a.value();
  for (std::size_t i = 0; i < r; ++i) {
    double* row = out.storage().data() + i * c;
    const double m = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - m);
      s += row[j];
    }
    for (std::size_t j = 0; j < c; ++j) row[j] /= s;
  }
  return Var::make(std::move(out), {a}, [r, c](detail::Node& self) {
    auto& ga = self.parent_grad(0).storage();
    const auto& g = self.grad.storage();
    const auto& y = self.value.storage();
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
    }
  });
}

/// Mean softmax cross-entropy over rows of `logits` against class indices.
inline Var softmax_cross_entropy(const Var& logits, std::vector<std::size_t> targets) {
  ops_detail::require_matrix(logits, "softmax_cross_entropy");
  const std::size_t r = logits.rows(), c = logits.cols();
  if (targets.size() != r) throw ShapeError("softmax_cross_entropy: target count mismatch");
  const auto& x = logits.value().storage();
  std::vector<double> probs(r * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    if (targets[i] >= c) throw ShapeError("softmax_cross_entropy: target class out of range");
    const double* row = x.data() + i * c;
    const double m = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - m);
    const double lse = m + std::log(s);
    loss += lse - row[targets[i]];
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - lse);
  }
  loss /= static_cast<double>(r);
  return Var::make(Tensor::scalar(loss), {logits},
                   [r, c, targets = std::move(targets), probs = std::move(probs)](detail::Node& self) {
                     const double g = self.grad[0] / static_cast<double>(r);
                     auto& gl = self.parent_grad(0).storage();
                     for (std::size_t i = 0; i < r; ++i) {
                       for (std::size_t j = 0; j < c; ++j) gl[i * c + j] += g * probs[i * c + j];
                       gl[i * c + targets[i]] -= g;
                     }
                   });
}

/// Mean binary cross-entropy of sigmoid(logits) against {0,1} labels.
inline Var bce_with_logits(const Var& logits, const Tensor& labels) {
  if (logits.shape() != labels.shape()) throw ShapeError("bce_with_logits: label shape mismatch");
  const auto& x = logits.value().storage();
  const auto& y = labels.storage();
  double loss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    loss += std::max(x[i], 0.0) - x[i] * y[i] + std::log1p(std::exp(-std::fabs(x[i])));
  }
  const double n = static_cast<double>(x.size());
  return Var::make(Tensor::scalar(loss / n), {logits}, [labels, n](detail::Node& self) {
    const double g = self.grad[0] / n;
    const auto& x = self.parent_value(0).storage();
    const auto& y = labels.storage();
    auto& gl = self.parent_grad(0).storage();
    for (std::size_t i = 0; i < x.size(); ++i) gl[i] += g * (sigmoid_value(x[i]) - y[i]);
  });
}

/// Per-row layer normalization with learned gain and bias (both 1 x c).
inline Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  ops_detail::require_matrix(x, "layer_norm_rows");
  const std::size_t r = x.rows(), c = x.cols();
  if (gain.shape() != Shape{1, c} || bias.shape() != Shape{1, c}) {
    throw ShapeError("layer_norm_rows: gain/bias must be 1 x " + std::to_string(c));
  }
  const auto& xv = x.value().storage();
  const auto& gv = gain.value().storage();
  const auto& bv = bias.value().storage();
  std::vector<double> xhat(r * c), inv_std(r);
  Tensor out = Tensor::zeros({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xv.data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (row[j] - mu) * inv_std[i];
      out[i * c + j] = gv[j] * xhat[i * c + j] + bv[j];
    }
  }
  return Var::make(std::move(out), {x, gain, bias},
                   [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
                     const auto& g = self.grad.storage();
                     const auto& gv = self.parent_value(1).storage();
                     if (self.parent_needs_grad(1)) {
                       auto& gg = self.parent_grad(1).storage();
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * xhat[i * c + j];
                     }
                     if (self.parent_needs_grad(2)) {
                       auto& gb = self.parent_grad(2).storage();
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
                     }
                     if (self.parent_needs_grad(0)) {
                       auto& gx = self.parent_grad(0).storage();
                       const double n = static_cast<double>(c);
                       for (std::size_t i = 0; i < r; ++i) {
                         double mean_d = 0.0, mean_dx = 0.0;
                         for (std::size_t j = 0; j < c; ++j) {
                           const double d = g[i * c + j] * gv[j];
                           mean_d += d;
                           mean_dx += d * xhat[i * c + j];
                         }
                         mean_d /= n;
                         mean_dx /= n;
                         for (std::size_t j = 0; j < c; ++j) {
                           const double d = g[i * c + j] * gv[j];
                           gx[i * c + j] += inv_std[i] * (d - mean_d - xhat[i * c + j] * mean_dx);
                         }
                       }
                     }
                   });
}

// ---------------------------------------------------------------------------
// Operator sugar

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }

}  // namespace sedkit
