#pragma once

// Reverse-mode differentiation over dense row-major arrays.
//
// A Tensor is a shared handle to an immutable Node. Ops never mutate their
// inputs; they allocate a fresh node and, when any input requires a gradient
// and recording is enabled, remember the inputs plus a local backward rule.
// backward() walks the recorded graph once in reverse topological order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "echwr/error.hpp"

namespace echwr {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {
inline thread_local bool grad_enabled = true;
}

/// Disables graph recording for its lifetime (evaluation, finite differences).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  T* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (numel_of(shape) != values.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not hold " +
                       std::to_string(values.size()) + " values");
    }
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor: zero extent in shape " + shape_str(shape));
    }
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->data = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return from(std::move(shape), std::vector<T>(n, value), requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  const T& operator[](std::size_t i) const { return node_->data[i]; }

  /// Writable view of a leaf; used by optimizers and loaders between steps.
  std::span<T> mutable_data() {
    if (!node_->is_leaf) throw Error("mutable_data: only leaf tensors may be written");
    return node_->data;
  }

  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not scalar");
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) {
    if (!node_->is_leaf) throw Error("set_requires_grad: only leaf tensors");
    node_->requires_grad = v;
  }
  bool is_leaf() const { return node_->is_leaf; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// New leaf holding a copy of the values, detached from any graph.
  Tensor detach() const { return from(shape(), node_->data, false); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
void check_finite(const char* op, const std::vector<T>& v) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NumericError(std::string(op) + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

/// Wraps freshly computed output values into a tensor and records the node
/// when at least one input participates in differentiation.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> values,
                      std::vector<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward_rule) {
  check_finite(op, values);
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->data = std::move(values);
  n->op = op;
  bool any = false;
  if (grad_enabled) {
    for (const auto* in : inputs) any = any || in->requires_grad();
  }
  if (any) {
    n->requires_grad = true;
    n->is_leaf = false;
    n->parents.reserve(inputs.size());
    for (const auto* in : inputs) n->parents.push_back(in->node_ptr());
    n->backward = std::move(backward_rule);
  }
  return Tensor<T>(std::move(n));
}

inline std::size_t norm_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

struct BroadcastMap {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
};

inline BroadcastMap broadcast_map(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  BroadcastMap m;
  m.out.assign(rank, 1);
  m.stride_a.assign(rank, 0);
  m.stride_b.assign(rank, 0);
  std::size_t sa = 1, sb = 1;
  for (std::size_t k = 0; k < rank; ++k) {
    const std::size_t d = rank - 1 - k;
    const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast shapes " + shape_str(a) + " and " + shape_str(b));
    }
    m.out[d] = std::max(da, db);
    m.stride_a[d] = da == 1 ? 0 : sa;
    m.stride_b[d] = db == 1 ? 0 : sb;
    sa *= da;
    sb *= db;
  }
  return m;
}

/// Calls fn(out_index, a_index, b_index) for every output element.
template <typename Fn>
void for_each_broadcast(const BroadcastMap& m, Fn&& fn) {
  const std::size_t rank = m.out.size();
  if (rank == 0) {
    fn(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t inner = m.out.back();
  const std::size_t ia = m.stride_a.back(), ib = m.stride_b.back();
  const std::size_t outer = numel_of(m.out) / inner;
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0, o = 0;
  for (std::size_t r = 0; r < outer; ++r) {
    for (std::size_t j = 0; j < inner; ++j) fn(o + j, oa + j * ia, ob + j * ib);
    o += inner;
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      oa += m.stride_a[d];
      ob += m.stride_b[d];
      if (idx[d] < m.out[d]) break;
      oa -= m.stride_a[d] * m.out[d];
      ob -= m.stride_b[d] * m.out[d];
      idx[d] = 0;
    }
  }
}

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C) {
  for (std::size_t i = 0; i < M; ++i) {
    T* c = C + i * N;
    const T* a = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const T av = a[k];
      const T* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[K,N] += A[M,K]^T * G[M,N]
template <typename T>
void gemm_tn(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* G, T* C) {
  for (std::size_t i = 0; i < M; ++i) {
    const T* a = A + i * K;
    const T* g = G + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T av = a[k];
      T* c = C + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * g[j];
    }
  }
}

template <typename T>
std::vector<T> transposed(const T* src, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  return out;
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Graph traversal

template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) throw Error("backward: loss does not depend on any tensor requiring grad");

  // Iterative post-order DFS; parents are visited in recorded order so the
  // traversal, and therefore gradient accumulation order, is deterministic.
  std::vector<Node<T>*> order;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  std::unordered_set<Node<T>*> marked;
  stack.emplace_back(loss.node(), 0);
  marked.insert(loss.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && !marked.count(p)) {
        marked.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node<T>* n : order) {
    if (!n->is_leaf) n->grad.assign(n->data.size(), T(0));
  }
  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (!n->is_leaf && n->backward) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary(const char* op, const Tensor<T>& a, const Tensor<T>& b, F f, DA da, DB db) {
  if (a.shape() == b.shape()) {
    const std::size_t n = a.numel();
    std::vector<T> out(n);
    const T* x = a.data().data();
    const T* y = b.data().data();
    for (std::size_t i = 0; i < n; ++i) out[i] = f(x[i], y[i]);
    return make_result<T>(op, a.shape(), std::move(out), {&a, &b}, [da, db](Node<T>& self) {
      Node<T>& pa = *self.parents[0];
      Node<T>& pb = *self.parents[1];
      const std::size_t n = self.data.size();
      const T* g = self.grad.data();
      if (pa.requires_grad) {
        T* ga = pa.grad_buffer();
        for (std::size_t i = 0; i < n; ++i) ga[i] += da(pa.data[i], pb.data[i], self.data[i], g[i]);
      }
      if (pb.requires_grad) {
        T* gb = pb.grad_buffer();
        for (std::size_t i = 0; i < n; ++i) gb[i] += db(pa.data[i], pb.data[i], self.data[i], g[i]);
      }
    });
  }
  BroadcastMap m = broadcast_map(a.shape(), b.shape(), op);
  std::vector<T> out(numel_of(m.out));
  const T* x = a.data().data();
  const T* y = b.data().data();
  for_each_broadcast(m, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = f(x[i], y[j]); });
  Shape out_shape = m.out;
  return make_result<T>(op, std::move(out_shape), std::move(out), {&a, &b},
                        [m = std::move(m), da, db](Node<T>& self) {
                          Node<T>& pa = *self.parents[0];
                          Node<T>& pb = *self.parents[1];
                          const T* g = self.grad.data();
                          T* ga = pa.requires_grad ? pa.grad_buffer() : nullptr;
                          T* gb = pb.requires_grad ? pb.grad_buffer() : nullptr;
                          for_each_broadcast(m, [&](std::size_t o, std::size_t i, std::size_t j) {
                            if (ga) ga[i] += da(pa.data[i], pb.data[j], self.data[o], g[o]);
                            if (gb) gb[j] += db(pa.data[i], pb.data[j], self.data[o], g[o]);
                          });
                        });
}

// d(x, y) returns dy/dx given input x and output y.
template <typename T, typename F, typename D>
Tensor<T> unary(const char* op, const Tensor<T>& a, F f, D d) {
  const std::size_t n = a.numel();
  std::vector<T> out(n);
  const T* x = a.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(x[i]);
  return make_result<T>(op, a.shape(), std::move(out), {&a}, [d](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    T* gp = p.grad_buffer();
    const T* g = self.grad.data();
    for (std::size_t i = 0; i < self.data.size(); ++i) gp[i] += g[i] * d(p.data[i], self.data[i]);
  });
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T, T g) { return g; },
      [](T, T, T, T g) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T, T g) { return g; },
      [](T, T, T, T g) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T, T g) { return g * y; },
      [](T x, T, T, T g) { return g * x; });
}

template <typename T>
Tensor<T> divide(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      "divide", a, b, [](T x, T y) { return x / y; }, [](T, T y, T, T g) { return g / y; },
      [](T, T y, T out, T g) { return -g * out / y; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  return detail::unary(
      "scale", a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return detail::unary(
      "add_scalar", a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary(
      "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return detail::unary(
      "log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  return detail::unary(
      "sqrt", a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  return detail::unary(
      "tanh", a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary(
      "sigmoid", a, [](T x) { return detail::stable_sigmoid(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return divide(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a) { return scale(a, T(-1)); }

// ---------------------------------------------------------------------------
// Axis reductions and normalizations

namespace detail {
inline Shape reduced_shape(const Shape& s, std::size_t axis, bool keepdim) {
  Shape out = s;
  if (keepdim || s.size() == 1) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  return out;
}
}  // namespace detail

template <typename T>
Tensor<T> sum(const Tensor<T>& x, int axis, bool keepdim = false) {
  const std::size_t ax = detail::norm_axis(axis, x.rank(), "sum");
  const auto sp = detail::split_axis(x.shape(), ax);
  std::vector<T> out(sp.outer * sp.inner, T(0));
  const T* in = x.data().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.n; ++k) {
      const T* row = in + (o * sp.n + k) * sp.inner;
      T* dst = out.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += row[i];
    }
  return detail::make_result<T>("sum", detail::reduced_shape(x.shape(), ax, keepdim), std::move(out), {&x},
                                [sp](Node<T>& self) {
                                  Node<T>& p = *self.parents[0];
                                  T* gp = p.grad_buffer();
                                  const T* g = self.grad.data();
                                  for (std::size_t o = 0; o < sp.outer; ++o)
                                    for (std::size_t k = 0; k < sp.n; ++k) {
                                      T* dst = gp + (o * sp.n + k) * sp.inner;
                                      const T* src = g + o * sp.inner;
                                      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
                                    }
                                });
}

/// Sum of every element; result has shape [1].
template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  return detail::make_result<T>("sum_all", Shape{1}, {acc}, {&x}, [](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    T* gp = p.grad_buffer();
    const T g = self.grad[0];
    for (std::size_t i = 0; i < p.data.size(); ++i) gp[i] += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, int axis, bool keepdim = false) {
  const std::size_t ax = detail::norm_axis(axis, x.rank(), "mean");
  return scale(sum(x, axis, keepdim), T(1) / static_cast<T>(x.dim(ax)));
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

/// Maximum over an axis; the gradient goes to the first maximal element.
template <typename T>
Tensor<T> max(const Tensor<T>& x, int axis, bool keepdim = false) {
  const std::size_t ax = detail::norm_axis(axis, x.rank(), "max");
  const auto sp = detail::split_axis(x.shape(), ax);
  std::vector<T> out(sp.outer * sp.inner);
  std::vector<std::size_t> arg(sp.outer * sp.inner, 0);
  const T* in = x.data().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = 0;
      T bv = in[o * sp.n * sp.inner + i];
      for (std::size_t k = 1; k < sp.n; ++k) {
        const T v = in[(o * sp.n + k) * sp.inner + i];
        if (v > bv) {
          bv = v;
          best = k;
        }
      }
      out[o * sp.inner + i] = bv;
      arg[o * sp.inner + i] = best;
    }
  return detail::make_result<T>("max", detail::reduced_shape(x.shape(), ax, keepdim), std::move(out), {&x},
                                [sp, arg = std::move(arg)](Node<T>& self) {
                                  Node<T>& p = *self.parents[0];
                                  T* gp = p.grad_buffer();
                                  for (std::size_t o = 0; o < sp.outer; ++o)
                                    for (std::size_t i = 0; i < sp.inner; ++i) {
                                      const std::size_t r = o * sp.inner + i;
                                      gp[(o * sp.n + arg[r]) * sp.inner + i] += self.grad[r];
                                    }
                                });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const std::size_t ax = detail::norm_axis(axis, x.rank(), "softmax");
  const auto sp = detail::split_axis(x.shape(), ax);
  std::vector<T> out(x.numel());
  const T* in = x.data().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      T m = in[base];
      for (std::size_t k = 1; k < sp.n; ++k) m = std::max(m, in[base + k * sp.inner]);
      T z = T(0);
      for (std::size_t k = 0; k < sp.n; ++k) {
        const T e = std::exp(in[base + k * sp.inner] - m);
        out[base + k * sp.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < sp.n; ++k) out[base + k * sp.inner] /= z;
    }
  return detail::make_result<T>("softmax", x.shape(), std::move(out), {&x}, [sp](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    T* gp = p.grad_buffer();
    const T* y = self.data.data();
    const T* g = self.grad.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.n * sp.inner + i;
        T dot = T(0);
        for (std::size_t k = 0; k < sp.n; ++k) dot += g[base + k * sp.inner] * y[base + k * sp.inner];
        for (std::size_t k = 0; k < sp.n; ++k) {
          const std::size_t j = base + k * sp.inner;
          gp[j] += y[j] * (g[j] - dot);
        }
      }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, int axis) {
  const std::size_t ax = detail::norm_axis(axis, x.rank(), "log_softmax");
  const auto sp = detail::split_axis(x.shape(), ax);
  std::vector<T> out(x.numel());
  const T* in = x.data().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      T m = in[base];
      for (std::size_t k = 1; k < sp.n; ++k) m = std::max(m, in[base + k * sp.inner]);
      T z = T(0);
      for (std::size_t k = 0; k < sp.n; ++k) z += std::exp(in[base + k * sp.inner] - m);
      const T lz = m + std::log(z);
      for (std::size_t k = 0; k < sp.n; ++k) out[base + k * sp.inner] = in[base + k * sp.inner] - lz;
    }
  return detail::make_result<T>("log_softmax", x.shape(), std::move(out), {&x}, [sp](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    T* gp = p.grad_buffer();
    const T* y = self.data.data();
    const T* g = self.grad.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.n * sp.inner + i;
        T gs = T(0);
        for (std::size_t k = 0; k < sp.n; ++k) gs += g[base + k * sp.inner];
        for (std::size_t k = 0; k < sp.n; ++k) {
          const std::size_t j = base + k * sp.inner;
          gp[j] += g[j] - std::exp(y[j]) * gs;
        }
      }
  });
}

/// x / ||x||_2 along an axis. Slices whose norm falls below min_norm raise
/// DegenerateEmbeddingError instead of being silently inflated.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, int axis, T min_norm = T(1e-12)) {
  const std::size_t ax = detail::norm_axis(axis, x.rank(), "l2_normalize");
  const auto sp = detail::split_axis(x.shape(), ax);
  std::vector<T> out(x.numel());
  std::vector<T> norms(sp.outer * sp.inner);
  const T* in = x.data().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      T ss = T(0);
      for (std::size_t k = 0; k < sp.n; ++k) ss += in[base + k * sp.inner] * in[base + k * sp.inner];
      const T nrm = std::sqrt(ss);
      if (!(nrm >= min_norm)) {
        throw DegenerateEmbeddingError("l2_normalize: slice " + std::to_string(o * sp.inner + i) +
                                       " has norm below " + std::to_string(static_cast<double>(min_norm)));
      }
      norms[o * sp.inner + i] = nrm;
      for (std::size_t k = 0; k < sp.n; ++k) out[base + k * sp.inner] = in[base + k * sp.inner] / nrm;
    }
  return detail::make_result<T>("l2_normalize", x.shape(), std::move(out), {&x},
                                [sp, norms = std::move(norms)](Node<T>& self) {
                                  Node<T>& p = *self.parents[0];
                                  T* gp = p.grad_buffer();
                                  const T* y = self.data.data();
                                  const T* g = self.grad.data();
                                  for (std::size_t o = 0; o < sp.outer; ++o)
                                    for (std::size_t i = 0; i < sp.inner; ++i) {
                                      const std::size_t base = o * sp.n * sp.inner + i;
                                      T dot = T(0);
                                      for (std::size_t k = 0; k < sp.n; ++k)
                                        dot += g[base + k * sp.inner] * y[base + k * sp.inner];
                                      const T nrm = norms[o * sp.inner + i];
                                      for (std::size_t k = 0; k < sp.n; ++k) {
                                        const std::size_t j = base + k * sp.inner;
                                        gp[j] += (g[j] - y[j] * dot) / nrm;
                                      }
                                    }
                                });
}

// ---------------------------------------------------------------------------
// Structural ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return detail::make_result<T>("reshape", std::move(shape), std::move(out), {&x}, [](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    T* gp = p.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gp[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape) {
  detail::BroadcastMap m = detail::broadcast_map(shape, x.shape(), "broadcast_to");
  if (m.out != shape) {
    throw ShapeError("broadcast_to: " + shape_str(x.shape()) + " does not broadcast to " + shape_str(shape));
  }
  std::vector<T> out(numel_of(shape));
  const T* in = x.data().data();
  detail::for_each_broadcast(m, [&](std::size_t o, std::size_t, std::size_t j) { out[o] = in[j]; });
  return detail::make_result<T>("broadcast_to", shape, std::move(out), {&x}, [m = std::move(m)](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    T* gp = p.grad_buffer();
    detail::for_each_broadcast(m, [&](std::size_t o, std::size_t, std::size_t j) { gp[j] += self.grad[o]; });
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const std::size_t ax = detail::norm_axis(axis, xs[0].rank(), "concat");
  Shape out_shape = xs[0].shape();
  std::size_t total = 0;
  for (const auto& t : xs) {
    Shape a = t.shape(), b = xs[0].shape();
    if (a.size() != b.size()) throw ShapeError("concat: rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    a[ax] = b[ax] = 0;
    if (a != b) throw ShapeError("concat: shape mismatch " + shape_str(t.shape()) + " vs " + shape_str(xs[0].shape()));
    total += t.dim(ax);
  }
  out_shape[ax] = total;
  const auto sp = detail::split_axis(out_shape, ax);
  std::vector<T> out(numel_of(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& t : xs) {
    offsets.push_back(off);
    const std::size_t len = t.dim(ax) * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(t.data().data() + o * len, len, out.data() + o * sp.n * sp.inner + off * sp.inner);
    off += t.dim(ax);
  }
  std::vector<const Tensor<T>*> inputs;
  for (const auto& t : xs) inputs.push_back(&t);
  return detail::make_result<T>("concat", out_shape, std::move(out), std::move(inputs),
                                [sp, offsets = std::move(offsets)](Node<T>& self) {
                                  for (std::size_t q = 0; q < self.parents.size(); ++q) {
                                    Node<T>& p = *self.parents[q];
                                    if (!p.requires_grad) continue;
                                    T* gp = p.grad_buffer();
                                    const std::size_t len = p.data.size() / sp.outer;
                                    for (std::size_t o = 0; o < sp.outer; ++o) {
                                      const T* src = self.grad.data() + o * sp.n * sp.inner + offsets[q] * sp.inner;
                                      T* dst = gp + o * len;
                                      for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
                                    }
                                  }
                                });
}

/// Elements [begin, end) along an axis.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = detail::norm_axis(axis, x.rank(), "slice");
  if (begin >= end || end > x.dim(ax)) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for axis " +
                     std::to_string(ax) + " of " + shape_str(x.shape()));
  }
  const auto sp = detail::split_axis(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[ax] = end - begin;
  const std::size_t len = (end - begin) * sp.inner;
  std::vector<T> out(sp.outer * len);
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(x.data().data() + (o * sp.n + begin) * sp.inner, len, out.data() + o * len);
  return detail::make_result<T>("slice", std::move(out_shape), std::move(out), {&x},
                                [sp, begin, len](Node<T>& self) {
                                  Node<T>& p = *self.parents[0];
                                  T* gp = p.grad_buffer();
                                  for (std::size_t o = 0; o < sp.outer; ++o) {
                                    T* dst = gp + (o * sp.n + begin) * sp.inner;
                                    const T* src = self.grad.data() + o * len;
                                    for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
                                  }
                                });
}

/// Swaps two axes.
template <typename T>
Tensor<T> transpose(const Tensor<T>& x, int axis_a, int axis_b) {
  const std::size_t a = detail::norm_axis(axis_a, x.rank(), "transpose");
  const std::size_t b = detail::norm_axis(axis_b, x.rank(), "transpose");
  const Shape& in_shape = x.shape();
  const std::size_t rank = in_shape.size();
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t d = rank - 1; d-- > 0;) in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
  Shape out_shape = in_shape;
  std::swap(out_shape[a], out_shape[b]);
  std::vector<std::size_t> src_strides = in_strides;  // stride in x for each output dim
  std::swap(src_strides[a], src_strides[b]);
  const std::size_t n = x.numel();
  // map[o] = flat index in x of output element o
  std::vector<std::size_t> map(n);
  {
    std::vector<std::size_t> idx(rank, 0);
    std::size_t src = 0;
    for (std::size_t o = 0; o < n; ++o) {
      map[o] = src;
      for (std::size_t d = rank; d-- > 0;) {
        ++idx[d];
        src += src_strides[d];
        if (idx[d] < out_shape[d]) break;
        src -= src_strides[d] * out_shape[d];
        idx[d] = 0;
      }
    }
  }
  std::vector<T> out(n);
  const T* in = x.data().data();
  for (std::size_t o = 0; o < n; ++o) out[o] = in[map[o]];
  return detail::make_result<T>("transpose", std::move(out_shape), std::move(out), {&x},
                                [map = std::move(map)](Node<T>& self) {
                                  Node<T>& p = *self.parents[0];
                                  T* gp = p.grad_buffer();
                                  for (std::size_t o = 0; o < map.size(); ++o) gp[map[o]] += self.grad[o];
                                });
}

/// Rows of a [V, D] table selected by index; result [ids.size(), D].
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<std::size_t>& ids) {
  if (table.rank() != 2) throw ShapeError("gather_rows: table must be 2-D, got " + shape_str(table.shape()));
  if (ids.empty()) throw ShapeError("gather_rows: empty index list");
  const std::size_t rows = table.dim(0), cols = table.dim(1);
  std::vector<T> out(ids.size() * cols);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= rows) {
      throw ShapeError("gather_rows: index " + std::to_string(ids[r]) + " out of range for " + std::to_string(rows) +
                       " rows");
    }
    std::copy_n(table.data().data() + ids[r] * cols, cols, out.data() + r * cols);
  }
  return detail::make_result<T>("gather_rows", Shape{ids.size(), cols}, std::move(out), {&table},
                                [ids, cols](Node<T>& self) {
                                  Node<T>& p = *self.parents[0];
                                  T* gp = p.grad_buffer();
                                  for (std::size_t r = 0; r < ids.size(); ++r) {
                                    T* dst = gp + ids[r] * cols;
                                    const T* src = self.grad.data() + r * cols;
                                    for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
                                  }
                                });
}

/// Boolean array with its own shape; broadcast against a tensor by trailing alignment.
struct Mask {
  Shape shape;
  std::vector<std::uint8_t> values;
};

/// Replaces elements where the (broadcast) mask is set. Filled positions get zero gradient.
template <typename T>
Tensor<T> masked_fill(const Tensor<T>& x, const Mask& mask, T value) {
  if (numel_of(mask.shape) != mask.values.size()) throw ShapeError("masked_fill: mask values do not match its shape");
  detail::BroadcastMap m = detail::broadcast_map(x.shape(), mask.shape, "masked_fill");
  if (m.out != x.shape()) {
    throw ShapeError("masked_fill: mask " + shape_str(mask.shape) + " does not broadcast to " + shape_str(x.shape()));
  }
  std::vector<T> out(x.numel());
  std::vector<std::uint8_t> hit(x.numel());
  const T* in = x.data().data();
  detail::for_each_broadcast(m, [&](std::size_t o, std::size_t i, std::size_t j) {
    hit[o] = mask.values[j] ? 1 : 0;
    out[o] = hit[o] ? value : in[i];
  });
  return detail::make_result<T>("masked_fill", x.shape(), std::move(out), {&x}, [hit = std::move(hit)](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    T* gp = p.grad_buffer();
    for (std::size_t i = 0; i < hit.size(); ++i)
      if (!hit[i]) gp[i] += self.grad[i];
  });
}

/// Matrix product. Supported forms: [..., M, K] x [K, N] and [B, M, K] x [B, K, N].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto fail = [&]() {
    return ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  };
  if (a.rank() < 2 || b.rank() < 2) throw fail();
  const std::size_t M = a.dim(a.rank() - 2), K = a.dim(a.rank() - 1);
  if (b.dim(b.rank() - 2) != K) throw fail();
  const std::size_t N = b.dim(b.rank() - 1);
  const bool batched_b = b.rank() == 3;
  std::size_t batches = 1;
  if (batched_b) {
    if (a.rank() != 3 || a.dim(0) != b.dim(0)) throw fail();
    batches = a.dim(0);
  } else if (b.rank() != 2) {
    throw fail();
  }
  // A 2-D right operand lets all leading dims of a fold into one row block.
  const std::size_t rows_per_batch = batched_b ? M : a.numel() / K;
  if (!batched_b) batches = 1;
  Shape out_shape = a.shape();
  out_shape.back() = N;
  std::vector<T> out(numel_of(out_shape), T(0));
  for (std::size_t q = 0; q < batches; ++q) {
    detail::gemm_nn(rows_per_batch, K, N, a.data().data() + q * rows_per_batch * K,
                    b.data().data() + (batched_b ? q * K * N : 0), out.data() + q * rows_per_batch * N);
  }
  return detail::make_result<T>(
      "matmul", std::move(out_shape), std::move(out), {&a, &b},
      [batches, rows_per_batch, K, N, batched_b](Node<T>& self) {
        Node<T>& pa = *self.parents[0];
        Node<T>& pb = *self.parents[1];
        const T* g = self.grad.data();
        for (std::size_t q = 0; q < batches; ++q) {
          const T* gq = g + q * rows_per_batch * N;
          const T* bq = pb.data.data() + (batched_b ? q * K * N : 0);
          const T* aq = pa.data.data() + q * rows_per_batch * K;
          if (pa.requires_grad) {
            const std::vector<T> bt = detail::transposed(bq, K, N);
            detail::gemm_nn(rows_per_batch, N, K, gq, bt.data(), pa.grad_buffer() + q * rows_per_batch * K);
          }
          if (pb.requires_grad) {
            detail::gemm_tn(rows_per_batch, K, N, aq, gq, pb.grad_buffer() + (batched_b ? q * K * N : 0));
          }
        }
      });
}

/// Sliding windows of a channels-last sequence: [B, L, C] -> [B, L_out, kernel*C]
/// with L_out = floor((L + 2*pad - kernel) / stride) + 1 and zero padding.
template <typename T>
Tensor<T> unfold_1d(const Tensor<T>& x, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (x.rank() != 3) throw ShapeError("unfold_1d: expected [B, L, C], got " + shape_str(x.shape()));
  if (kernel == 0 || stride == 0) throw ShapeError("unfold_1d: kernel and stride must be positive");
  const std::size_t B = x.dim(0), L = x.dim(1), C = x.dim(2);
  if (L + 2 * pad < kernel) {
    throw ShapeError("unfold_1d: kernel " + std::to_string(kernel) + " larger than padded input length " +
                     std::to_string(L + 2 * pad));
  }
  const std::size_t L_out = (L + 2 * pad - kernel) / stride + 1;
  const std::size_t row = kernel * C;
  std::vector<T> out(B * L_out * row, T(0));
  const T* in = x.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < L_out; ++o)
      for (std::size_t k = 0; k < kernel; ++k) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(o * stride + k) - static_cast<std::ptrdiff_t>(pad);
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
        std::copy_n(in + (b * L + static_cast<std::size_t>(src)) * C, C, out.data() + (b * L_out + o) * row + k * C);
      }
  return detail::make_result<T>("unfold_1d", Shape{B, L_out, row}, std::move(out), {&x},
                                [B, L, C, L_out, kernel, stride, pad](Node<T>& self) {
                                  Node<T>& p = *self.parents[0];
                                  T* gp = p.grad_buffer();
                                  const std::size_t row = kernel * C;
                                  for (std::size_t b = 0; b < B; ++b)
                                    for (std::size_t o = 0; o < L_out; ++o)
                                      for (std::size_t k = 0; k < kernel; ++k) {
                                        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(o * stride + k) -
                                                                   static_cast<std::ptrdiff_t>(pad);
                                        if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
                                        T* dst = gp + (b * L + static_cast<std::size_t>(src)) * C;
                                        const T* g = self.grad.data() + (b * L_out + o) * row + k * C;
                                        for (std::size_t c = 0; c < C; ++c) dst[c] += g[c];
                                      }
                                });
}

// ---------------------------------------------------------------------------
// Verification harness

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  bool passed = false;
};

/// Compares the analytic gradient of a scalar function against central
/// differences with step 1e-5 * (|x| + 1). The relative error of each entry is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-3); the floor keeps
/// near-zero entries from amplifying finite-difference noise.
template <typename Fn>
GradcheckReport gradcheck(Fn&& fn, const Tensor<double>& point, double rel_tol) {
  Tensor<double> x = Tensor<double>::from(point.shape(), std::vector<double>(point.data().begin(), point.data().end()),
                                          true);
  Tensor<double> y = fn(x);
  if (y.numel() != 1) throw ShapeError("gradcheck: function must return a scalar");
  if (!std::isfinite(y.item())) throw NumericError("gradcheck: non-finite value at the base point");
  backward(y);
  std::vector<double> analytic(x.numel(), 0.0);
  if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());

  GradcheckReport report;
  NoGradGuard no_grad;
  std::vector<double> probe(point.data().begin(), point.data().end());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double x0 = probe[i];
    const double h = 1e-5 * (std::abs(x0) + 1.0);
    probe[i] = x0 + h;
    const double fp = fn(Tensor<double>::from(point.shape(), probe)).item();
    probe[i] = x0 - h;
    const double fm = fn(Tensor<double>::from(point.shape(), probe)).item();
    probe[i] = x0;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("gradcheck: non-finite value when perturbing index " + std::to_string(i));
    }
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-3});
    const double rel = std::abs(analytic[i] - numeric) / denom;
    if (i == 0 || rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
      report.analytic_at_worst = analytic[i];
      report.numeric_at_worst = numeric;
    }
  }
  report.passed = report.max_rel_error <= rel_tol;
  return report;
}

}  // namespace echwr
