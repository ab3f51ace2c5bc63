#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "fedmm/errors.hpp"

namespace fedmm {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

// One node of the recorded graph: either a leaf (parameter/constant) or the
// output of an op. `seq` is the creation order; ops always record after their
// inputs, so iterating by decreasing seq is a reverse topological order.
template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until touched by backward
  bool requires_grad = false;
  uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void(TensorNode<T>&)> backward_fn;

  bool tracked() const { return requires_grad || !parents.empty(); }

  void accum_grad(const std::vector<T>& g) {
    if (grad.empty()) grad.assign(value.size(), T(0));
    for (size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
  }
};

namespace detail {
template <typename T>
inline uint64_t next_seq() {
  static std::atomic<uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      throw ShapeMismatch("tensor data length " + std::to_string(data.size()) +
                          " does not match shape " + shape_str(shape));
    node_ = std::make_shared<TensorNode<T>>();
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
    node_->seq = detail::next_seq<T>();
  }

  static Tensor zeros(const Shape& s) { return Tensor(s, std::vector<T>(shape_numel(s), T(0))); }
  static Tensor full(const Shape& s, T v) { return Tensor(s, std::vector<T>(shape_numel(s), v)); }
  static Tensor ones(const Shape& s) { return full(s, T(1)); }
  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

  const std::vector<T>& data() const { return node_->value; }
  // In-place access for non-differentiable buffers (running stats). Never
  // call on a tensor that participates in a live graph.
  std::vector<T>& mutable_data() { return node_->value; }

  T item() const {
    if (numel() != 1) throw NotScalar("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  T operator()(int64_t i) const { return node_->value[static_cast<size_t>(i)]; }
  T operator()(int64_t i, int64_t j) const {
    return node_->value[static_cast<size_t>(i * shape()[1] + j)];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool tracked() const { return node_ && node_->tracked(); }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  const std::vector<T>& grad() const { return node_->grad; }
  void clear_grad() { node_->grad.clear(); }

  // Same values, fresh untracked leaf sharing no graph history.
  Tensor detach() const { return Tensor(shape(), data()); }
  // Deep copy as a leaf; keeps requires_grad.
  Tensor clone() const { return Tensor(shape(), data(), requires_grad()); }

  std::shared_ptr<TensorNode<T>>& node() { return node_; }
  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;

  template <typename U>
  friend Tensor<U> make_op(const char* name, Shape shape, std::vector<U> value,
                           const std::vector<Tensor<U>>& parents,
                           std::function<void(TensorNode<U>&)> backward_fn);
};

// Factory for recorded ops. If no parent is tracked the result is a plain
// constant and no graph node is kept.
template <typename T>
Tensor<T> make_op(const char* name, Shape shape, std::vector<T> value,
                  const std::vector<Tensor<T>>& parents,
                  std::function<void(TensorNode<T>&)> backward_fn) {
  Tensor<T> out(std::move(shape), std::move(value));
  bool any_tracked = false;
  for (const auto& p : parents) any_tracked = any_tracked || p.tracked();
  if (any_tracked) {
    out.node_->op = name;
    for (const auto& p : parents) out.node_->parents.push_back(p.node());
    out.node_->backward_fn = std::move(backward_fn);
  }
  return out;
}

// Reverse-mode sweep. Fills `grad` on every tracked leaf reachable from
// `loss`; unreachable leaves are simply left without a grad (callers treat
// that as zero).
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined()) throw EmptyGraph("backward on an undefined tensor");
  if (loss.numel() != 1)
    throw NotScalar("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.tracked())
    throw EmptyGraph("loss is not connected to any tracked tensor");

  // collect reachable nodes
  std::vector<TensorNode<T>*> nodes;
  std::unordered_set<TensorNode<T>*> seen;
  std::vector<TensorNode<T>*> stack{loss.node().get()};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    TensorNode<T>* n = stack.back();
    stack.pop_back();
    nodes.push_back(n);
    for (auto& p : n->parents)
      if (seen.insert(p.get()).second) stack.push_back(p.get());
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const TensorNode<T>* a, const TensorNode<T>* b) { return a->seq > b->seq; });

  loss.node()->grad.assign(1, T(1));
  for (TensorNode<T>* n : nodes) {
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// elementwise / broadcast helpers

namespace detail {

enum class Broadcast { Same, RowBias, Scalar };

template <typename T>
Broadcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::Same;
  if (b.numel() == 1) return Broadcast::Scalar;
  if (a.rank() == 2 && b.rank() == 1 && b.dim(0) == a.dim(1)) return Broadcast::RowBias;
  throw ShapeMismatch(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()) + " (only same-shape, row-bias and scalar allowed)");
}

template <typename T>
void check_finite(const std::vector<T>& v, const char* op) {
  for (T x : v)
    if (!std::isfinite(static_cast<double>(x)))
      throw DomainError(std::string(op) + " produced a non-finite value");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// op kinds

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  auto kind = detail::broadcast_kind(a, b, "add");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<T> out(av.size());
  if (kind == detail::Broadcast::Same) {
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  } else if (kind == detail::Broadcast::Scalar) {
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[0];
  } else {
    size_t d = bv.size();
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i % d];
  }
  return make_op<T>("add", a.shape(), std::move(out), {a, b}, [a, b, kind](TensorNode<T>& n) {
    if (a.tracked()) a.node()->accum_grad(n.grad);
    if (!b.tracked()) return;
    if (kind == detail::Broadcast::Same) {
      b.node()->accum_grad(n.grad);
    } else if (kind == detail::Broadcast::Scalar) {
      T s = 0;
      for (T g : n.grad) s += g;
      b.node()->accum_grad({s});
    } else {
      size_t d = b.data().size();
      std::vector<T> g(d, T(0));
      for (size_t i = 0; i < n.grad.size(); ++i) g[i % d] += n.grad[i];
      b.node()->accum_grad(g);
    }
  });
}

template <typename T>
Tensor<T> subtract(const Tensor<T>& a, const Tensor<T>& b) {
  auto kind = detail::broadcast_kind(a, b, "subtract");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<T> out(av.size());
  if (kind == detail::Broadcast::Same) {
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  } else if (kind == detail::Broadcast::Scalar) {
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[0];
  } else {
    size_t d = bv.size();
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i % d];
  }
  return make_op<T>("subtract", a.shape(), std::move(out), {a, b}, [a, b, kind](TensorNode<T>& n) {
    if (a.tracked()) a.node()->accum_grad(n.grad);
    if (!b.tracked()) return;
    if (kind == detail::Broadcast::Same) {
      std::vector<T> g(n.grad.size());
      for (size_t i = 0; i < g.size(); ++i) g[i] = -n.grad[i];
      b.node()->accum_grad(g);
    } else if (kind == detail::Broadcast::Scalar) {
      T s = 0;
      for (T g : n.grad) s += g;
      b.node()->accum_grad({-s});
    } else {
      size_t d = b.data().size();
      std::vector<T> g(d, T(0));
      for (size_t i = 0; i < n.grad.size(); ++i) g[i % d] -= n.grad[i];
      b.node()->accum_grad(g);
    }
  });
}

template <typename T>
Tensor<T> multiply(const Tensor<T>& a, const Tensor<T>& b) {
  auto kind = detail::broadcast_kind(a, b, "multiply");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<T> out(av.size());
  if (kind == detail::Broadcast::Same) {
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  } else if (kind == detail::Broadcast::Scalar) {
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[0];
  } else {
    size_t d = bv.size();
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i % d];
  }
  return make_op<T>("multiply", a.shape(), std::move(out), {a, b}, [a, b, kind](TensorNode<T>& n) {
    const auto& av = a.data();
    const auto& bv = b.data();
    if (a.tracked()) {
      std::vector<T> g(av.size());
      if (kind == detail::Broadcast::Same)
        for (size_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * bv[i];
      else if (kind == detail::Broadcast::Scalar)
        for (size_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * bv[0];
      else {
        size_t d = bv.size();
        for (size_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * bv[i % d];
      }
      a.node()->accum_grad(g);
    }
    if (!b.tracked()) return;
    if (kind == detail::Broadcast::Same) {
      std::vector<T> g(bv.size());
      for (size_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * av[i];
      b.node()->accum_grad(g);
    } else if (kind == detail::Broadcast::Scalar) {
      T s = 0;
      for (size_t i = 0; i < av.size(); ++i) s += n.grad[i] * av[i];
      b.node()->accum_grad({s});
    } else {
      size_t d = bv.size();
      std::vector<T> g(d, T(0));
      for (size_t i = 0; i < av.size(); ++i) g[i % d] += n.grad[i] * av[i];
      b.node()->accum_grad(g);
    }
  });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeMismatch("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  int64_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<T> out(static_cast<size_t>(n * m), T(0));
  const auto& av = a.data();
  const auto& bv = b.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t p = 0; p < k; ++p) {
      T aip = av[static_cast<size_t>(i * k + p)];
      if (aip == T(0)) continue;
      for (int64_t j = 0; j < m; ++j)
        out[static_cast<size_t>(i * m + j)] += aip * bv[static_cast<size_t>(p * m + j)];
    }
  return make_op<T>("matmul", Shape{n, m}, std::move(out), {a, b},
                    [a, b, n, k, m](TensorNode<T>& nd) {
                      const auto& av = a.data();
                      const auto& bv = b.data();
                      if (a.tracked()) {
                        std::vector<T> g(av.size(), T(0));  // grad . b^T
                        for (int64_t i = 0; i < n; ++i)
                          for (int64_t j = 0; j < m; ++j) {
                            T gij = nd.grad[static_cast<size_t>(i * m + j)];
                            if (gij == T(0)) continue;
                            for (int64_t p = 0; p < k; ++p)
                              g[static_cast<size_t>(i * k + p)] +=
                                  gij * bv[static_cast<size_t>(p * m + j)];
                          }
                        a.node()->accum_grad(g);
                      }
                      if (b.tracked()) {
                        std::vector<T> g(bv.size(), T(0));  // a^T . grad
                        for (int64_t i = 0; i < n; ++i)
                          for (int64_t p = 0; p < k; ++p) {
                            T aip = av[static_cast<size_t>(i * k + p)];
                            if (aip == T(0)) continue;
                            for (int64_t j = 0; j < m; ++j)
                              g[static_cast<size_t>(p * m + j)] +=
                                  aip * nd.grad[static_cast<size_t>(i * m + j)];
                          }
                        b.node()->accum_grad(g);
                      }
                    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
  return make_op<T>("relu", a.shape(), std::move(out), {a}, [a](TensorNode<T>& n) {
    std::vector<T> g(n.grad.size());
    for (size_t i = 0; i < g.size(); ++i) g[i] = a.data()[i] > T(0) ? n.grad[i] : T(0);
    a.node()->accum_grad(g);
  });
}

namespace detail {
template <typename T>
inline T stable_sigmoid(T x) {
  if (x >= T(0)) {
    T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  T e = std::exp(x);
  return e / (T(1) + e);
}
}  // namespace detail

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = detail::stable_sigmoid(a.data()[i]);
  auto out_copy = out;
  return make_op<T>("sigmoid", a.shape(), std::move(out), {a},
                    [a, y = std::move(out_copy)](TensorNode<T>& n) {
                      std::vector<T> g(n.grad.size());
                      for (size_t i = 0; i < g.size(); ++i)
                        g[i] = n.grad[i] * y[i] * (T(1) - y[i]);
                      a.node()->accum_grad(g);
                    });
}

// exp clamps its input so the result stays finite in the working precision;
// the clamped region contributes zero gradient, consistent with the flat
// clamped forward.
template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  const T hi = std::is_same_v<T, float> ? T(87) : T(700);
  std::vector<T> out(a.data().size());
  std::vector<char> clamped(a.data().size(), 0);
  for (size_t i = 0; i < out.size(); ++i) {
    T x = a.data()[i];
    if (x > hi) {
      x = hi;
      clamped[i] = 1;
    }
    out[i] = std::exp(x);
  }
  auto out_copy = out;
  return make_op<T>("exp", a.shape(), std::move(out), {a},
                    [a, y = std::move(out_copy), cl = std::move(clamped)](TensorNode<T>& n) {
                      std::vector<T> g(n.grad.size());
                      for (size_t i = 0; i < g.size(); ++i)
                        g[i] = cl[i] ? T(0) : n.grad[i] * y[i];
                      a.node()->accum_grad(g);
                    });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  std::vector<T> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) {
    if (!(a.data()[i] > T(0)))
      throw DomainError("log of non-positive value " + std::to_string(a.data()[i]));
    out[i] = std::log(a.data()[i]);
  }
  return make_op<T>("log", a.shape(), std::move(out), {a}, [a](TensorNode<T>& n) {
    std::vector<T> g(n.grad.size());
    for (size_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] / a.data()[i];
    a.node()->accum_grad(g);
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T x : a.data()) s += x;
  return make_op<T>("sum", Shape{}, {s}, {a}, [a](TensorNode<T>& n) {
    std::vector<T> g(a.numel(), n.grad[0]);
    a.node()->accum_grad(g);
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  T s = 0;
  for (T x : a.data()) s += x;
  T inv = T(1) / static_cast<T>(a.numel());
  return make_op<T>("mean", Shape{}, {s * inv}, {a}, [a, inv](TensorNode<T>& n) {
    std::vector<T> g(a.numel(), n.grad[0] * inv);
    a.node()->accum_grad(g);
  });
}

// axis reductions for rank-2 tensors: axis 0 collapses rows -> (d,), axis 1
// collapses columns -> (n,)
template <typename T>
Tensor<T> sum(const Tensor<T>& a, int axis) {
  if (a.rank() != 2) throw ShapeMismatch("sum(axis): rank-2 tensor required");
  int64_t n = a.dim(0), d = a.dim(1);
  if (axis == 0) {
    std::vector<T> out(static_cast<size_t>(d), T(0));
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < d; ++j) out[static_cast<size_t>(j)] += a(i, j);
    return make_op<T>("sum0", Shape{d}, std::move(out), {a}, [a, n, d](TensorNode<T>& nd) {
      std::vector<T> g(static_cast<size_t>(n * d));
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j)
          g[static_cast<size_t>(i * d + j)] = nd.grad[static_cast<size_t>(j)];
      a.node()->accum_grad(g);
    });
  }
  if (axis == 1) {
    std::vector<T> out(static_cast<size_t>(n), T(0));
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < d; ++j) out[static_cast<size_t>(i)] += a(i, j);
    return make_op<T>("sum1", Shape{n}, std::move(out), {a}, [a, n, d](TensorNode<T>& nd) {
      std::vector<T> g(static_cast<size_t>(n * d));
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j)
          g[static_cast<size_t>(i * d + j)] = nd.grad[static_cast<size_t>(i)];
      a.node()->accum_grad(g);
    });
  }
  throw ShapeMismatch("sum: axis must be 0 or 1");
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a, int axis) {
  if (a.rank() != 2) throw ShapeMismatch("mean(axis): rank-2 tensor required");
  T inv = axis == 0 ? T(1) / static_cast<T>(a.dim(0)) : T(1) / static_cast<T>(a.dim(1));
  return multiply(sum(a, axis), Tensor<T>::scalar(inv));
}

// alpha * a + beta, with compile-time constants (the "scalar-scale" kind)
template <typename T>
Tensor<T> affine(const Tensor<T>& a, T alpha, T beta = T(0)) {
  std::vector<T> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = alpha * a.data()[i] + beta;
  return make_op<T>("affine", a.shape(), std::move(out), {a}, [a, alpha](TensorNode<T>& n) {
    std::vector<T> g(n.grad.size());
    for (size_t i = 0; i < g.size(); ++i) g[i] = alpha * n.grad[i];
    a.node()->accum_grad(g);
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T alpha) {
  return affine(a, alpha, T(0));
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeMismatch("transpose: rank-2 tensor required");
  int64_t n = a.dim(0), d = a.dim(1);
  std::vector<T> out(a.data().size());
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) out[static_cast<size_t>(j * n + i)] = a(i, j);
  return make_op<T>("transpose", Shape{d, n}, std::move(out), {a}, [a, n, d](TensorNode<T>& nd) {
    std::vector<T> g(a.data().size());
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < d; ++j)
        g[static_cast<size_t>(i * d + j)] = nd.grad[static_cast<size_t>(j * n + i)];
    a.node()->accum_grad(g);
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape s) {
  if (shape_numel(s) != a.numel())
    throw ShapeMismatch("reshape " + shape_str(a.shape()) + " -> " + shape_str(s));
  return make_op<T>("reshape", std::move(s), a.data(), {a},
                    [a](TensorNode<T>& n) { a.node()->accum_grad(n.grad); });
}

// concatenation along the last axis, rank 1 or 2
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat of zero tensors");
  int rank = parts[0].rank();
  if (rank != 1 && rank != 2) throw ShapeMismatch("concat: rank-1 or rank-2 tensors required");
  int64_t rows = rank == 2 ? parts[0].dim(0) : 1;
  int64_t total = 0;
  std::vector<int64_t> widths;
  for (const auto& p : parts) {
    if (p.rank() != rank || (rank == 2 && p.dim(0) != rows))
      throw ShapeMismatch("concat: inconsistent shapes");
    widths.push_back(p.dim(rank - 1));
    total += widths.back();
  }
  std::vector<T> out(static_cast<size_t>(rows * total));
  int64_t off = 0;
  for (size_t k = 0; k < parts.size(); ++k) {
    int64_t w = widths[k];
    for (int64_t i = 0; i < rows; ++i)
      for (int64_t j = 0; j < w; ++j)
        out[static_cast<size_t>(i * total + off + j)] =
            parts[k].data()[static_cast<size_t>(i * w + j)];
    off += w;
  }
  Shape shape = rank == 2 ? Shape{rows, total} : Shape{total};
  return make_op<T>("concat", std::move(shape), std::move(out), parts,
                    [parts, widths, rows, total](TensorNode<T>& nd) {
                      int64_t off = 0;
                      for (size_t k = 0; k < parts.size(); ++k) {
                        int64_t w = widths[k];
                        if (parts[k].tracked()) {
                          std::vector<T> g(static_cast<size_t>(rows * w));
                          for (int64_t i = 0; i < rows; ++i)
                            for (int64_t j = 0; j < w; ++j)
                              g[static_cast<size_t>(i * w + j)] =
                                  nd.grad[static_cast<size_t>(i * total + off + j)];
                          parts[k].node()->accum_grad(g);
                        }
                        off += w;
                      }
                    });
}

// inverse of concat, for tests and fused-feature slicing
template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& a, const std::vector<int64_t>& widths) {
  if (a.rank() != 2) throw ShapeMismatch("split: rank-2 tensor required");
  int64_t rows = a.dim(0), total = a.dim(1);
  int64_t sumw = 0;
  for (int64_t w : widths) sumw += w;
  if (sumw != total) throw ShapeMismatch("split: widths do not cover the last axis");
  std::vector<Tensor<T>> out;
  int64_t off = 0;
  for (int64_t w : widths) {
    std::vector<T> v(static_cast<size_t>(rows * w));
    for (int64_t i = 0; i < rows; ++i)
      for (int64_t j = 0; j < w; ++j)
        v[static_cast<size_t>(i * w + j)] = a.data()[static_cast<size_t>(i * total + off + j)];
    int64_t o = off;
    out.push_back(make_op<T>("split", Shape{rows, w}, std::move(v), {a},
                             [a, rows, total, o, w](TensorNode<T>& nd) {
                               std::vector<T> g(a.data().size(), T(0));
                               for (int64_t i = 0; i < rows; ++i)
                                 for (int64_t j = 0; j < w; ++j)
                                   g[static_cast<size_t>(i * total + o + j)] =
                                       nd.grad[static_cast<size_t>(i * w + j)];
                               a.node()->accum_grad(g);
                             }));
    off += w;
  }
  return out;
}

// Row-wise L2 normalization. Rows with norm below 1e-12 map to the zero row
// and propagate zero gradient, so degenerate contrastive batches stay finite.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeMismatch("l2_normalize: rank-2 tensor required");
  int64_t n = a.dim(0), d = a.dim(1);
  std::vector<T> out(a.data().size(), T(0));
  std::vector<T> norms(static_cast<size_t>(n), T(0));
  for (int64_t i = 0; i < n; ++i) {
    double s = 0;
    for (int64_t j = 0; j < d; ++j) {
      double x = a(i, j);
      s += x * x;
    }
    T norm = static_cast<T>(std::sqrt(s));
    norms[static_cast<size_t>(i)] = norm;
    if (norm >= T(1e-12))
      for (int64_t j = 0; j < d; ++j)
        out[static_cast<size_t>(i * d + j)] = a(i, j) / norm;
  }
  auto out_copy = out;
  return make_op<T>("l2_normalize", a.shape(), std::move(out), {a},
                    [a, n, d, norms, y = std::move(out_copy)](TensorNode<T>& nd) {
                      std::vector<T> g(a.data().size(), T(0));
                      for (int64_t i = 0; i < n; ++i) {
                        T norm = norms[static_cast<size_t>(i)];
                        if (norm < T(1e-12)) continue;  // zero row, zero grad
                        T dot = 0;
                        for (int64_t j = 0; j < d; ++j)
                          dot += y[static_cast<size_t>(i * d + j)] *
                                 nd.grad[static_cast<size_t>(i * d + j)];
                        for (int64_t j = 0; j < d; ++j)
                          g[static_cast<size_t>(i * d + j)] =
                              (nd.grad[static_cast<size_t>(i * d + j)] -
                               y[static_cast<size_t>(i * d + j)] * dot) /
                              norm;
                      }
                      a.node()->accum_grad(g);
                    });
}

template <typename U, typename T>
Tensor<U> cast(const Tensor<T>& a) {
  std::vector<U> v(a.data().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<U>(a.data()[i]);
  return Tensor<U>(a.shape(), std::move(v), a.requires_grad());
}

}  // namespace fedmm
