#pragma once

// Dense row-major tensor engine with a small reverse-mode tape.
// The tape records exactly the primitive set used by this project; each
// primitive registers its adjoint when an input requires gradients.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <memory>
#include <thread>
#include <unordered_set>
#include <utility>
#include <vector>

#include "uoe/common.hpp"
#include "uoe/instrumentation.hpp"
#include "uoe/rng.hpp"

namespace uoe {

// ---------------------------------------------------------------------------
// Worker-thread cap. Batched products may shard the batch dimension; every
// shard writes a disjoint output range, so results are independent of the
// thread count.

inline std::size_t& worker_thread_slot() {
  static std::size_t n = [] {
    if (const char* env = std::getenv("UOE_THREADS")) {
      long v = std::atol(env);
      if (v >= 1) return static_cast<std::size_t>(v);
    }
    return std::size_t{1};
  }();
  return n;
}

inline std::size_t worker_threads() { return worker_thread_slot(); }
inline void set_worker_threads(std::size_t n) {
  worker_thread_slot() = (n == 0 ? 1 : n);
}

namespace detail {

template <typename Fn>
void parallel_for(std::size_t count, Fn&& fn) {
  const std::size_t threads = std::min(worker_threads(), count);
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  const std::size_t chunk = (count + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t lo = t * chunk;
    const std::size_t hi = std::min(count, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Raw kernels. Shared by the tape primitives and by the execution-strategy
// benchmarks, so all routes produce bit-identical arithmetic.

namespace kernels {

// c[p x r] = (accumulate ? c : 0) + a[p x q] * b[q x r].
// Products for one output element are summed in ascending k order into a
// stack-resident row; with accumulate the pre-existing value enters last,
// which keeps `bias + a*b` bitwise equal to `a*b` followed by `+ bias`.
template <typename T>
void matmul_nn(const T* a, const T* b, T* c, std::size_t p, std::size_t q,
               std::size_t r, bool accumulate = false) {
  std::vector<T> row(r);
  for (std::size_t i = 0; i < p; ++i) {
    std::fill(row.begin(), row.end(), T(0));
    const T* arow = a + i * q;
    for (std::size_t k = 0; k < q; ++k) {
      const T aik = arow[k];
      const T* brow = b + k * r;
      for (std::size_t j = 0; j < r; ++j) row[j] += aik * brow[j];
    }
    T* crow = c + i * r;
    if (accumulate) {
      for (std::size_t j = 0; j < r; ++j) crow[j] += row[j];
    } else {
      for (std::size_t j = 0; j < r; ++j) crow[j] = row[j];
    }
  }
  op_counters().flops += 2ull * p * q * r;
}

// c[p x r] (+)= a[p x q] * b[r x q]^T
template <typename T>
void matmul_nt(const T* a, const T* b, T* c, std::size_t p, std::size_t q,
               std::size_t r, bool accumulate = false) {
  for (std::size_t i = 0; i < p; ++i) {
    const T* arow = a + i * q;
    for (std::size_t j = 0; j < r; ++j) {
      const T* brow = b + j * q;
      T sum = 0;
      for (std::size_t k = 0; k < q; ++k) sum += arow[k] * brow[k];
      if (accumulate)
        c[i * r + j] += sum;
      else
        c[i * r + j] = sum;
    }
  }
  op_counters().flops += 2ull * p * q * r;
}

// c[q x r] (+)= a[p x q]^T * b[p x r]
template <typename T>
void matmul_tn(const T* a, const T* b, T* c, std::size_t p, std::size_t q,
               std::size_t r, bool accumulate = false) {
  if (!accumulate) std::fill(c, c + q * r, T(0));
  for (std::size_t k = 0; k < p; ++k) {
    const T* arow = a + k * q;
    const T* brow = b + k * r;
    for (std::size_t i = 0; i < q; ++i) {
      const T aki = arow[i];
      T* crow = c + i * r;
      for (std::size_t j = 0; j < r; ++j) crow[j] += aki * brow[j];
    }
  }
  op_counters().flops += 2ull * p * q * r;
}

template <typename T>
void silu_inplace(T* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const T s = T(1) / (T(1) + std::exp(-x[i]));
    x[i] = x[i] * s;
  }
  op_counters().flops += kFlopsPerActElem * n;
}

// Stable softmax of one contiguous row.
template <typename T>
void softmax_row(const T* x, T* y, std::size_t n) {
  T mx = x[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  T sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = std::exp(x[i] - mx);
    sum += y[i];
  }
  const T inv = T(1) / sum;
  for (std::size_t i = 0; i < n; ++i) y[i] *= inv;
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Tape node and Tensor handle.

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void(TensorNode<T>&)> backprop;

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

namespace detail {

template <typename T>
NodePtr<T> make_node(Shape shape) {
  auto node = std::make_shared<TensorNode<T>>();
  node->value.assign(uoe::numel(shape), T(0));
  node->shape = std::move(shape);
  return node;
}

template <typename T>
void check_finite(const std::vector<T>& v) {
#ifndef NDEBUG
  for (T x : v) {
    if (!std::isfinite(static_cast<double>(x)))
      throw Error("non-finite value produced by a forward operation");
  }
#else
  (void)v;
#endif
}

// Wire parents + adjoint when any input carries gradients.
template <typename T>
void connect(const NodePtr<T>& out, std::vector<NodePtr<T>> parents,
             std::function<void(TensorNode<T>&)> backprop) {
  bool needs = false;
  for (const auto& p : parents) needs = needs || p->requires_grad;
  if (!needs) return;
  out->requires_grad = true;
  out->parents = std::move(parents);
  out->backprop = std::move(backprop);
}

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(NodePtr<T> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape) {
    return Tensor(detail::make_node<T>(std::move(shape)));
  }

  static Tensor full(Shape shape, T fill) {
    auto n = detail::make_node<T>(std::move(shape));
    std::fill(n->value.begin(), n->value.end(), fill);
    return Tensor(n);
  }

  static Tensor from_data(Shape shape, std::vector<T> data) {
    if (uoe::numel(shape) != data.size())
      throw ShapeError("from_data: " + uoe::to_string(shape) + " holds " +
                       std::to_string(uoe::numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(n);
  }

  static Tensor uniform(Shape shape, Rng& rng, T lo, T hi) {
    auto n = detail::make_node<T>(std::move(shape));
    for (auto& v : n->value) v = static_cast<T>(rng.next_uniform(lo, hi));
    return Tensor(n);
  }

  static Tensor normal(Shape shape, Rng& rng, T stddev) {
    auto n = detail::make_node<T>(std::move(shape));
    for (auto& v : n->value) v = static_cast<T>(rng.next_normal() * stddev);
    return Tensor(n);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape[i]; }

  const std::vector<T>& data() const { return node_->value; }
  std::vector<T>& mutable_data() { return node_->value; }

  T item() const {
    if (numel() != 1)
      throw ContractError("item() requires a scalar tensor, shape is " +
                          uoe::to_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
  }

  const std::vector<T>& grad() const {
    const_cast<TensorNode<T>*>(node_.get())->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    node_->ensure_grad();
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  const NodePtr<T>& node() const { return node_; }

 private:
  NodePtr<T> node_;
};

// ---------------------------------------------------------------------------
// backward: reverse topological sweep from a scalar loss.

template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw ContractError("backward requires a scalar loss, shape is " +
                        to_string(loss.shape()));
  // Iterative post-order DFS over the parent DAG.
  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> seen;
  std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second)
        stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop(**it);
  }
}

// ---------------------------------------------------------------------------
// Elementwise primitives.

namespace detail {

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a,
                        const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes " + to_string(a.shape()) +
                     " and " + to_string(b.shape()) + " differ");
}

template <typename T>
void accumulate(TensorNode<T>& dst, const std::vector<T>& src) {
  auto& g = dst.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  auto out = detail::make_node<T>(a.shape());
  for (std::size_t i = 0; i < out->value.size(); ++i)
    out->value[i] = a.data()[i] + b.data()[i];
  op_counters().flops += out->value.size();
  detail::check_finite(out->value);
  detail::connect<T>(out, {a.node(), b.node()}, [](TensorNode<T>& self) {
    for (auto& parent : self.parents) {
      if (!parent->requires_grad) continue;
      detail::accumulate(*parent, self.grad);
    }
  });
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a, b);
  auto out = detail::make_node<T>(a.shape());
  for (std::size_t i = 0; i < out->value.size(); ++i)
    out->value[i] = a.data()[i] - b.data()[i];
  op_counters().flops += out->value.size();
  detail::check_finite(out->value);
  detail::connect<T>(out, {a.node(), b.node()}, [](TensorNode<T>& self) {
    if (self.parents[0]->requires_grad)
      detail::accumulate(*self.parents[0], self.grad);
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  auto out = detail::make_node<T>(a.shape());
  for (std::size_t i = 0; i < out->value.size(); ++i)
    out->value[i] = a.data()[i] * b.data()[i];
  op_counters().flops += out->value.size();
  detail::check_finite(out->value);
  detail::connect<T>(out, {a.node(), b.node()}, [](TensorNode<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  auto out = detail::make_node<T>(a.shape());
  for (std::size_t i = 0; i < out->value.size(); ++i)
    out->value[i] = a.data()[i] * factor;
  op_counters().flops += out->value.size();
  detail::check_finite(out->value);
  detail::connect<T>(out, {a.node()}, [factor](TensorNode<T>& self) {
    if (!self.parents[0]->requires_grad) return;
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  auto out = detail::make_node<T>(a.shape());
  for (std::size_t i = 0; i < out->value.size(); ++i) {
    const T x = a.data()[i];
    out->value[i] = x / (T(1) + std::exp(-x));
  }
  op_counters().flops += kFlopsPerActElem * out->value.size();
  detail::check_finite(out->value);
  detail::connect<T>(out, {a.node()}, [](TensorNode<T>& self) {
    if (!self.parents[0]->requires_grad) return;
    const auto& x = self.parents[0]->value;
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = T(1) / (T(1) + std::exp(-x[i]));
      g[i] += self.grad[i] * s * (T(1) + x[i] * (T(1) - s));
    }
  });
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// Shape manipulation. Reshapes and permutes materialize (row-major copies).

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " +
                     to_string(shape));
  auto out = std::make_shared<TensorNode<T>>();
  out->shape = std::move(shape);
  out->value = a.data();
  detail::connect<T>(out, {a.node()}, [](TensorNode<T>& self) {
    if (!self.parents[0]->requires_grad) return;
    detail::accumulate(*self.parents[0], self.grad);
  });
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  if (a.ndim() < 2) throw ShapeError("transpose_last2: need >= 2 dims");
  Shape shape = a.shape();
  const std::size_t q = shape[shape.size() - 1];
  const std::size_t p = shape[shape.size() - 2];
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  const std::size_t batch = a.numel() / (p * q);
  auto out = detail::make_node<T>(std::move(shape));
  for (std::size_t bidx = 0; bidx < batch; ++bidx) {
    const T* src = a.data().data() + bidx * p * q;
    T* dst = out->value.data() + bidx * p * q;
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < q; ++j) dst[j * p + i] = src[i * q + j];
  }
  detail::connect<T>(out, {a.node()}, [p, q, batch](TensorNode<T>& self) {
    if (!self.parents[0]->requires_grad) return;
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t bidx = 0; bidx < batch; ++bidx) {
      const T* src = self.grad.data() + bidx * p * q;
      T* dst = g.data() + bidx * p * q;
      for (std::size_t j = 0; j < q; ++j)
        for (std::size_t i = 0; i < p; ++i) dst[i * q + j] += src[j * p + i];
    }
  });
  return Tensor<T>(out);
}

// Axis permutation for rank-3 tensors (used when splitting heads).
template <typename T>
Tensor<T> permute3(const Tensor<T>& a, std::size_t p0, std::size_t p1,
                   std::size_t p2) {
  if (a.ndim() != 3) throw ShapeError("permute3: need a rank-3 tensor");
  const Shape& s = a.shape();
  Shape out_shape = {s[p0], s[p1], s[p2]};
  auto out = detail::make_node<T>(out_shape);
  const std::size_t stride[3] = {s[1] * s[2], s[2], 1};
  const std::size_t ss[3] = {stride[p0], stride[p1], stride[p2]};
  std::size_t o = 0;
  for (std::size_t i = 0; i < out_shape[0]; ++i)
    for (std::size_t j = 0; j < out_shape[1]; ++j)
      for (std::size_t k = 0; k < out_shape[2]; ++k)
        out->value[o++] = a.data()[i * ss[0] + j * ss[1] + k * ss[2]];
  detail::connect<T>(out, {a.node()},
                     [out_shape, ss](TensorNode<T>& self) {
                       if (!self.parents[0]->requires_grad) return;
                       auto& g = self.parents[0]->ensure_grad();
                       std::size_t o = 0;
                       for (std::size_t i = 0; i < out_shape[0]; ++i)
                         for (std::size_t j = 0; j < out_shape[1]; ++j)
                           for (std::size_t k = 0; k < out_shape[2]; ++k)
                             g[i * ss[0] + j * ss[1] + k * ss[2]] +=
                                 self.grad[o++];
                     });
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> slice_last(const Tensor<T>& a, std::size_t from, std::size_t to) {
  const std::size_t width = a.shape().back();
  if (from > to || to > width)
    throw BoundsError("slice_last: range [" + std::to_string(from) + ", " +
                      std::to_string(to) + ") exceeds width " +
                      std::to_string(width));
  Shape shape = a.shape();
  shape.back() = to - from;
  const std::size_t rows = a.numel() / width;
  const std::size_t span = to - from;
  auto out = detail::make_node<T>(std::move(shape));
  for (std::size_t rw = 0; rw < rows; ++rw)
    std::copy_n(a.data().data() + rw * width + from, span,
                out->value.data() + rw * span);
  detail::connect<T>(out, {a.node()},
                     [rows, width, span, from](TensorNode<T>& self) {
                       if (!self.parents[0]->requires_grad) return;
                       auto& g = self.parents[0]->ensure_grad();
                       for (std::size_t rw = 0; rw < rows; ++rw)
                         for (std::size_t j = 0; j < span; ++j)
                           g[rw * width + from + j] +=
                               self.grad[rw * span + j];
                     });
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != b.ndim())
    throw ShapeError("concat_last: rank mismatch " + to_string(a.shape()) +
                     " vs " + to_string(b.shape()));
  for (std::size_t i = 0; i + 1 < a.ndim(); ++i)
    if (a.dim(i) != b.dim(i))
      throw ShapeError("concat_last: leading dims differ, " +
                       to_string(a.shape()) + " vs " + to_string(b.shape()));
  const std::size_t wa = a.shape().back();
  const std::size_t wb = b.shape().back();
  Shape shape = a.shape();
  shape.back() = wa + wb;
  const std::size_t rows = a.numel() / wa;
  auto out = detail::make_node<T>(std::move(shape));
  for (std::size_t rw = 0; rw < rows; ++rw) {
    std::copy_n(a.data().data() + rw * wa, wa,
                out->value.data() + rw * (wa + wb));
    std::copy_n(b.data().data() + rw * wb, wb,
                out->value.data() + rw * (wa + wb) + wa);
  }
  detail::connect<T>(out, {a.node(), b.node()},
                     [rows, wa, wb](TensorNode<T>& self) {
                       const std::size_t w = wa + wb;
                       if (self.parents[0]->requires_grad) {
                         auto& g = self.parents[0]->ensure_grad();
                         for (std::size_t rw = 0; rw < rows; ++rw)
                           for (std::size_t j = 0; j < wa; ++j)
                             g[rw * wa + j] += self.grad[rw * w + j];
                       }
                       if (self.parents[1]->requires_grad) {
                         auto& g = self.parents[1]->ensure_grad();
                         for (std::size_t rw = 0; rw < rows; ++rw)
                           for (std::size_t j = 0; j < wb; ++j)
                             g[rw * wb + j] += self.grad[rw * w + wa + j];
                       }
                     });
  return Tensor<T>(out);
}

// Pull one sample out of the leading batch axis (plain data movement; the
// routed gathers keep their own pass counters).
template <typename T>
Tensor<T> select_batch(const Tensor<T>& a, std::size_t s) {
  if (a.ndim() < 2) throw ShapeError("select_batch: need a batch axis");
  if (s >= a.dim(0))
    throw BoundsError("select_batch: sample " + std::to_string(s) +
                      " out of range [0, " + std::to_string(a.dim(0)) + ")");
  Shape shape(a.shape().begin() + 1, a.shape().end());
  const std::size_t span = numel(shape);
  auto out = detail::make_node<T>(std::move(shape));
  std::copy_n(a.data().data() + s * span, span, out->value.data());
  detail::connect<T>(out, {a.node()}, [s, span](TensorNode<T>& self) {
    if (!self.parents[0]->requires_grad) return;
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t j = 0; j < span; ++j) g[s * span + j] += self.grad[j];
  });
  return Tensor<T>(out);
}

// Join equal-shaped tensors along a new leading batch axis.
template <typename T>
Tensor<T> stack_batch(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ShapeError("stack_batch: nothing to stack");
  const Shape& inner = xs[0].shape();
  for (const auto& x : xs)
    if (x.shape() != inner)
      throw ShapeError("stack_batch: mismatched shapes " + to_string(inner) +
                       " vs " + to_string(x.shape()));
  Shape shape;
  shape.reserve(inner.size() + 1);
  shape.push_back(xs.size());
  shape.insert(shape.end(), inner.begin(), inner.end());
  const std::size_t span = numel(inner);
  auto out = detail::make_node<T>(std::move(shape));
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  parents.reserve(xs.size());
  for (std::size_t s = 0; s < xs.size(); ++s) {
    std::copy_n(xs[s].data().data(), span, out->value.data() + s * span);
    parents.push_back(xs[s].node());
  }
  detail::connect<T>(out, std::move(parents), [span](TensorNode<T>& self) {
    for (std::size_t s = 0; s < self.parents.size(); ++s) {
      if (!self.parents[s]->requires_grad) continue;
      auto& g = self.parents[s]->ensure_grad();
      for (std::size_t j = 0; j < span; ++j) g[j] += self.grad[s * span + j];
    }
  });
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// Batched matrix products. Operands are rank 2 (implicit batch of one) or
// rank 3; a singleton batch broadcasts against the other operand.

namespace detail {

struct BatchedDims {
  std::size_t batch, p, q, r;
  bool a_broadcast, b_broadcast;
  bool rank2_out;
};

template <typename T>
BatchedDims batched_dims(const char* op, const Tensor<T>& a,
                         const Tensor<T>& b) {
  if ((a.ndim() != 2 && a.ndim() != 3) || (b.ndim() != 2 && b.ndim() != 3))
    throw ShapeError(std::string(op) + ": operands must be rank 2 or 3, got " +
                     to_string(a.shape()) + " and " + to_string(b.shape()));
  const std::size_t ba = a.ndim() == 3 ? a.dim(0) : 1;
  const std::size_t bb = b.ndim() == 3 ? b.dim(0) : 1;
  const std::size_t p = a.dim(a.ndim() - 2), qa = a.dim(a.ndim() - 1);
  const std::size_t qb = b.dim(b.ndim() - 2), r = b.dim(b.ndim() - 1);
  if (qa != qb || (ba != bb && ba != 1 && bb != 1))
    throw ShapeError(std::string(op) + ": incompatible shapes " +
                     to_string(a.shape()) + " and " + to_string(b.shape()));
  BatchedDims d;
  d.batch = std::max(ba, bb);
  d.p = p;
  d.q = qa;
  d.r = r;
  d.a_broadcast = (ba == 1 && d.batch > 1);
  d.b_broadcast = (bb == 1 && d.batch > 1);
  d.rank2_out = (a.ndim() == 2 && b.ndim() == 2);
  return d;
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto d = detail::batched_dims("matmul", a, b);
  Shape out_shape = d.rank2_out ? Shape{d.p, d.r} : Shape{d.batch, d.p, d.r};
  auto out = detail::make_node<T>(std::move(out_shape));
  detail::parallel_for(d.batch, [&](std::size_t i) {
    const T* pa = a.data().data() + (d.a_broadcast ? 0 : i * d.p * d.q);
    const T* pb = b.data().data() + (d.b_broadcast ? 0 : i * d.q * d.r);
    kernels::matmul_nn(pa, pb, out->value.data() + i * d.p * d.r, d.p, d.q,
                       d.r);
  });
  detail::check_finite(out->value);
  detail::connect<T>(out, {a.node(), b.node()}, [d](TensorNode<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < d.batch; ++i) {
        // dA = dC * B^T; a broadcast operand accumulates over batches.
        kernels::matmul_nt(self.grad.data() + i * d.p * d.r,
                           bv.data() + (d.b_broadcast ? 0 : i * d.q * d.r),
                           g.data() + (d.a_broadcast ? 0 : i * d.p * d.q), d.p,
                           d.r, d.q, true);
      }
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < d.batch; ++i) {
        // dB = A^T * dC
        kernels::matmul_tn(av.data() + (d.a_broadcast ? 0 : i * d.p * d.q),
                           self.grad.data() + i * d.p * d.r,
                           g.data() + (d.b_broadcast ? 0 : i * d.q * d.r), d.p,
                           d.q, d.r, true);
      }
    }
  });
  return Tensor<T>(out);
}

// bias + a*b in one output pass: the bias values seed the output buffer and
// each element is finished with a single read-modify-write.
template <typename T>
Tensor<T> fused_multiply_accumulate(const Tensor<T>& bias, const Tensor<T>& a,
                                    const Tensor<T>& b) {
  const auto d = detail::batched_dims("fused_multiply_accumulate", a, b);
  Shape out_shape = d.rank2_out ? Shape{d.p, d.r} : Shape{d.batch, d.p, d.r};
  if (bias.shape() != out_shape)
    throw ShapeError("fused_multiply_accumulate: bias " +
                     to_string(bias.shape()) + " does not match output " +
                     to_string(out_shape));
  auto out = std::make_shared<TensorNode<T>>();
  out->shape = std::move(out_shape);
  out->value = bias.data();
  detail::parallel_for(d.batch, [&](std::size_t i) {
    const T* pa = a.data().data() + (d.a_broadcast ? 0 : i * d.p * d.q);
    const T* pb = b.data().data() + (d.b_broadcast ? 0 : i * d.q * d.r);
    kernels::matmul_nn(pa, pb, out->value.data() + i * d.p * d.r, d.p, d.q,
                       d.r, true);
  });
  detail::check_finite(out->value);
  detail::connect<T>(
      out, {bias.node(), a.node(), b.node()}, [d](TensorNode<T>& self) {
        const auto& av = self.parents[1]->value;
        const auto& bv = self.parents[2]->value;
        if (self.parents[0]->requires_grad)
          detail::accumulate(*self.parents[0], self.grad);
        if (self.parents[1]->requires_grad) {
          auto& g = self.parents[1]->ensure_grad();
          for (std::size_t i = 0; i < d.batch; ++i)
            kernels::matmul_nt(self.grad.data() + i * d.p * d.r,
                               bv.data() + (d.b_broadcast ? 0 : i * d.q * d.r),
                               g.data() + (d.a_broadcast ? 0 : i * d.p * d.q),
                               d.p, d.r, d.q, true);
        }
        if (self.parents[2]->requires_grad) {
          auto& g = self.parents[2]->ensure_grad();
          for (std::size_t i = 0; i < d.batch; ++i)
            kernels::matmul_tn(av.data() + (d.a_broadcast ? 0 : i * d.p * d.q),
                               self.grad.data() + i * d.p * d.r,
                               g.data() + (d.b_broadcast ? 0 : i * d.q * d.r),
                               d.p, d.q, d.r, true);
        }
      });
  return Tensor<T>(out);
}

// Grouped product over contiguous row segments: rows [offsets[i], offsets[i+1])
// of x are multiplied by weights[i]. Encodes ragged per-expert batches in one
// operation.
template <typename T>
Tensor<T> segment_matmul(const Tensor<T>& x, const Tensor<T>& weights,
                         const std::vector<std::size_t>& offsets) {
  if (x.ndim() != 2 || weights.ndim() != 3)
    throw ShapeError("segment_matmul: expected x rank 2 and weights rank 3");
  const std::size_t rows = x.dim(0), q = x.dim(1);
  const std::size_t n = weights.dim(0), wq = weights.dim(1),
                    r = weights.dim(2);
  if (wq != q || offsets.size() != n + 1 || offsets.front() != 0 ||
      offsets.back() != rows)
    throw ShapeError("segment_matmul: offsets inconsistent with x " +
                     to_string(x.shape()) + " and weights " +
                     to_string(weights.shape()));
  auto out = detail::make_node<T>(Shape{rows, r});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lo = offsets[i], hi = offsets[i + 1];
    if (hi < lo || hi > rows) throw BoundsError("segment_matmul: bad offsets");
    if (hi == lo) continue;
    kernels::matmul_nn(x.data().data() + lo * q,
                       weights.data().data() + i * q * r,
                       out->value.data() + lo * r, hi - lo, q, r);
  }
  detail::check_finite(out->value);
  detail::connect<T>(
      out, {x.node(), weights.node()},
      [offsets, n, q, r](TensorNode<T>& self) {
        const auto& xv = self.parents[0]->value;
        const auto& wv = self.parents[1]->value;
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t lo = offsets[i], rows_i = offsets[i + 1] - lo;
          if (!rows_i) continue;
          if (self.parents[0]->requires_grad)
            kernels::matmul_nt(self.grad.data() + lo * r,
                               wv.data() + i * q * r,
                               self.parents[0]->ensure_grad().data() + lo * q,
                               rows_i, r, q, true);
          if (self.parents[1]->requires_grad)
            kernels::matmul_tn(xv.data() + lo * q, self.grad.data() + lo * r,
                               self.parents[1]->ensure_grad().data() + i * q * r,
                               rows_i, q, r, true);
        }
      });
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// Reductions and normalization.

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  auto out = detail::make_node<T>(Shape{1});
  T acc = 0;
  for (T v : a.data()) acc += v;
  out->value[0] = acc;
  op_counters().flops += a.numel();
  detail::check_finite(out->value);
  detail::connect<T>(out, {a.node()}, [](TensorNode<T>& self) {
    if (!self.parents[0]->requires_grad) return;
    auto& g = self.parents[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.ndim())
    throw BoundsError("mean_axis: axis " + std::to_string(axis) +
                      " out of range for " + to_string(a.shape()));
  const Shape& s = a.shape();
  Shape out_shape;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i < axis) outer *= s[i];
    if (i > axis) inner *= s[i];
    if (i != axis) out_shape.push_back(s[i]);
  }
  const std::size_t n = s[axis];
  auto out = detail::make_node<T>(std::move(out_shape));
  const T inv = T(1) / static_cast<T>(n);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t t = 0; t < n; ++t) {
      const T* src = a.data().data() + (o * n + t) * inner;
      T* dst = out->value.data() + o * inner;
      for (std::size_t j = 0; j < inner; ++j) dst[j] += src[j] * inv;
    }
  op_counters().flops += a.numel();
  detail::check_finite(out->value);
  detail::connect<T>(out, {a.node()},
                     [outer, n, inner, inv](TensorNode<T>& self) {
                       if (!self.parents[0]->requires_grad) return;
                       auto& g = self.parents[0]->ensure_grad();
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t t = 0; t < n; ++t) {
                           T* dst = g.data() + (o * n + t) * inner;
                           const T* src = self.grad.data() + o * inner;
                           for (std::size_t j = 0; j < inner; ++j)
                             dst[j] += src[j] * inv;
                         }
                     });
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.ndim())
    throw BoundsError("softmax: axis " + std::to_string(axis) +
                      " out of range for " + to_string(a.shape()));
  const Shape& s = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  auto out = detail::make_node<T>(a.shape());
  auto at = [n, inner](std::size_t o, std::size_t t, std::size_t j) {
    return (o * n + t) * inner + j;
  };
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < inner; ++j) {
      T mx = a.data()[at(o, 0, j)];
      for (std::size_t t = 1; t < n; ++t)
        mx = std::max(mx, a.data()[at(o, t, j)]);
      T sum = 0;
      for (std::size_t t = 0; t < n; ++t) {
        const T e = std::exp(a.data()[at(o, t, j)] - mx);
        out->value[at(o, t, j)] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (std::size_t t = 0; t < n; ++t) out->value[at(o, t, j)] *= inv;
    }
  op_counters().flops += kFlopsPerSoftmaxElem * a.numel();
  detail::check_finite(out->value);
  detail::connect<T>(out, {a.node()},
                     [outer, n, inner, at](TensorNode<T>& self) {
                       if (!self.parents[0]->requires_grad) return;
                       auto& g = self.parents[0]->ensure_grad();
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t j = 0; j < inner; ++j) {
                           T dot = 0;
                           for (std::size_t t = 0; t < n; ++t)
                             dot += self.grad[at(o, t, j)] *
                                    self.value[at(o, t, j)];
                           for (std::size_t t = 0; t < n; ++t)
                             g[at(o, t, j)] +=
                                 self.value[at(o, t, j)] *
                                 (self.grad[at(o, t, j)] - dot);
                         }
                     });
  return Tensor<T>(out);
}

// Softmax over the last axis restricted to allowed positions. A row with no
// allowed position yields zeros (counted, not NaN).
template <typename T>
Tensor<T> masked_softmax_last(const Tensor<T>& a,
                              const std::vector<std::uint8_t>& allowed) {
  if (allowed.size() != a.numel())
    throw ShapeError("masked_softmax_last: mask size " +
                     std::to_string(allowed.size()) + " does not cover " +
                     to_string(a.shape()));
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.numel() / n;
  auto out = detail::make_node<T>(a.shape());
  for (std::size_t rw = 0; rw < rows; ++rw) {
    const T* x = a.data().data() + rw * n;
    const std::uint8_t* m = allowed.data() + rw * n;
    T* y = out->value.data() + rw * n;
    T mx = 0;
    bool any = false;
    for (std::size_t j = 0; j < n; ++j)
      if (m[j]) {
        mx = any ? std::max(mx, x[j]) : x[j];
        any = true;
      }
    if (!any) {
      ++op_counters().masked_rows_zeroed;
      continue;  // already zero
    }
    T sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (m[j]) {
        y[j] = std::exp(x[j] - mx);
        sum += y[j];
      }
    }
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < n; ++j) y[j] *= inv;
  }
  op_counters().flops += kFlopsPerSoftmaxElem * a.numel();
  detail::check_finite(out->value);
  detail::connect<T>(out, {a.node()}, [rows, n](TensorNode<T>& self) {
    if (!self.parents[0]->requires_grad) return;
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t rw = 0; rw < rows; ++rw) {
      const T* y = self.value.data() + rw * n;
      const T* dy = self.grad.data() + rw * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
      // Masked positions have y == 0 and receive zero gradient.
      for (std::size_t j = 0; j < n; ++j)
        g[rw * n + j] += y[j] * (dy[j] - dot);
    }
  });
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// Index selection / addition: the routing primitives. Each call is one
// gather (resp. scatter) memory pass over the uniformly encoded index list.

template <typename T>
Tensor<T> index_select(const Tensor<T>& a, std::size_t axis,
                       const std::vector<std::size_t>& idx) {
  if (axis >= a.ndim())
    throw BoundsError("index_select: axis " + std::to_string(axis) +
                      " out of range for " + to_string(a.shape()));
  const Shape& s = a.shape();
  const std::size_t bound = s[axis];
  for (std::size_t v : idx)
    if (v >= bound)
      throw BoundsError("index_select: index " + std::to_string(v) +
                        " out of range [0, " + std::to_string(bound) + ")");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape out_shape = s;
  out_shape[axis] = idx.size();
  auto out = detail::make_node<T>(std::move(out_shape));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t t = 0; t < idx.size(); ++t)
      std::copy_n(a.data().data() + (o * bound + idx[t]) * inner, inner,
                  out->value.data() + (o * idx.size() + t) * inner);
  ++op_counters().gather_passes;
  op_counters().flops += kFlopsPerIndexElem * out->value.size();
  detail::connect<T>(out, {a.node()},
                     [outer, inner, bound, idx](TensorNode<T>& self) {
                       if (!self.parents[0]->requires_grad) return;
                       auto& g = self.parents[0]->ensure_grad();
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t t = 0; t < idx.size(); ++t) {
                           const T* src =
                               self.grad.data() + (o * idx.size() + t) * inner;
                           T* dst = g.data() + (o * bound + idx[t]) * inner;
                           for (std::size_t j = 0; j < inner; ++j)
                             dst[j] += src[j];
                         }
                     });
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> index_add(const Tensor<T>& base, std::size_t axis,
                    const std::vector<std::size_t>& idx,
                    const Tensor<T>& values) {
  if (axis >= base.ndim())
    throw BoundsError("index_add: axis " + std::to_string(axis) +
                      " out of range for " + to_string(base.shape()));
  const Shape& s = base.shape();
  const std::size_t bound = s[axis];
  for (std::size_t v : idx)
    if (v >= bound)
      throw BoundsError("index_add: index " + std::to_string(v) +
                        " out of range [0, " + std::to_string(bound) + ")");
  Shape expect = s;
  expect[axis] = idx.size();
  if (values.shape() != expect)
    throw ShapeError("index_add: values " + to_string(values.shape()) +
                     " do not match " + std::to_string(idx.size()) +
                     " slices of " + to_string(base.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  auto out = std::make_shared<TensorNode<T>>();
  out->shape = s;
  out->value = base.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t t = 0; t < idx.size(); ++t) {
      const T* src = values.data().data() + (o * idx.size() + t) * inner;
      T* dst = out->value.data() + (o * bound + idx[t]) * inner;
      for (std::size_t j = 0; j < inner; ++j) dst[j] += src[j];
    }
  ++op_counters().scatter_passes;
  op_counters().flops += kFlopsPerIndexElem * values.numel();
  detail::check_finite(out->value);
  detail::connect<T>(out, {base.node(), values.node()},
                     [outer, inner, bound, idx](TensorNode<T>& self) {
                       if (self.parents[0]->requires_grad)
                         detail::accumulate(*self.parents[0], self.grad);
                       if (self.parents[1]->requires_grad) {
                         auto& g = self.parents[1]->ensure_grad();
                         for (std::size_t o = 0; o < outer; ++o)
                           for (std::size_t t = 0; t < idx.size(); ++t) {
                             const T* src =
                                 self.grad.data() + (o * bound + idx[t]) * inner;
                             T* dst = g.data() + (o * idx.size() + t) * inner;
                             for (std::size_t j = 0; j < inner; ++j)
                               dst[j] += src[j];
                           }
                       }
                     });
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// Broadcast-style bias adds (the only broadcasts beyond a singleton batch).

// x[..., C] + b[C]
template <typename T>
Tensor<T> add_bias_last(const Tensor<T>& x, const Tensor<T>& b) {
  const std::size_t c = x.shape().back();
  if (b.ndim() != 1 || b.dim(0) != c)
    throw ShapeError("add_bias_last: bias " + to_string(b.shape()) +
                     " does not match last dim of " + to_string(x.shape()));
  const std::size_t rows = x.numel() / c;
  auto out = detail::make_node<T>(x.shape());
  for (std::size_t rw = 0; rw < rows; ++rw)
    for (std::size_t j = 0; j < c; ++j)
      out->value[rw * c + j] = x.data()[rw * c + j] + b.data()[j];
  op_counters().flops += x.numel();
  detail::check_finite(out->value);
  detail::connect<T>(out, {x.node(), b.node()},
                     [rows, c](TensorNode<T>& self) {
                       if (self.parents[0]->requires_grad)
                         detail::accumulate(*self.parents[0], self.grad);
                       if (self.parents[1]->requires_grad) {
                         auto& g = self.parents[1]->ensure_grad();
                         for (std::size_t rw = 0; rw < rows; ++rw)
                           for (std::size_t j = 0; j < c; ++j)
                             g[j] += self.grad[rw * c + j];
                       }
                     });
  return Tensor<T>(out);
}

// x[B, R, C] + b[B, C]: per-batch row vector.
template <typename T>
Tensor<T> add_bias_batched(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.ndim() != 3 || b.ndim() != 2 || x.dim(0) != b.dim(0) ||
      x.dim(2) != b.dim(1))
    throw ShapeError("add_bias_batched: " + to_string(x.shape()) + " vs " +
                     to_string(b.shape()));
  const std::size_t bn = x.dim(0), rows = x.dim(1), c = x.dim(2);
  auto out = detail::make_node<T>(x.shape());
  for (std::size_t i = 0; i < bn; ++i)
    for (std::size_t rw = 0; rw < rows; ++rw)
      for (std::size_t j = 0; j < c; ++j)
        out->value[(i * rows + rw) * c + j] =
            x.data()[(i * rows + rw) * c + j] + b.data()[i * c + j];
  op_counters().flops += x.numel();
  detail::check_finite(out->value);
  detail::connect<T>(out, {x.node(), b.node()},
                     [bn, rows, c](TensorNode<T>& self) {
                       if (self.parents[0]->requires_grad)
                         detail::accumulate(*self.parents[0], self.grad);
                       if (self.parents[1]->requires_grad) {
                         auto& g = self.parents[1]->ensure_grad();
                         for (std::size_t i = 0; i < bn; ++i)
                           for (std::size_t rw = 0; rw < rows; ++rw)
                             for (std::size_t j = 0; j < c; ++j)
                               g[i * c + j] +=
                                   self.grad[(i * rows + rw) * c + j];
                       }
                     });
  return Tensor<T>(out);
}

// Multiply trailing blocks of x by s, where s matches a leading prefix of
// x's shape (used to scale expert outputs by their gate values).
template <typename T>
Tensor<T> scale_slices(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.ndim() > x.ndim())
    throw ShapeError("scale_slices: scale rank exceeds input rank");
  for (std::size_t i = 0; i < s.ndim(); ++i)
    if (s.dim(i) != x.dim(i))
      throw ShapeError("scale_slices: " + to_string(s.shape()) +
                       " is not a prefix of " + to_string(x.shape()));
  const std::size_t blocks = s.numel();
  const std::size_t span = x.numel() / blocks;
  auto out = detail::make_node<T>(x.shape());
  for (std::size_t i = 0; i < blocks; ++i) {
    const T f = s.data()[i];
    for (std::size_t j = 0; j < span; ++j)
      out->value[i * span + j] = x.data()[i * span + j] * f;
  }
  op_counters().flops += x.numel();
  detail::check_finite(out->value);
  detail::connect<T>(out, {x.node(), s.node()},
                     [blocks, span](TensorNode<T>& self) {
                       const auto& xv = self.parents[0]->value;
                       const auto& sv = self.parents[1]->value;
                       if (self.parents[0]->requires_grad) {
                         auto& g = self.parents[0]->ensure_grad();
                         for (std::size_t i = 0; i < blocks; ++i)
                           for (std::size_t j = 0; j < span; ++j)
                             g[i * span + j] +=
                                 self.grad[i * span + j] * sv[i];
                       }
                       if (self.parents[1]->requires_grad) {
                         auto& g = self.parents[1]->ensure_grad();
                         for (std::size_t i = 0; i < blocks; ++i) {
                           T acc = 0;
                           for (std::size_t j = 0; j < span; ++j)
                             acc += self.grad[i * span + j] * xv[i * span + j];
                           g[i] += acc;
                         }
                       }
                     });
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// Layer normalization over the last axis with affine parameters.

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  const std::size_t c = x.shape().back();
  if (gamma.ndim() != 1 || gamma.dim(0) != c || beta.ndim() != 1 ||
      beta.dim(0) != c)
    throw ShapeError("layer_norm: affine params must be length " +
                     std::to_string(c));
  const std::size_t rows = x.numel() / c;
  auto out = detail::make_node<T>(x.shape());
  for (std::size_t rw = 0; rw < rows; ++rw) {
    const T* xi = x.data().data() + rw * c;
    T* yi = out->value.data() + rw * c;
    T mean = 0;
    for (std::size_t j = 0; j < c; ++j) mean += xi[j];
    mean /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const T d = xi[j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(c);
    const T inv = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j)
      yi[j] = (xi[j] - mean) * inv * gamma.data()[j] + beta.data()[j];
  }
  op_counters().flops += kFlopsPerNormElem * x.numel();
  detail::check_finite(out->value);
  detail::connect<T>(
      out, {x.node(), gamma.node(), beta.node()},
      [rows, c, eps](TensorNode<T>& self) {
        const auto& xv = self.parents[0]->value;
        const auto& gv = self.parents[1]->value;
        for (std::size_t rw = 0; rw < rows; ++rw) {
          const T* xi = xv.data() + rw * c;
          const T* dy = self.grad.data() + rw * c;
          T mean = 0;
          for (std::size_t j = 0; j < c; ++j) mean += xi[j];
          mean /= static_cast<T>(c);
          T var = 0;
          for (std::size_t j = 0; j < c; ++j) {
            const T d = xi[j] - mean;
            var += d * d;
          }
          var /= static_cast<T>(c);
          const T inv = T(1) / std::sqrt(var + eps);
          if (self.parents[1]->requires_grad || self.parents[2]->requires_grad) {
            auto& dgamma = self.parents[1]->ensure_grad();
            auto& dbeta = self.parents[2]->ensure_grad();
            for (std::size_t j = 0; j < c; ++j) {
              dgamma[j] += dy[j] * (xi[j] - mean) * inv;
              dbeta[j] += dy[j];
            }
          }
          if (self.parents[0]->requires_grad) {
            auto& dx = self.parents[0]->ensure_grad();
            T sum_dxhat = 0, sum_dxhat_xhat = 0;
            for (std::size_t j = 0; j < c; ++j) {
              const T xhat = (xi[j] - mean) * inv;
              const T dxhat = dy[j] * gv[j];
              sum_dxhat += dxhat;
              sum_dxhat_xhat += dxhat * xhat;
            }
            const T invc = T(1) / static_cast<T>(c);
            for (std::size_t j = 0; j < c; ++j) {
              const T xhat = (xi[j] - mean) * inv;
              const T dxhat = dy[j] * gv[j];
              dx[rw * c + j] += inv * (dxhat - invc * sum_dxhat -
                                       xhat * invc * sum_dxhat_xhat);
            }
          }
        }
      });
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// Rotary position embedding over the full last axis. Adjacent feature pairs
// (2i, 2i+1) rotate by pos * theta_base^(-2i/d); the adjoint rotates back.
// positions has one entry per row of the last-but-one axis, or one entry per
// (batch, row) pair when it covers the whole leading extent.

template <typename T>
Tensor<T> apply_rope(const Tensor<T>& x,
                     const std::vector<std::size_t>& positions,
                     double theta_base) {
  if (x.ndim() < 2) throw ShapeError("apply_rope: need >= 2 dims");
  const std::size_t dr = x.shape().back();
  if (dr % 2 != 0)
    throw ConfigError("apply_rope: rotated width " + std::to_string(dr) +
                      " must be even");
  const std::size_t rows = x.numel() / dr;
  const std::size_t seq = x.dim(x.ndim() - 2);
  if (positions.size() != rows && positions.size() != seq)
    throw ShapeError("apply_rope: positions length " +
                     std::to_string(positions.size()) + " matches neither " +
                     std::to_string(seq) + " nor " + std::to_string(rows));
  const bool per_row = positions.size() == rows;
  const std::size_t half = dr / 2;
  std::vector<double> inv_freq(half);
  for (std::size_t i = 0; i < half; ++i)
    inv_freq[i] = std::pow(theta_base, -2.0 * static_cast<double>(i) /
                                           static_cast<double>(dr));
  auto rotate = [rows, seq, dr, half, per_row, inv_freq, positions](
                    const std::vector<T>& src, std::vector<T>& dst,
                    double sign) {
    for (std::size_t rw = 0; rw < rows; ++rw) {
      const std::size_t pos = per_row ? positions[rw] : positions[rw % seq];
      const T* xi = src.data() + rw * dr;
      T* yi = dst.data() + rw * dr;
      for (std::size_t i = 0; i < half; ++i) {
        const double angle = sign * static_cast<double>(pos) * inv_freq[i];
        const T cs = static_cast<T>(std::cos(angle));
        const T sn = static_cast<T>(std::sin(angle));
        const T a = xi[2 * i], b = xi[2 * i + 1];
        yi[2 * i] = a * cs - b * sn;
        yi[2 * i + 1] = a * sn + b * cs;
      }
    }
  };
  auto out = detail::make_node<T>(x.shape());
  rotate(x.data(), out->value, 1.0);
  op_counters().flops += kFlopsPerRopeElem * x.numel();
  detail::check_finite(out->value);
  detail::connect<T>(out, {x.node()}, [rotate](TensorNode<T>& self) {
    if (!self.parents[0]->requires_grad) return;
    std::vector<T> dx(self.grad.size());
    rotate(self.grad, dx, -1.0);
    detail::accumulate(*self.parents[0], dx);
  });
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// Cross entropy (mean NLL) over [L, V] logits with integer targets.

template <typename T>
Tensor<T> cross_entropy_mean(const Tensor<T>& logits,
                             const std::vector<std::size_t>& targets) {
  if (logits.ndim() != 2)
    throw ShapeError("cross_entropy_mean: logits must be [L, V], got " +
                     to_string(logits.shape()));
  const std::size_t rows = logits.dim(0), v = logits.dim(1);
  if (targets.size() != rows)
    throw ShapeError("cross_entropy_mean: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(rows) + " rows");
  for (std::size_t t : targets)
    if (t >= v)
      throw BoundsError("cross_entropy_mean: target " + std::to_string(t) +
                        " out of range [0, " + std::to_string(v) + ")");
  auto out = detail::make_node<T>(Shape{1});
  T total = 0;
  for (std::size_t rw = 0; rw < rows; ++rw) {
    const T* x = logits.data().data() + rw * v;
    T mx = x[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, x[j]);
    T sum = 0;
    for (std::size_t j = 0; j < v; ++j) sum += std::exp(x[j] - mx);
    total += std::log(sum) + mx - x[targets[rw]];
  }
  out->value[0] = total / static_cast<T>(rows);
  op_counters().flops += kFlopsPerCrossEntropyElem * logits.numel();
  detail::check_finite(out->value);
  detail::connect<T>(out, {logits.node()},
                     [rows, v, targets](TensorNode<T>& self) {
                       if (!self.parents[0]->requires_grad) return;
                       const auto& x = self.parents[0]->value;
                       auto& g = self.parents[0]->ensure_grad();
                       const T gscale = self.grad[0] / static_cast<T>(rows);
                       std::vector<T> p(v);
                       for (std::size_t rw = 0; rw < rows; ++rw) {
                         kernels::softmax_row(x.data() + rw * v, p.data(), v);
                         for (std::size_t j = 0; j < v; ++j)
                           g[rw * v + j] += gscale * p[j];
                         g[rw * v + targets[rw]] -= gscale;
                       }
                     });
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// Small conveniences used by tests and oracles.

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("max_abs_diff: shapes differ, " + to_string(a.shape()) +
                     " vs " + to_string(b.shape()));
  double mx = 0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    mx = std::max(mx, std::abs(static_cast<double>(a.data()[i]) -
                               static_cast<double>(b.data()[i])));
  return mx;
}

template <typename T>
double max_abs(const Tensor<T>& a) {
  double mx = 0;
  for (T v : a.data()) mx = std::max(mx, std::abs(static_cast<double>(v)));
  return mx;
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& a) {
  std::vector<To> data(a.numel());
  for (std::size_t i = 0; i < a.numel(); ++i)
    data[i] = static_cast<To>(a.data()[i]);
  return Tensor<To>::from_data(a.shape(), std::move(data));
}

}  // namespace uoe
