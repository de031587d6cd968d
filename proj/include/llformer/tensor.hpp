// Copyright 2026 The llformer-cpp Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "llformer/errors.hpp"

namespace llformer {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

namespace detail {
inline std::uint64_t*& mac_sink() {
  thread_local std::uint64_t* sink = nullptr;
  return sink;
}
inline void count_macs(std::uint64_t n) {
  if (mac_sink()) *mac_sink() += n;
}
}  // namespace detail

/// Tallies the multiply-accumulates performed by forward conv2d and matmul
/// calls on this thread while alive.
class MacCounter {
 public:
  MacCounter() : previous_(detail::mac_sink()) { detail::mac_sink() = &count_; }
  ~MacCounter() { detail::mac_sink() = previous_; }
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;
  std::uint64_t count() const { return count_; }

 private:
  std::uint64_t count_ = 0;
  std::uint64_t* previous_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Tensor storage. Eigen peels a data-dependent number of leading elements
/// to reach packet alignment, so buffers start on a packet boundary to keep
/// results independent of where the allocator put them.
template <typename T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

/// One vertex of the autodiff tape. Non-leaf nodes own a backward rule that
/// reads `grad` and accumulates into the grads of `parents`.
template <typename T>
struct Node {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Node&)> backward;

  T* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

/// Dense row-major tensor handle. Copies share the underlying node; every
/// operation produces a fresh node, so a tensor's values never change after
/// construction except through `mutable_data()` on leaves (optimizer steps,
/// initialization, finite differencing).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, Buffer<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (llformer::numel(shape) != data.size()) {
      throw DimensionError("tensor: data length " + std::to_string(data.size()) +
                           " does not match shape " + llformer::to_string(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }
  Tensor(Shape shape, const std::vector<T>& data, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer<T>(data.begin(), data.end()), requires_grad) {}
  Tensor(Shape shape, std::initializer_list<T> data, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer<T>(data), requires_grad) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = llformer::numel(shape);
    return Tensor(std::move(shape), Buffer<T>(n, T(0)), requires_grad);
  }
  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const std::size_t n = llformer::numel(shape);
    return Tensor(std::move(shape), Buffer<T>(n, value), requires_grad);
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{}, Buffer<T>{value}, requires_grad);
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  /// Whole-buffer mutation. Only meaningful on leaves.
  std::span<T> mutable_data() { return node_->data; }

  T item() const {
    if (numel() != 1) throw DimensionError("item: tensor has " + std::to_string(numel()) + " elements");
    return node_->data[0];
  }

  T at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw DimensionError("at: index rank does not match tensor rank");
    std::size_t offset = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) {
      if (i >= node_->shape[axis]) throw DimensionError("at: index out of range on axis " + std::to_string(axis));
      offset = offset * node_->shape[axis] + i;
      ++axis;
    }
    return node_->data[offset];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  /// Gradient from the most recent `backward`; zeros when the tensor was not reached.
  Tensor grad() const {
    if (node_->grad.empty()) return zeros(shape());
    return Tensor(shape(), node_->grad);
  }
  std::span<const T> grad_data() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Value copy with no history.
  Tensor detach() const { return Tensor(shape(), node_->data); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return Tensor<U>(shape(), std::move(out));
  }

  const std::shared_ptr<Node<T>>& node() const { return node_; }
  const Node<T>* id() const { return node_.get(); }

 private:
  std::shared_ptr<Node<T>> node_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

namespace detail {

template <typename T>
using BackwardFn = std::function<void(const Node<T>&)>;

// Builds an op result. The tape edge is recorded only when grad mode is on and
// some input is tracked; otherwise the closure (and the inputs it pins) is dropped.
template <typename T>
Tensor<T> make_result(Shape shape, Buffer<T> data, const char* op,
                      std::initializer_list<const Tensor<T>*> inputs, BackwardFn<T> fn) {
  Tensor<T> out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool tracked = false;
  for (const Tensor<T>* in : inputs) tracked = tracked || (in->defined() && in->requires_grad());
  if (!tracked) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.op = op;
  for (const Tensor<T>* in : inputs) {
    if (in->defined()) node.parents.push_back(in->node());
  }
  node.backward = std::move(fn);
  return out;
}

template <typename T>
Tensor<T> make_result(Shape shape, Buffer<T> data, const char* op,
                      const std::vector<Tensor<T>>& inputs, BackwardFn<T> fn) {
  Tensor<T> out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool tracked = false;
  for (const auto& in : inputs) tracked = tracked || in.requires_grad();
  if (!tracked) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.op = op;
  for (const auto& in : inputs) node.parents.push_back(in.node());
  node.backward = std::move(fn);
  return out;
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

// dst[out_index] (=|+=) src[in_index] where out axis i walks input axis perm[i].
template <typename T, bool Accumulate>
void permute_kernel(const T* src, const Shape& in_shape, const std::vector<std::size_t>& perm, T* dst) {
  const std::size_t rank = in_shape.size();
  if (rank == 0) {
    if constexpr (Accumulate) dst[0] += src[0];
    else dst[0] = src[0];
    return;
  }
  const auto in_strides = strides_of(in_shape);
  Shape out_shape(rank);
  std::vector<std::size_t> step(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[perm[i]];
    step[i] = in_strides[perm[i]];
  }
  const std::size_t inner = out_shape[rank - 1];
  const std::size_t inner_step = step[rank - 1];
  const std::size_t total = numel(out_shape);
  if (total == 0) return;
  std::vector<std::size_t> counter(rank, 0);
  std::size_t src_offset = 0;
  for (std::size_t out = 0; out < total; out += inner) {
    const T* s = src + src_offset;
    T* d = dst + out;
    for (std::size_t j = 0; j < inner; ++j) {
      if constexpr (Accumulate) d[j] += s[j * inner_step];
      else d[j] = s[j * inner_step];
    }
    // advance the outer multi-index
    for (std::size_t axis = rank - 1; axis-- > 0;) {
      if (++counter[axis] < out_shape[axis]) {
        src_offset += step[axis];
        break;
      }
      src_offset -= step[axis] * (out_shape[axis] - 1);
      counter[axis] = 0;
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Buffer<T> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return detail::make_result<T>(a.shape(), std::move(out), "add", {&a, &b},
                                [an = a.node(), bn = b.node()](const Node<T>& self) {
                                  for (auto* n : {an.get(), bn.get()}) {
                                    if (!n->requires_grad) continue;
                                    T* g = n->grad_buffer();
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Buffer<T> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return detail::make_result<T>(a.shape(), std::move(out), "sub", {&a, &b},
                                [an = a.node(), bn = b.node()](const Node<T>& self) {
                                  if (an->requires_grad) {
                                    T* g = an->grad_buffer();
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                                  }
                                  if (bn->requires_grad) {
                                    T* g = bn->grad_buffer();
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
                                  }
                                });
}

/// Hadamard product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Buffer<T> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return detail::make_result<T>(a.shape(), std::move(out), "mul", {&a, &b},
                                [an = a.node(), bn = b.node()](const Node<T>& self) {
                                  if (an->requires_grad) {
                                    T* g = an->grad_buffer();
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bn->data[i];
                                  }
                                  if (bn->requires_grad) {
                                    T* g = bn->grad_buffer();
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * an->data[i];
                                  }
                                });
}

/// Multiplication by a constant.
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Buffer<T> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return detail::make_result<T>(a.shape(), std::move(out), "scale", {&a},
                                [an = a.node(), factor](const Node<T>& self) {
                                  T* g = an->grad_buffer();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
                                });
}

/// Multiplication by a one-element tensor (e.g. a learnable temperature).
template <typename T>
Tensor<T> scale_by(const Tensor<T>& a, const Tensor<T>& factor) {
  if (factor.numel() != 1) throw DimensionError("scale_by: factor must have one element, got " + to_string(factor.shape()));
  const T f = factor.data()[0];
  Buffer<T> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * f;
  return detail::make_result<T>(a.shape(), std::move(out), "scale_by", {&a, &factor},
                                [an = a.node(), fn = factor.node()](const Node<T>& self) {
                                  const T f = fn->data[0];
                                  if (an->requires_grad) {
                                    T* g = an->grad_buffer();
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * f;
                                  }
                                  if (fn->requires_grad) {
                                    double acc = 0;
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) acc += double(self.grad[i]) * an->data[i];
                                    fn->grad_buffer()[0] += T(acc);
                                  }
                                });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0;
  for (T v : a.data()) acc += v;
  return detail::make_result<T>(Shape{}, {T(acc)}, "sum", {&a}, [an = a.node()](const Node<T>& self) {
    T* g = an->grad_buffer();
    const T s = self.grad[0];
    for (std::size_t i = 0; i < an->data.size(); ++i) g[i] += s;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  double acc = 0;
  for (T v : a.data()) acc += v;
  const double n = double(a.numel());
  return detail::make_result<T>(Shape{}, {T(acc / n)}, "mean", {&a}, [an = a.node(), n](const Node<T>& self) {
    T* g = an->grad_buffer();
    const T s = T(self.grad[0] / n);
    for (std::size_t i = 0; i < an->data.size(); ++i) g[i] += s;
  });
}

// ---------------------------------------------------------------------------
// Layout ops. All of them materialize a copy.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  Buffer<T> out(a.data().begin(), a.data().end());
  return detail::make_result<T>(std::move(shape), std::move(out), "reshape", {&a},
                                [an = a.node()](const Node<T>& self) {
                                  T* g = an->grad_buffer();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                                });
}

/// Output axis i is input axis perm[i].
template <typename T>
Tensor<T> permute(const Tensor<T>& a, std::vector<std::size_t> perm) {
  const std::size_t rank = a.rank();
  if (perm.size() != rank) throw DimensionError("permute: permutation rank does not match tensor rank");
  std::vector<bool> used(rank, false);
  for (std::size_t p : perm) {
    if (p >= rank || used[p]) throw DimensionError("permute: not a permutation of the tensor axes");
    used[p] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = a.shape()[perm[i]];
  Buffer<T> out(a.numel());
  detail::permute_kernel<T, false>(a.data().data(), a.shape(), perm, out.data());
  std::vector<std::size_t> inverse(rank);
  for (std::size_t i = 0; i < rank; ++i) inverse[perm[i]] = i;
  return detail::make_result<T>(out_shape, std::move(out), "permute", {&a},
                                [an = a.node(), inverse, out_shape](const Node<T>& self) {
                                  detail::permute_kernel<T, true>(self.grad.data(), out_shape, inverse, an->grad_buffer());
                                });
}

/// Contiguous sub-range [start, start + length) along one axis.
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= a.rank()) throw DimensionError("slice: axis " + std::to_string(axis) + " out of range");
  if (start + length > a.dim(axis)) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") exceeds extent " + std::to_string(a.dim(axis)) + " on axis " + std::to_string(axis));
  }
  const auto& s = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t extent = s[axis];
  Shape out_shape = s;
  out_shape[axis] = length;
  Buffer<T> out(outer * length * inner);
  const T* src = a.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(src + (o * extent + start) * inner, length * inner, out.data() + o * length * inner);
  }
  return detail::make_result<T>(out_shape, std::move(out), "slice", {&a},
                                [an = a.node(), outer, inner, extent, start, length](const Node<T>& self) {
                                  T* g = an->grad_buffer();
                                  for (std::size_t o = 0; o < outer; ++o) {
                                    T* dst = g + (o * extent + start) * inner;
                                    const T* src = self.grad.data() + o * length * inner;
                                    for (std::size_t i = 0; i < length * inner; ++i) dst[i] += src[i];
                                  }
                                });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis " + std::to_string(axis) + " out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) throw DimensionError("concat: " + to_string(s) + " does not conform to " + to_string(first) +
                                  " off axis " + std::to_string(axis));
    total += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  Shape out_shape = first;
  out_shape[axis] = total;
  Buffer<T> out(outer * total * inner);
  std::vector<std::size_t> extents;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t e = p.dim(axis);
    extents.push_back(e);
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.data().data() + o * e * inner, e * inner, out.data() + (o * total + offset) * inner);
    }
    offset += e;
  }
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::make_result<T>(out_shape, std::move(out), "concat", parts,
                                [nodes, extents, outer, inner, total](const Node<T>& self) {
                                  std::size_t offset = 0;
                                  for (std::size_t k = 0; k < nodes.size(); ++k) {
                                    const std::size_t e = extents[k];
                                    if (nodes[k]->requires_grad) {
                                      T* g = nodes[k]->grad_buffer();
                                      for (std::size_t o = 0; o < outer; ++o) {
                                        const T* src = self.grad.data() + (o * total + offset) * inner;
                                        T* dst = g + o * e * inner;
                                        for (std::size_t i = 0; i < e * inner; ++i) dst[i] += src[i];
                                      }
                                    }
                                    offset += e;
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Batched matrix product
// ---------------------------------------------------------------------------

/// a[..., M, K] x b[..., K, N] -> [..., M, N]. Leading (batch) dims must match exactly.
template <typename T>
Tensor<T> matmul_batched(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul_batched: operands need rank >= 2, got " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
  if (a.rank() != b.rank()) {
    throw DimensionError("matmul_batched: batch rank mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const std::size_t r = a.rank();
  for (std::size_t i = 0; i + 2 < r; ++i) {
    if (a.dim(i) != b.dim(i)) {
      throw DimensionError("matmul_batched: batch axis " + std::to_string(i) + " differs (" + std::to_string(a.dim(i)) +
                           " vs " + std::to_string(b.dim(i)) + ")");
    }
  }
  const std::size_t m = a.dim(r - 2), k = a.dim(r - 1), n = b.dim(r - 1);
  if (b.dim(r - 2) != k) {
    throw DimensionError("matmul_batched: contraction axes differ: a axis " + std::to_string(r - 1) + " = " +
                         std::to_string(k) + ", b axis " + std::to_string(r - 2) + " = " + std::to_string(b.dim(r - 2)));
  }
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < r; ++i) batch *= a.dim(i);
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  Buffer<T> out(batch * m * n);
  using CMap = detail::ConstMatMap<T>;
  using Map = detail::MatMap<T>;
  detail::count_macs(std::uint64_t(batch) * m * k * n);
  for (std::size_t s = 0; s < batch; ++s) {
    CMap A(a.data().data() + s * m * k, m, k);
    CMap B(b.data().data() + s * k * n, k, n);
    Map C(out.data() + s * m * n, m, n);
    C.noalias() = A * B;
  }
  return detail::make_result<T>(out_shape, std::move(out), "matmul", {&a, &b},
                                [an = a.node(), bn = b.node(), batch, m, k, n](const Node<T>& self) {
                                  for (std::size_t s = 0; s < batch; ++s) {
                                    CMap dC(self.grad.data() + s * m * n, m, n);
                                    if (an->requires_grad) {
                                      Map dA(an->grad_buffer() + s * m * k, m, k);
                                      CMap B(bn->data.data() + s * k * n, k, n);
                                      dA.noalias() += dC * B.transpose();
                                    }
                                    if (bn->requires_grad) {
                                      Map dB(bn->grad_buffer() + s * k * n, k, n);
                                      CMap A(an->data.data() + s * m * k, m, k);
                                      dB.noalias() += A.transpose() * dC;
                                    }
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

/// Fills `grad()` of every tracked leaf reachable from `loss`. Leaf gradients
/// are overwritten, not accumulated across calls; intermediate gradients are
/// released as soon as their backward rule has run.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) throw ContractError("backward: loss does not depend on any grad-tracked tensor");

  // Iterative post-order DFS; `order` ends with the loss.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node<T>* n : order) n->grad.clear();
  loss.node()->grad_buffer()[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (!n->backward) continue;
    if (!n->grad.empty()) n->backward(*n);
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

/// Max over elements of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8),
/// with the numeric gradient from central differences of `f` around `x`.
template <typename T, typename F>
double grad_check(F&& f, const Tensor<T>& x, double step) {
  Tensor<T> probe = x.detach();
  probe.set_requires_grad(true);
  Tensor<T> y = f(probe);
  backward(y);
  const std::vector<T> analytic(probe.grad_data().begin(), probe.grad_data().end());
  const std::vector<T> zeros(probe.numel(), T(0));
  const auto& a = analytic.empty() ? zeros : analytic;

  NoGradGuard no_grad;
  auto values = probe.mutable_data();
  double worst = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const T saved = values[i];
    values[i] = T(double(saved) + step);
    const double plus = f(probe).item();
    values[i] = T(double(saved) - step);
    const double minus = f(probe).item();
    values[i] = saved;
    const double numeric = (plus - minus) / (2 * step);
    const double denom = std::max({std::abs(double(a[i])), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(double(a[i]) - numeric) / denom);
  }
  return worst;
}

}  // namespace llformer
