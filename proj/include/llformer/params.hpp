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

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "llformer/nnops.hpp"
#include "llformer/rng.hpp"

namespace llformer {

/// Ordered, named list of trainable tensors. Enumeration order is the order
/// of registration, which is what checkpoints rely on.
template <typename T>
class ParamTable {
 public:
  Tensor<T> add(std::string name, Tensor<T> tensor) {
    tensor.set_requires_grad(true);
    entries_.emplace_back(std::move(name), tensor);
    return tensor;
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor<T>>>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
  }

  std::vector<Tensor<T>> tensors() const {
    std::vector<Tensor<T>> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.second);
    return out;
  }

  void zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
};

/// Creates and registers initialized parameters. Conv kernels and biases are
/// uniform on [-1/sqrt(fan_in), 1/sqrt(fan_in)] with fan_in = (C_in/groups)
/// k^2; LN gamma is one and beta zero. Draws are made in double, so float and
/// double builds from the same seed hold the same values up to the final cast.
template <typename T>
class ParamFactory {
 public:
  ParamFactory(ParamTable<T>& table, Rng& rng, double gain = 1.0) : table_(table), rng_(rng), gain_(gain) {}

  ConvWeights<T> conv(const std::string& name, std::size_t out_c, std::size_t in_c, std::size_t k,
                      std::size_t groups = 1, bool bias = true) {
    Shape shape{out_c, in_c / groups, k, k};
    const double bound = gain_ / std::sqrt(double(in_c / groups * k * k));
    ConvWeights<T> w;
    w.groups = groups;
    w.kernel = table_.add(name + ".weight", Tensor<T>(shape, uniform_values(numel(shape), bound)));
    if (bias) w.bias = table_.add(name + ".bias", Tensor<T>({out_c}, uniform_values(out_c, bound)));
    return w;
  }

  ConvWeights<T> depthwise(const std::string& name, std::size_t channels, std::size_t k = 3, bool bias = false) {
    return conv(name, channels, channels, k, channels, bias);
  }

  PointDepthwise<T> point_depthwise(const std::string& name, std::size_t in_c, std::size_t out_c) {
    PointDepthwise<T> p;
    p.point = conv(name + ".point", out_c, in_c, 1, 1, false);
    p.depthwise = depthwise(name + ".dw", out_c);
    return p;
  }

  LayerNormParams<T> layer_norm(const std::string& name, std::size_t channels) {
    LayerNormParams<T> p;
    p.gamma = table_.add(name + ".gamma", Tensor<T>::full({channels}, T(1)));
    p.beta = table_.add(name + ".beta", Tensor<T>::zeros({channels}));
    return p;
  }

  Tensor<T> scalar(const std::string& name, T value) { return table_.add(name, Tensor<T>::full({1}, value)); }

  std::vector<T> uniform_values(std::size_t n, double bound) {
    std::vector<T> values(n);
    for (auto& v : values) v = T((2 * rng_.uniform() - 1) * bound);
    return values;
  }

  ParamTable<T>& table() { return table_; }
  Rng& rng() { return rng_; }

 private:
  ParamTable<T>& table_;
  Rng& rng_;
  double gain_;
};

}  // namespace llformer
