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
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "llformer/errors.hpp"
#include "llformer/imageio.hpp"
#include "llformer/model.hpp"
#include "llformer/rng.hpp"
#include "llformer/tensor.hpp"

namespace llformer {

struct TrainConfig {
  std::size_t patch_size = 128;
  std::size_t batch_size = 12;
  double lr_max = 1e-4;
  double lr_min = 1e-6;
  std::size_t total_steps = 1000;
  double smooth_l1_beta = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;
  bool horizontal_flip = true;
  bool vertical_flip = true;

  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    if (patch_size == 0 || patch_size % 8 != 0) v.push_back("patch_size must be a positive multiple of 8, got " + std::to_string(patch_size));
    if (batch_size == 0) v.push_back("batch_size must be positive");
    if (!(lr_min > 0)) v.push_back("lr_min must be positive");
    if (!(lr_min <= lr_max)) v.push_back("lr_min must not exceed lr_max");
    if (total_steps < 1) v.push_back("total_steps must be at least 1, got " + std::to_string(total_steps));
    if (!(smooth_l1_beta > 0)) v.push_back("smooth_l1_beta must be positive");
    if (!(beta1 >= 0 && beta1 < 1)) v.push_back("beta1 must be in [0, 1)");
    if (!(beta2 >= 0 && beta2 < 1)) v.push_back("beta2 must be in [0, 1)");
    if (!(epsilon > 0)) v.push_back("epsilon must be positive");
    return v;
  }

  void validate() const {
    const auto v = violations();
    if (v.empty()) return;
    std::string msg = "invalid training config:";
    for (const auto& s : v) msg += "\n  " + s;
    throw ConfigError(msg);
  }
};

/// Mean Huber-style loss: 0.5 d^2 / beta where |d| < beta, |d| - 0.5 beta
/// elsewhere, with d = pred - target.
template <typename T>
Tensor<T> smooth_l1(const Tensor<T>& pred, const Tensor<T>& target, double beta = 1.0) {
  detail::require_same_shape(pred, target, "smooth_l1");
  if (!(beta > 0)) throw ContractError("smooth_l1: beta must be positive");
  const auto p = pred.data(), t = target.data();
  const std::size_t n = p.size();
  if (n == 0) throw DimensionError("smooth_l1: empty input");
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = double(p[i]) - double(t[i]);
    const double a = std::abs(d);
    acc += a < beta ? 0.5 * d * d / beta : a - 0.5 * beta;
  }
  return detail::make_result<T>(
      Shape{}, Buffer<T>{T(acc / double(n))}, "smooth_l1", {&pred, &target},
      [pn = pred.node(), tn = target.node(), beta, n](const Node<T>& self) {
        const double g = double(self.grad[0]) / double(n);
        T* dp = pn->requires_grad ? pn->grad_buffer() : nullptr;
        T* dt = tn->requires_grad ? tn->grad_buffer() : nullptr;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = double(pn->data[i]) - double(tn->data[i]);
          const double slope = std::abs(d) < beta ? d / beta : (d > 0 ? 1.0 : -1.0);
          if (dp) dp[i] += T(g * slope);
          if (dt) dt[i] -= T(g * slope);
        }
      });
}

/// Cosine annealing from lr_max at step 0 to lr_min at step T; later steps stay at lr_min.
inline double cosine_lr(std::size_t step, const TrainConfig& cfg) {
  if (step >= cfg.total_steps) return cfg.lr_min;
  const double phase = std::numbers::pi * double(step) / double(cfg.total_steps);
  return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1 + std::cos(phase));
}

/// Bias-corrected Adam on one flat tensor; `t` is the 1-based step number.
template <typename T>
void adam_update(std::span<T> w, std::span<const T> g, std::span<T> m, std::span<T> v, std::size_t t, double lr,
                 double beta1, double beta2, double epsilon) {
  if (g.size() != w.size() || m.size() != w.size() || v.size() != w.size()) {
    throw DimensionError("adam_update: weight, gradient and moment sizes differ");
  }
  if (t < 1) throw ContractError("adam_update: step must be at least 1");
  const double c1 = 1 - std::pow(beta1, double(t));
  const double c2 = 1 - std::pow(beta2, double(t));
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double gi = double(g[i]);
    const double mi = beta1 * double(m[i]) + (1 - beta1) * gi;
    const double vi = beta2 * double(v[i]) + (1 - beta2) * gi * gi;
    m[i] = T(mi);
    v[i] = T(vi);
    w[i] = T(double(w[i]) - lr * (mi / c1) / (std::sqrt(vi / c2) + epsilon));
  }
}

/// First and second moments for every parameter, in parameter-table order.
template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;

  static AdamState zeros_like(const ParamTable<T>& params) {
    AdamState s;
    for (const auto& [name, t] : params.entries()) {
      s.m.emplace_back(t.numel(), T(0));
      s.v.emplace_back(t.numel(), T(0));
    }
    return s;
  }
};

/// One optimizer step over the whole table using the gradients of the last
/// `backward`. Parameters that received no gradient are treated as zero-gradient.
template <typename T>
void adam_step(ParamTable<T>& params, AdamState<T>& state, std::size_t t, double lr, const TrainConfig& cfg) {
  auto& entries = params.entries();
  if (state.m.size() != entries.size()) throw DimensionError("adam_step: moment table does not match parameters");
  std::vector<T> zeros;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor<T>& p = entries[i].second;
    std::span<const T> g = p.grad_data();
    if (g.empty()) {
      zeros.assign(p.numel(), T(0));
      g = zeros;
    }
    adam_update<T>(p.mutable_data(), g, state.m[i], state.v[i], t, lr, cfg.beta1, cfg.beta2, cfg.epsilon);
  }
}

/// A low-light input and its reference, both [3,H,W].
struct ImagePair {
  Image low;
  Image normal;
};

/// Everything besides the weights needed to continue training.
template <typename T>
struct TrainState {
  AdamState<T> adam;
  Rng rng;
  std::size_t step = 0;  // completed steps
};

struct StepRecord {
  std::size_t step = 0;
  double loss = 0;
  double lr = 0;
  double grad_norm = 0;
};

namespace detail {

inline void check_dataset(const std::vector<ImagePair>& data, std::size_t patch) {
  if (data.empty()) throw ContractError("train: dataset is empty");
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& p = data[i];
    if (p.low.rank() != 3 || p.low.dim(0) != 3 || p.low.shape() != p.normal.shape()) {
      throw DimensionError("train: pair " + std::to_string(i) + " must hold two [3,H,W] images of equal shape, got " +
                           to_string(p.low.shape()) + " and " + to_string(p.normal.shape()));
    }
    if (p.low.dim(1) < patch || p.low.dim(2) < patch) {
      throw ContractError("train: pair " + std::to_string(i) + " is " + std::to_string(p.low.dim(1)) + "x" +
                          std::to_string(p.low.dim(2)) + ", smaller than patch size " + std::to_string(patch));
    }
  }
}

// Copies a patch x patch window at (y0, x0), optionally mirrored.
inline void copy_crop(const Image& src, std::size_t y0, std::size_t x0, std::size_t patch, bool hflip, bool vflip,
                      float* dst) {
  const std::size_t h = src.dim(1), w = src.dim(2);
  const auto d = src.data();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < patch; ++y) {
      const std::size_t sy = y0 + (vflip ? patch - 1 - y : y);
      const float* row = d.data() + (c * h + sy) * w + x0;
      float* out = dst + (c * patch + y) * patch;
      for (std::size_t x = 0; x < patch; ++x) out[x] = row[hflip ? patch - 1 - x : x];
    }
}

}  // namespace detail

/// Draws a batch: per sample an image index, a crop origin, then the
/// horizontal and vertical flip coins, all from `rng` in that order. The same
/// crop and flips are applied to both members of the pair.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> sample_batch(const std::vector<ImagePair>& data, const TrainConfig& cfg, Rng& rng) {
  const std::size_t p = cfg.patch_size, per = 3 * p * p;
  std::vector<float> low(cfg.batch_size * per), normal(cfg.batch_size * per);
  for (std::size_t b = 0; b < cfg.batch_size; ++b) {
    const ImagePair& pair = data[rng.below(data.size())];
    const std::size_t y0 = rng.below(pair.low.dim(1) - p + 1);
    const std::size_t x0 = rng.below(pair.low.dim(2) - p + 1);
    const bool hflip = cfg.horizontal_flip && rng.coin();
    const bool vflip = cfg.vertical_flip && rng.coin();
    detail::copy_crop(pair.low, y0, x0, p, hflip, vflip, low.data() + b * per);
    detail::copy_crop(pair.normal, y0, x0, p, hflip, vflip, normal.data() + b * per);
  }
  const Shape shape{cfg.batch_size, 3, p, p};
  return {Tensor<T>(shape, std::vector<T>(low.begin(), low.end())),
          Tensor<T>(shape, std::vector<T>(normal.begin(), normal.end()))};
}

template <typename T>
TrainState<T> initial_train_state(const Model<T>& model, const TrainConfig& cfg) {
  return TrainState<T>{AdamState<T>::zeros_like(model.params), Rng(cfg.seed), 0};
}

using StepCallback = std::function<void(const StepRecord&)>;

/// Runs steps state.step + 1 .. cfg.total_steps. Each step: sample a batch,
/// forward, smooth L1, backward, Adam with the cosine rate of the step index
/// (0-based). Returns the records of the steps run. A non-finite loss or
/// gradient throws NumericError carrying the step index.
template <typename T>
std::vector<StepRecord> train(Model<T>& model, const std::vector<ImagePair>& data, const TrainConfig& cfg,
                              TrainState<T>& state, const StepCallback& on_step = {}) {
  cfg.validate();
  detail::check_dataset(data, cfg.patch_size);
  if (state.adam.m.size() != model.params.size()) throw DimensionError("train: optimizer state does not match model");
  std::vector<StepRecord> history;
  while (state.step < cfg.total_steps) {
    const std::size_t index = state.step;
    auto [low, normal] = sample_batch<T>(data, cfg, state.rng);
    const double lr = cosine_lr(index, cfg);
    Tensor<T> loss = smooth_l1(forward(model, low), normal, cfg.smooth_l1_beta);
    const double value = double(loss.item());
    if (!std::isfinite(value)) {
      throw NumericError("non-finite loss at step " + std::to_string(index + 1), long(index + 1));
    }
    backward(loss);
    double norm2 = 0;
    for (const auto& [name, p] : model.params.entries())
      for (T g : p.grad_data()) norm2 += double(g) * double(g);
    if (!std::isfinite(norm2)) {
      throw NumericError("non-finite gradient at step " + std::to_string(index + 1), long(index + 1));
    }
    adam_step(model.params, state.adam, index + 1, lr, cfg);
    model.params.zero_grad();
    state.step = index + 1;
    StepRecord rec{state.step, value, lr, std::sqrt(norm2)};
    history.push_back(rec);
    if (on_step) on_step(rec);
  }
  return history;
}

template <typename T>
std::vector<StepRecord> train(Model<T>& model, const std::vector<ImagePair>& data, const TrainConfig& cfg,
                              const StepCallback& on_step = {}) {
  TrainState<T> state = initial_train_state(model, cfg);
  return train(model, data, cfg, state, on_step);
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr char kCheckpointMagic[4] = {'L', 'L', 'F', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Serializable snapshot: config, weights and Adam moments flattened in
/// parameter-table order, completed step count and training RNG state.
struct Checkpoint {
  ModelConfig config;
  std::vector<float> weights;
  std::vector<float> adam_m;
  std::vector<float> adam_v;
  std::uint64_t step = 0;
  std::string rng_state;
};

template <typename T>
Checkpoint make_checkpoint(const Model<T>& model, const TrainState<T>* state = nullptr) {
  Checkpoint c;
  c.config = model.config;
  for (const auto& [name, t] : model.params.entries())
    for (T v : t.data()) c.weights.push_back(float(v));
  if (state) {
    for (const auto& m : state->adam.m) c.adam_m.insert(c.adam_m.end(), m.begin(), m.end());
    for (const auto& v : state->adam.v) c.adam_v.insert(c.adam_v.end(), v.begin(), v.end());
    c.step = state->step;
    c.rng_state = state->rng.state();
  } else {
    c.adam_m.assign(c.weights.size(), 0.0f);
    c.adam_v.assign(c.weights.size(), 0.0f);
  }
  return c;
}

/// Rebuilds the model (and optionally the training state) from a checkpoint.
template <typename T>
Model<T> restore_model(const Checkpoint& c, TrainState<T>* state = nullptr) {
  Model<T> m = build<T>(c.config, 0);
  if (param_count(m) != c.weights.size()) {
    throw CheckpointMismatchError("checkpoint holds " + std::to_string(c.weights.size()) + " weights, config requires " +
                                  std::to_string(param_count(m)));
  }
  std::size_t offset = 0;
  auto& entries = m.params.entries();
  if (state) *state = TrainState<T>{AdamState<T>::zeros_like(m.params), Rng(0), std::size_t(c.step)};
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto dst = entries[i].second.mutable_data();
    for (std::size_t k = 0; k < dst.size(); ++k) {
      dst[k] = T(c.weights[offset + k]);
      if (state) {
        state->adam.m[i][k] = T(c.adam_m[offset + k]);
        state->adam.v[i][k] = T(c.adam_v[offset + k]);
      }
    }
    offset += dst.size();
  }
  if (state && !c.rng_state.empty()) state->rng.set_state(c.rng_state);
  return m;
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_f32s(std::string& out, const std::vector<float>& values) {
  for (float f : values) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
  }
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, const std::string& path) : bytes_(bytes), path_(path) {}

  void need(std::uint64_t n, const char* what) const {
    if (n > remaining()) truncated(what);
  }
  [[noreturn]] void truncated(const char* what) const {
    throw CheckpointTruncatedError("checkpoint '" + path_ + "' is truncated while reading " + what + " at offset " +
                                   std::to_string(pos_) + " (" + std::to_string(remaining()) + " bytes left)");
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string text(std::uint64_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<float> f32s(std::uint64_t n, const char* what) {
    if (n > remaining() / 4) truncated(what);
    std::vector<float> out(n);
    for (auto& f : out) {
      const std::uint32_t bits = u32(what);
      std::memcpy(&f, &bits, 4);
    }
    return out;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Little-endian layout: "LLFK", u32 version, u64 config length, config JSON,
/// u64 weight count, weights, Adam m, Adam v (f32 each), u64 step,
/// u64 RNG-state length, RNG state text.
inline std::string serialize_checkpoint(const Checkpoint& c) {
  if (c.adam_m.size() != c.weights.size() || c.adam_v.size() != c.weights.size()) {
    throw DimensionError("checkpoint: moment tables must match the weight count");
  }
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  const std::string json = canonical_json(c.config);
  detail::put_u64(out, json.size());
  out += json;
  detail::put_u64(out, c.weights.size());
  detail::put_f32s(out, c.weights);
  detail::put_f32s(out, c.adam_m);
  detail::put_f32s(out, c.adam_v);
  detail::put_u64(out, c.step);
  detail::put_u64(out, c.rng_state.size());
  out += c.rng_state;
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes, const std::string& path = "<memory>") {
  detail::ByteReader r(bytes, path);
  const std::string magic = r.text(4, "magic");
  if (magic != std::string(kCheckpointMagic, 4)) {
    throw CheckpointMagicError("'" + path + "' is not a checkpoint (bad magic)");
  }
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) throw CheckpointVersionError(kCheckpointVersion, version);
  Checkpoint c;
  const std::uint64_t json_len = r.u64("config length");
  const std::string json = r.text(json_len, "config");
  try {
    c.config = nlohmann::json::parse(json).get<ModelConfig>();
    c.config.validate();
  } catch (const std::exception& e) {
    throw CheckpointMismatchError("checkpoint '" + path + "' embeds an unusable config: " + e.what());
  }
  const std::uint64_t count = r.u64("weight count");
  const std::size_t expected = build<float>(c.config, 0).params.scalar_count();
  if (count != expected) {
    throw CheckpointMismatchError("checkpoint '" + path + "' holds " + std::to_string(count) +
                                  " weights but its config requires " + std::to_string(expected));
  }
  c.weights = r.f32s(count, "weights");
  c.adam_m = r.f32s(count, "adam first moments");
  c.adam_v = r.f32s(count, "adam second moments");
  c.step = r.u64("step");
  const std::uint64_t rng_len = r.u64("rng state length");
  c.rng_state = r.text(rng_len, "rng state");
  if (r.remaining() != 0) {
    throw CheckpointError("checkpoint '" + path + "' has " + std::to_string(r.remaining()) + " trailing bytes");
  }
  return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  const std::string bytes = serialize_checkpoint(c);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw IoError("write failed for checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes, path);
}

}  // namespace llformer
