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
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "llformer/blocks.hpp"

namespace llformer {

/// Architecture hyper-parameters. Stage i of the encoder runs at
/// H/2^i x W/2^i with base_channels * 2^i channels. Decoder level i (i = 2, 1, 0)
/// runs at the matching resolution with 4C, 2C and 2C channels; the head
/// blocks run at C and the tail blocks at 2C.
struct ModelConfig {
  std::size_t base_channels = 16;
  std::array<std::size_t, 4> encoder_depths{2, 4, 8, 16};
  std::array<std::size_t, 4> encoder_heads{1, 2, 4, 8};
  std::array<std::size_t, 3> decoder_depths{2, 4, 8};  // level 0 (full res) first
  std::array<std::size_t, 3> decoder_heads{1, 2, 4};
  std::size_t head_tail_blocks = 3;
  std::size_t cafb_layers = 3;
  double dgfn_expansion = 2.0;
  std::size_t input_channels = 3;
  bool global_residual = false;
  bool learnable_temperature = false;
  bool head_cafb = true;
  bool tail_cafb = true;
  bool skip_connections = true;

  /// Small configuration for CPU experiments and tests.
  static ModelConfig desk() {
    ModelConfig c;
    c.base_channels = 8;
    c.encoder_depths = {1, 1, 2, 2};
    c.encoder_heads = {1, 1, 2, 2};
    c.decoder_depths = {1, 1, 2};
    c.decoder_heads = {1, 1, 2};
    return c;
  }

  std::size_t encoder_channels(std::size_t level) const { return base_channels << level; }
  std::size_t decoder_channels(std::size_t level) const { return level == 0 ? 2 * base_channels : base_channels << level; }
  std::size_t tail_channels() const { return 2 * base_channels; }
  std::size_t hidden_channels(std::size_t channels) const {
    const auto h = static_cast<std::size_t>(std::llround(dgfn_expansion * double(channels)));
    return h ? h : 1;
  }

  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    auto need = [&](bool ok, std::string msg) {
      if (!ok) v.push_back(std::move(msg));
    };
    need(base_channels > 0 && base_channels % 2 == 0, "base_channels must be a positive even number");
    need(input_channels > 0, "input_channels must be positive");
    need(dgfn_expansion > 0, "dgfn_expansion must be positive");
    need(head_tail_blocks > 0, "head_tail_blocks must be positive");
    if (head_cafb || tail_cafb) {
      need(cafb_layers >= 2, "cafb_layers must be at least 2");
      need(cafb_layers <= head_tail_blocks, "cafb_layers must not exceed head_tail_blocks");
    }
    for (std::size_t i = 0; i < 4; ++i) {
      const auto is = std::to_string(i);
      need(encoder_depths[i] > 0, "encoder_depths[" + is + "] must be positive");
      need(encoder_heads[i] > 0, "encoder_heads[" + is + "] must be positive");
      if (base_channels > 0 && encoder_heads[i] > 0) {
        need(encoder_channels(i) % encoder_heads[i] == 0,
             "encoder stage " + is + " channels " + std::to_string(encoder_channels(i)) +
                 " not divisible by encoder_heads[" + is + "] = " + std::to_string(encoder_heads[i]));
      }
    }
    for (std::size_t i = 0; i < 3; ++i) {
      const auto is = std::to_string(i);
      need(decoder_depths[i] > 0, "decoder_depths[" + is + "] must be positive");
      need(decoder_heads[i] > 0, "decoder_heads[" + is + "] must be positive");
      if (base_channels > 0 && decoder_heads[i] > 0) {
        need(decoder_channels(i) % decoder_heads[i] == 0,
             "decoder level " + is + " channels " + std::to_string(decoder_channels(i)) +
                 " not divisible by decoder_heads[" + is + "] = " + std::to_string(decoder_heads[i]));
      }
    }
    return v;
  }

  void validate() const {
    const auto v = violations();
    if (v.empty()) return;
    std::string msg = "invalid model config:";
    for (const auto& s : v) msg += "\n  - " + s;
    throw ConfigError(msg);
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"base_channels", c.base_channels},
                     {"encoder_depths", c.encoder_depths},
                     {"encoder_heads", c.encoder_heads},
                     {"decoder_depths", c.decoder_depths},
                     {"decoder_heads", c.decoder_heads},
                     {"head_tail_blocks", c.head_tail_blocks},
                     {"cafb_layers", c.cafb_layers},
                     {"dgfn_expansion", c.dgfn_expansion},
                     {"input_channels", c.input_channels},
                     {"global_residual", c.global_residual},
                     {"learnable_temperature", c.learnable_temperature},
                     {"head_cafb", c.head_cafb},
                     {"tail_cafb", c.tail_cafb},
                     {"skip_connections", c.skip_connections}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  static const std::vector<std::string> known{
      "base_channels", "encoder_depths", "encoder_heads", "decoder_depths",        "decoder_heads",
      "head_tail_blocks", "cafb_layers", "dgfn_expansion", "input_channels",       "global_residual",
      "learnable_temperature", "head_cafb", "tail_cafb", "skip_connections"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError("unknown model config key: " + key);
  }
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("base_channels", c.base_channels);
    get("encoder_depths", c.encoder_depths);
    get("encoder_heads", c.encoder_heads);
    get("decoder_depths", c.decoder_depths);
    get("decoder_heads", c.decoder_heads);
    get("head_tail_blocks", c.head_tail_blocks);
    get("cafb_layers", c.cafb_layers);
    get("dgfn_expansion", c.dgfn_expansion);
    get("input_channels", c.input_channels);
    get("global_residual", c.global_residual);
    get("learnable_temperature", c.learnable_temperature);
    get("head_cafb", c.head_cafb);
    get("tail_cafb", c.tail_cafb);
    get("skip_connections", c.skip_connections);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

/// Canonical text form (sorted keys, no whitespace) used in checkpoints.
inline std::string canonical_json(const ModelConfig& c) { return nlohmann::json(c).dump(); }

template <typename T>
struct Model {
  ModelConfig config;
  ParamTable<T> params;

  ConvWeights<T> projection;
  std::vector<AtbParams<T>> head;
  CafbParams<T> head_cafb;
  ConvWeights<T> head_fuse;
  std::array<std::vector<AtbParams<T>>, 4> encoder;
  std::array<ConvWeights<T>, 3> down;  // level i -> i + 1
  std::array<ConvWeights<T>, 3> up;    // level i + 1 -> i
  std::array<ConvWeights<T>, 3> skip;  // fusion at decoder level i
  std::array<std::vector<AtbParams<T>>, 3> decoder;
  std::vector<AtbParams<T>> tail;
  CafbParams<T> tail_cafb;
  ConvWeights<T> tail_fuse;
  ConvWeights<T> reconstruction;
};

/// Builds and initializes a model. Identical (config, seed) pairs give
/// bit-identical weights; the registration order below is the checkpoint order.
template <typename T>
Model<T> build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model<T> m;
  m.config = config;
  Rng rng(seed);
  ParamFactory<T> f(m.params, rng);
  const std::size_t c = config.base_channels;
  const bool lt = config.learnable_temperature;
  auto blocks = [&](const std::string& name, std::size_t count, std::size_t ch, std::size_t heads) {
    std::vector<AtbParams<T>> out;
    for (std::size_t i = 0; i < count; ++i) {
      out.push_back(make_atb(f, name + "." + std::to_string(i), ch, heads, config.hidden_channels(ch), lt));
    }
    return out;
  };

  m.projection = f.conv("projection", c, config.input_channels, 3);
  m.head = blocks("head", config.head_tail_blocks, c, config.encoder_heads[0]);
  if (config.head_cafb) {
    m.head_cafb = make_cafb(f, "head_cafb", c, config.cafb_layers, lt);
    m.head_fuse = f.conv("head_fuse", c, c * config.cafb_layers, 1);
  }
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t ch = config.encoder_channels(i);
    m.encoder[i] = blocks("encoder" + std::to_string(i), config.encoder_depths[i], ch, config.encoder_heads[i]);
    if (i < 3) m.down[i] = f.conv("down" + std::to_string(i), ch / 2, ch, 3, 1, false);
  }
  for (std::size_t i = 3; i-- > 0;) {
    const std::size_t in_ch = i == 2 ? config.encoder_channels(3) : config.decoder_channels(i + 1);
    const std::size_t enc_ch = config.encoder_channels(i);
    const std::size_t ch = config.decoder_channels(i);
    m.up[i] = f.conv("up" + std::to_string(i), 2 * in_ch, in_ch, 3, 1, false);
    m.skip[i] = f.conv("skip" + std::to_string(i), ch, 2 * enc_ch, 1);
    m.decoder[i] = blocks("decoder" + std::to_string(i), config.decoder_depths[i], ch, config.decoder_heads[i]);
  }
  const std::size_t tc = config.tail_channels();
  m.tail = blocks("tail", config.head_tail_blocks, tc, config.decoder_heads[0]);
  if (config.tail_cafb) {
    m.tail_cafb = make_cafb(f, "tail_cafb", tc, config.cafb_layers, lt);
    m.tail_fuse = f.conv("tail_fuse", tc, tc * config.cafb_layers, 1);
  }
  m.reconstruction = f.conv("reconstruction", config.input_channels, tc, 3);
  return m;
}

namespace detail {

// Runs the blocks in sequence; with a CAFB the last N block outputs are fused
// and reduced back to the stage width by a 1x1 conv.
template <typename T>
Tensor<T> blocks_with_fusion(Tensor<T> x, const std::vector<AtbParams<T>>& blocks, bool fuse,
                             const CafbParams<T>& cafb_params, const ConvWeights<T>& reduce) {
  std::vector<Tensor<T>> outputs;
  for (const auto& b : blocks) {
    x = atb(x, b);
    outputs.push_back(x);
  }
  if (!fuse) return x;
  const std::size_t n = cafb_params.layers;
  std::vector<Tensor<T>> last(outputs.end() - std::ptrdiff_t(n), outputs.end());
  Tensor<T> fused = cafb(last, cafb_params);
  const Shape& s = x.shape();
  return conv2d(reshape(fused, Shape{s[0], n * s[1], s[2], s[3]}), reduce, 0);
}

template <typename T>
Tensor<T> run_blocks(Tensor<T> x, const std::vector<AtbParams<T>>& blocks) {
  for (const auto& b : blocks) x = atb(x, b);
  return x;
}

}  // namespace detail

/// Smallest multiple of 8 not below n (three 2x downsamplings).
inline std::size_t padded_extent(std::size_t n) { return (n + 7) / 8 * 8; }

/// Enhances a batch [B,3,H,W] (values nominally in [0,1]). Inputs are
/// reflect-padded to multiples of 8 and the output is cropped back. No
/// clamping is applied.
template <typename T>
Tensor<T> forward(const Model<T>& m, const Tensor<T>& image) {
  const ModelConfig& cfg = m.config;
  if (image.rank() != 4) throw DimensionError("forward: image must be [B,C,H,W], got " + to_string(image.shape()));
  if (image.dim(1) != cfg.input_channels) {
    throw DimensionError("forward: image has " + std::to_string(image.dim(1)) + " channels, model expects " +
                         std::to_string(cfg.input_channels));
  }
  const std::size_t h = image.dim(2), w = image.dim(3);
  if (h < 8 || w < 8) throw DimensionError("forward: H and W must be at least 8, got " + std::to_string(h) + "x" + std::to_string(w));
  Tensor<T> x = reflect_pad_bottom_right(image, padded_extent(h) - h, padded_extent(w) - w);

  Tensor<T> f = conv2d_same(x, m.projection);
  f = detail::blocks_with_fusion(f, m.head, cfg.head_cafb, m.head_cafb, m.head_fuse);

  std::array<Tensor<T>, 4> enc;
  enc[0] = detail::run_blocks(f, m.encoder[0]);
  for (std::size_t i = 1; i < 4; ++i) enc[i] = detail::run_blocks(downsample(enc[i - 1], m.down[i - 1]), m.encoder[i]);

  Tensor<T> d = enc[3];
  for (std::size_t i = 3; i-- > 0;) {
    Tensor<T> u = upsample(d, m.up[i]);
    const Tensor<T>& skip = cfg.skip_connections ? enc[i] : Tensor<T>::zeros(enc[i].shape());
    d = detail::run_blocks(skip_fuse(skip, u, m.skip[i]), m.decoder[i]);
  }

  Tensor<T> t = detail::blocks_with_fusion(d, m.tail, cfg.tail_cafb, m.tail_cafb, m.tail_fuse);
  Tensor<T> out = conv2d_same(t, m.reconstruction);
  if (cfg.global_residual) out = add(out, x);
  return crop(out, h, w);
}

template <typename T>
std::size_t param_count(const Model<T>& m) {
  return m.params.scalar_count();
}

/// Parameter totals grouped by the first component of each parameter name.
template <typename T>
std::vector<std::pair<std::string, std::size_t>> param_breakdown(const Model<T>& m) {
  std::vector<std::pair<std::string, std::size_t>> out;
  for (const auto& [name, t] : m.params.entries()) {
    const std::string group = name.substr(0, name.find('.'));
    if (out.empty() || out.back().first != group) out.emplace_back(group, 0);
    out.back().second += t.numel();
  }
  return out;
}

struct MacReport {
  std::uint64_t total = 0;
  std::vector<std::pair<std::string, std::uint64_t>> components;

  void add(const std::string& component, std::uint64_t macs) {
    total += macs;
    for (auto& [name, value] : components) {
      if (name == component) {
        value += macs;
        return;
      }
    }
    components.emplace_back(component, macs);
  }
};

namespace detail {
inline std::uint64_t conv_macs(std::uint64_t out_c, std::uint64_t in_c_per_group, std::uint64_t k, std::uint64_t hw) {
  return out_c * in_c_per_group * k * k * hw;
}
inline std::uint64_t point_depthwise_macs(std::uint64_t in_c, std::uint64_t out_c, std::uint64_t hw) {
  return conv_macs(out_c, in_c, 1, hw) + conv_macs(out_c, 1, 3, hw);
}
inline std::uint64_t atb_macs(const ModelConfig& cfg, std::uint64_t c, std::uint64_t heads, std::uint64_t h,
                              std::uint64_t w) {
  const std::uint64_t hw = h * w;
  const std::uint64_t hidden = cfg.hidden_channels(c);
  std::uint64_t macs = 2 * (3 * point_depthwise_macs(c, c, hw) + conv_macs(c, c, 1, hw));
  macs += attention_mac_count(AttentionKind::axis, 1, c, h, w, heads);
  macs += 2 * point_depthwise_macs(c, hidden, hw) + conv_macs(c, hidden, 1, hw);
  return macs;
}
inline std::uint64_t cafb_macs(const ModelConfig& cfg, std::uint64_t c, std::uint64_t h, std::uint64_t w) {
  const std::uint64_t hw = h * w, n = cfg.cafb_layers, nc = n * c;
  return 3 * point_depthwise_macs(nc, nc, hw) + conv_macs(nc, nc, 1, hw) + cafb_mac_count(1, n, c, h, w) +
         conv_macs(c, nc, 1, hw);
}
}  // namespace detail

/// Analytic multiply-accumulate count of one forward pass on a single
/// H x W image: every convolution and attention product. Normalization,
/// activations and softmax are not MACs and are not counted.
inline MacReport model_mac_count(const ModelConfig& cfg, std::uint64_t h, std::uint64_t w) {
  cfg.validate();
  h = padded_extent(h);
  w = padded_extent(w);
  MacReport r;
  const std::uint64_t c = cfg.base_channels;
  r.add("projection", detail::conv_macs(c, cfg.input_channels, 3, h * w));
  r.add("head_blocks", cfg.head_tail_blocks * detail::atb_macs(cfg, c, cfg.encoder_heads[0], h, w));
  if (cfg.head_cafb) r.add("head_cafb", detail::cafb_macs(cfg, c, h, w));
  for (std::size_t i = 0; i < 4; ++i) {
    const std::uint64_t lh = h >> i, lw = w >> i, ch = cfg.encoder_channels(i);
    r.add("encoder" + std::to_string(i),
          cfg.encoder_depths[i] * detail::atb_macs(cfg, ch, cfg.encoder_heads[i], lh, lw));
    if (i < 3) r.add("downsample", detail::conv_macs(ch / 2, ch, 3, lh * lw));
  }
  for (std::size_t i = 3; i-- > 0;) {
    const std::uint64_t lh = h >> i, lw = w >> i;
    const std::uint64_t in_ch = i == 2 ? cfg.encoder_channels(3) : cfg.decoder_channels(i + 1);
    r.add("upsample", detail::conv_macs(2 * in_ch, in_ch, 3, (lh / 2) * (lw / 2)));
    r.add("skip_fuse", detail::conv_macs(cfg.decoder_channels(i), 2 * cfg.encoder_channels(i), 1, lh * lw));
    r.add("decoder" + std::to_string(i),
          cfg.decoder_depths[i] * detail::atb_macs(cfg, cfg.decoder_channels(i), cfg.decoder_heads[i], lh, lw));
  }
  const std::uint64_t tc = cfg.tail_channels();
  r.add("tail_blocks", cfg.head_tail_blocks * detail::atb_macs(cfg, tc, cfg.decoder_heads[0], h, w));
  if (cfg.tail_cafb) r.add("tail_cafb", detail::cafb_macs(cfg, tc, h, w));
  r.add("reconstruction", detail::conv_macs(cfg.input_channels, tc, 3, h * w));
  return r;
}

}  // namespace llformer
