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

#include <cstddef>
#include <string>

#include "llformer/attention.hpp"

namespace llformer {

/// Dual gated feed-forward network: two parallel (1x1 -> 3x3 depthwise)
/// branches C -> C_hidden gate each other through GELU, and a 1x1 conv maps
/// C_hidden back to C.
template <typename T>
struct DgfnParams {
  PointDepthwise<T> branch1, branch2;
  ConvWeights<T> out;
};

/// Axis-based transformer block.
template <typename T>
struct AtbParams {
  LayerNormParams<T> norm1, norm2;
  AxisAttentionParams<T> attn_height, attn_width;
  DgfnParams<T> ffn;
};

/// out_conv(DG) with DG = gelu(a) * b + a * gelu(b) and a, b the branch
/// outputs. This is the DGFN without its input residual.
template <typename T>
Tensor<T> dgfn_gated(const Tensor<T>& y, const DgfnParams<T>& p) {
  Tensor<T> a = point_depthwise(y, p.branch1);
  Tensor<T> b = point_depthwise(y, p.branch2);
  Tensor<T> gated = add(mul(gelu(a), b), mul(a, gelu(b)));
  return conv2d(gated, p.out, 0);
}

/// Dual gated feed-forward network: dgfn_gated(y) + y.
template <typename T>
Tensor<T> dgfn(const Tensor<T>& y, const DgfnParams<T>& p) {
  return add(dgfn_gated(y, p), y);
}

/// F' = A-MSA(LN(F)) + F; out = DGFN(LN(F')) + F' where the block residual
/// F' takes the place of the DGFN's own input residual (so zeroed output
/// projections make the block an exact identity).
template <typename T>
Tensor<T> atb(const Tensor<T>& f_in, const AtbParams<T>& p) {
  Tensor<T> attended = add(a_msa(layer_norm(f_in, p.norm1), p.attn_height, p.attn_width), f_in);
  return add(dgfn_gated(layer_norm(attended, p.norm2), p.ffn), attended);
}

/// 3x3 conv C -> C/2, then pixel-unshuffle by 2: [B,C,H,W] -> [B,2C,H/2,W/2].
template <typename T>
Tensor<T> downsample(const Tensor<T>& x, const ConvWeights<T>& w) {
  if (x.rank() != 4) throw DimensionError("downsample: input must be [B,C,H,W]");
  if (x.dim(2) % 2 || x.dim(3) % 2) {
    throw DimensionError("downsample: H (axis 2) = " + std::to_string(x.dim(2)) + " and W (axis 3) = " +
                         std::to_string(x.dim(3)) + " must be even");
  }
  return pixel_unshuffle(conv2d_same(x, w), 2);
}

/// 3x3 conv C -> 2C, then pixel-shuffle by 2: [B,C,H,W] -> [B,C/2,2H,2W].
template <typename T>
Tensor<T> upsample(const Tensor<T>& x, const ConvWeights<T>& w) {
  if (x.rank() != 4) throw DimensionError("upsample: input must be [B,C,H,W]");
  if (w.out_channels() % 4) {
    throw DimensionError("upsample: conv output channels " + std::to_string(w.out_channels()) +
                         " must be divisible by 4");
  }
  return pixel_shuffle(conv2d_same(x, w), 2);
}

/// Weighted skip connection: concat(enc, dec) on channels, then a 1x1 conv.
template <typename T>
Tensor<T> skip_fuse(const Tensor<T>& enc, const Tensor<T>& dec, const ConvWeights<T>& w) {
  if (enc.shape() != dec.shape()) {
    throw DimensionError("skip_fuse: encoder " + to_string(enc.shape()) + " and decoder " + to_string(dec.shape()) +
                         " shapes differ");
  }
  return conv2d(concat(std::vector<Tensor<T>>{enc, dec}, 1), w, 0);
}

template <typename T>
DgfnParams<T> make_dgfn(ParamFactory<T>& f, const std::string& name, std::size_t channels, std::size_t hidden) {
  DgfnParams<T> p;
  p.branch1 = f.point_depthwise(name + ".branch1", channels, hidden);
  p.branch2 = f.point_depthwise(name + ".branch2", channels, hidden);
  p.out = f.conv(name + ".out", channels, hidden, 1);
  return p;
}

template <typename T>
AtbParams<T> make_atb(ParamFactory<T>& f, const std::string& name, std::size_t channels, std::size_t heads,
                      std::size_t hidden, bool learnable_temperature = false) {
  AtbParams<T> p;
  p.norm1 = f.layer_norm(name + ".norm1", channels);
  p.attn_height = make_axis_attention(f, name + ".attn_h", channels, heads, learnable_temperature);
  p.attn_width = make_axis_attention(f, name + ".attn_w", channels, heads, learnable_temperature);
  p.norm2 = f.layer_norm(name + ".norm2", channels);
  p.ffn = make_dgfn(f, name + ".ffn", channels, hidden);
  return p;
}

}  // namespace llformer
