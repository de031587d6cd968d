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
#include <cstdint>
#include <string>
#include <vector>

#include "llformer/nnops.hpp"
#include "llformer/params.hpp"

namespace llformer {

/// Parameters of one axis (or global) multi-head self-attention layer.
/// Q, K and V each come from a bias-free 1x1 conv followed by a 3x3
/// depthwise conv; heads are mixed by a 1x1 output conv with bias.
template <typename T>
struct AxisAttentionParams {
  PointDepthwise<T> q, k, v;
  ConvWeights<T> out;
  std::size_t heads = 1;
  double alpha = 1.0;     // logits are divided by alpha
  Tensor<T> temperature;  // optional learnable multiplier on the logits, shape [1]
};

/// Parameters of the cross-layer attention fusion block over N stacked
/// feature maps of C channels each (projections act on N*C channels).
template <typename T>
struct CafbParams {
  PointDepthwise<T> q, k, v;
  ConvWeights<T> out;
  std::size_t layers = 3;
  double alpha = 0;  // 0 selects sqrt(C*H*W), the key length, at call time
  Tensor<T> temperature;
};

enum class AttentionAxis { height, width };
enum class AttentionKind { axis, full };

namespace detail {

template <typename T>
void check_heads(const Tensor<T>& x, std::size_t heads, double alpha, const char* op) {
  if (x.rank() != 4) throw DimensionError(std::string(op) + ": input must be [B,C,H,W], got " + to_string(x.shape()));
  if (heads == 0 || x.dim(1) % heads != 0) {
    throw DimensionError(std::string(op) + ": channels (axis 1) = " + std::to_string(x.dim(1)) +
                         " not divisible by heads = " + std::to_string(heads));
  }
  if (!(alpha > 0)) throw ContractError(std::string(op) + ": alpha must be positive");
}

template <typename T>
Tensor<T> scaled_logits(const Tensor<T>& logits, double alpha, const Tensor<T>& temperature) {
  Tensor<T> s = scale(logits, T(1.0 / alpha));
  return temperature.defined() ? scale_by(s, temperature) : s;
}

}  // namespace detail

namespace detail {

// Strided view of the attention lines of a [B, C, H, W] map. A line is one
// (batch, head, column) triple for the height axis or (batch, head, row)
// for the width axis; it holds L positions of d features each.
struct AxisLines {
  std::size_t batch, channels, heads, d, length, count_per_head, pos_stride, line_stride, feat_stride;

  AxisLines(const Shape& s, std::size_t heads_, AttentionAxis axis)
      : batch(s[0]), channels(s[1]), heads(heads_), d(s[1] / heads_) {
    const std::size_t h = s[2], w = s[3];
    const bool height = axis == AttentionAxis::height;
    length = height ? h : w;
    count_per_head = height ? w : h;
    pos_stride = height ? w : 1;
    line_stride = height ? 1 : w;
    feat_stride = h * w;
  }
  std::size_t lines() const { return batch * heads * count_per_head; }
  std::size_t base(std::size_t line) const {
    const std::size_t m = line % count_per_head;
    const std::size_t bj = line / count_per_head;  // b * heads + j
    const std::size_t b = bj / heads, j = bj % heads;
    return (b * channels + j * d) * feat_stride + m * line_stride;
  }
  template <typename T>
  void gather(const T* src, std::size_t line, RowMat<T>& dst) const {
    const std::size_t o = base(line);
    for (std::size_t i = 0; i < length; ++i)
      for (std::size_t e = 0; e < d; ++e) dst(i, e) = src[o + i * pos_stride + e * feat_stride];
  }
  template <typename T>
  void scatter(const RowMat<T>& src, std::size_t line, T* dst) const {
    const std::size_t o = base(line);
    for (std::size_t i = 0; i < length; ++i)
      for (std::size_t e = 0; e < d; ++e) dst[o + i * pos_stride + e * feat_stride] = src(i, e);
  }
  template <typename T>
  void scatter_add(const RowMat<T>& src, std::size_t line, T* dst) const {
    const std::size_t o = base(line);
    for (std::size_t i = 0; i < length; ++i)
      for (std::size_t e = 0; e < d; ++e) dst[o + i * pos_stride + e * feat_stride] += src(i, e);
  }
};

template <typename Rows>
void softmax_rows_inplace(Rows&& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    auto row = m.row(i).array();
    const auto mx = row.maxCoeff();
    row = (row - mx).exp();
    row /= row.sum();
  }
}

// Fused attention along one axis on already-projected q, k, v ([B,C,H,W]):
// per line, P = softmax(tau * Q K^T / alpha) over keys and O = P V, written
// back in [B,C,H,W] layout (heads concatenated on channels).
template <typename T>
Tensor<T> axis_attention_core(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                              double alpha, const Tensor<T>& temperature, AttentionAxis axis,
                              Tensor<T>* attention_out) {
  const AxisLines lines(q.shape(), heads, axis);
  const std::size_t n = lines.length, d = lines.d;
  const T tau = temperature.defined() ? temperature.data()[0] : T(1);
  const T factor = T(tau / alpha);
  detail::count_macs(2 * std::uint64_t(lines.lines()) * n * n * d);

  Buffer<T> probs(lines.lines() * n * n);
  Buffer<T> out(q.numel());
  RowMat<T> qm(n, d), km(n, d), vm(n, d), om(n, d);
  for (std::size_t line = 0; line < lines.lines(); ++line) {
    lines.gather(q.data().data(), line, qm);
    lines.gather(k.data().data(), line, km);
    lines.gather(v.data().data(), line, vm);
    MatMap<T> p(probs.data() + line * n * n, n, n);
    p.noalias() = qm * km.transpose();
    p *= factor;
    softmax_rows_inplace(p);
    om.noalias() = p * vm;
    lines.scatter(om, line, out.data());
  }
  if (attention_out) {
    *attention_out = Tensor<T>(Shape{lines.batch, heads, lines.count_per_head, n, n}, probs);
  }
  return make_result<T>(
      q.shape(), std::move(out), "axis_attention", {&q, &k, &v, &temperature},
      [qn = q.node(), kn = k.node(), vn = v.node(), tn = temperature.defined() ? temperature.node() : nullptr,
       probs = std::move(probs), lines, factor, alpha](const Node<T>& self) {
        const std::size_t n = lines.length, d = lines.d;
        T* dq = qn->requires_grad ? qn->grad_buffer() : nullptr;
        T* dk = kn->requires_grad ? kn->grad_buffer() : nullptr;
        T* dv = vn->requires_grad ? vn->grad_buffer() : nullptr;
        const bool need_tau = tn && tn->requires_grad;
        double dtau = 0;
        RowMat<T> qm(n, d), km(n, d), vm(n, d), dom(n, d), tmp(n, d), dp(n, n);
        for (std::size_t line = 0; line < lines.lines(); ++line) {
          ConstMatMap<T> p(probs.data() + line * n * n, n, n);
          lines.gather(self.grad.data(), line, dom);
          if (dv) {
            tmp.noalias() = p.transpose() * dom;
            lines.scatter_add(tmp, line, dv);
          }
          if (!dq && !dk && !need_tau) continue;
          lines.gather(vn->data.data(), line, vm);
          lines.gather(qn->data.data(), line, qm);
          lines.gather(kn->data.data(), line, km);
          dp.noalias() = dom * vm.transpose();
          // softmax backward: dS = P * (dP - rowsum(dP * P))
          for (std::size_t i = 0; i < n; ++i) {
            const T dot = (dp.row(i).array() * p.row(i).array()).sum();
            dp.row(i).array() = p.row(i).array() * (dp.row(i).array() - dot);
          }
          if (need_tau) {
            RowMat<T> raw = qm * km.transpose();
            dtau += double((dp.array() * raw.array()).sum()) / alpha;
          }
          dp *= factor;
          if (dq) {
            tmp.noalias() = dp * km;
            lines.scatter_add(tmp, line, dq);
          }
          if (dk) {
            tmp.noalias() = dp.transpose() * qm;
            lines.scatter_add(tmp, line, dk);
          }
        }
        if (need_tau) tn->grad_buffer()[0] += T(dtau);
      });
}

}  // namespace detail

/// Multi-head self-attention restricted to one spatial axis. For the height
/// axis every column w and head j attends over the H positions of that
/// column: softmax(q k^T / alpha) normalized over keys, applied to v. Heads
/// are concatenated on channels and mixed by the output 1x1 conv.
/// `attention_out`, when given, receives the probabilities as
/// [B, heads, W, H, H] (height) or [B, heads, H, W, W] (width).
template <typename T>
Tensor<T> axis_attention(const Tensor<T>& x, const AxisAttentionParams<T>& p, AttentionAxis axis,
                         Tensor<T>* attention_out = nullptr) {
  detail::check_heads(x, p.heads, p.alpha, "axis_attention");
  Tensor<T> q = point_depthwise(x, p.q);
  Tensor<T> k = point_depthwise(x, p.k);
  Tensor<T> v = point_depthwise(x, p.v);
  Tensor<T> heads = detail::axis_attention_core(q, k, v, p.heads, p.alpha, p.temperature, axis, attention_out);
  return conv2d(heads, p.out, 0);
}

template <typename T>
Tensor<T> axis_attention_height(const Tensor<T>& x, const AxisAttentionParams<T>& p, Tensor<T>* attention_out = nullptr) {
  return axis_attention(x, p, AttentionAxis::height, attention_out);
}

template <typename T>
Tensor<T> axis_attention_width(const Tensor<T>& x, const AxisAttentionParams<T>& p, Tensor<T>* attention_out = nullptr) {
  return axis_attention(x, p, AttentionAxis::width, attention_out);
}

/// Axis-based multi-head self-attention: height axis, then width axis.
template <typename T>
Tensor<T> a_msa(const Tensor<T>& x, const AxisAttentionParams<T>& height, const AxisAttentionParams<T>& width) {
  return axis_attention_width(axis_attention_height(x, height), width);
}

/// Global multi-head self-attention over all H*W positions, with the same
/// projection structure. Only a cost baseline; quadratic in H*W.
/// `attention_out` receives [B, heads, HW, HW].
template <typename T>
Tensor<T> full_msa(const Tensor<T>& x, const AxisAttentionParams<T>& p, Tensor<T>* attention_out = nullptr) {
  detail::check_heads(x, p.heads, p.alpha, "full_msa");
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t k = p.heads, d = c / k;
  const Shape split{b, k, d, h * w};
  Tensor<T> q = permute(reshape(point_depthwise(x, p.q), split), {0, 1, 3, 2});
  Tensor<T> kt = reshape(point_depthwise(x, p.k), split);
  Tensor<T> v = permute(reshape(point_depthwise(x, p.v), split), {0, 1, 3, 2});
  Tensor<T> attn = softmax_lastdim(detail::scaled_logits(matmul_batched(q, kt), p.alpha, p.temperature));
  if (attention_out) *attention_out = attn;
  Tensor<T> heads = reshape(permute(matmul_batched(attn, v), {0, 1, 3, 2}), Shape{b, c, h, w});
  return conv2d(heads, p.out, 0);
}

/// Cross-layer attention fusion. The N maps are stacked on channels
/// ([B, N*C, H, W]), projected to Q, K, V, and flattened per layer to
/// [N, C*H*W]. An N x N layer-correlation matrix A = softmax(Q K^T / alpha)
/// reweights the value layers, the result passes the output 1x1 conv, and the
/// stacked input is added back. Returns [B, N, C, H, W].
/// `attention_out` receives A as [B, N, N].
template <typename T>
Tensor<T> cafb(const std::vector<Tensor<T>>& features, const CafbParams<T>& p, Tensor<T>* attention_out = nullptr) {
  if (features.size() != p.layers || p.layers < 2) {
    throw DimensionError("cafb: expected " + std::to_string(p.layers) + " feature maps (at least 2), got " +
                         std::to_string(features.size()));
  }
  const Shape& s = features.front().shape();
  if (s.size() != 4) throw DimensionError("cafb: feature maps must be [B,C,H,W], got " + to_string(s));
  for (std::size_t i = 1; i < features.size(); ++i) {
    if (features[i].shape() != s) {
      throw DimensionError("cafb: layer " + std::to_string(i) + " has shape " + to_string(features[i].shape()) +
                           ", layer 0 has " + to_string(s));
    }
  }
  const std::size_t b = s[0], c = s[1], h = s[2], w = s[3], n = p.layers;
  const std::size_t per_layer = c * h * w;
  const double alpha = p.alpha > 0 ? p.alpha : std::sqrt(double(per_layer));

  Tensor<T> stacked = concat(features, 1);
  Tensor<T> q = reshape(point_depthwise(stacked, p.q), Shape{b, n, per_layer});
  Tensor<T> kt = permute(reshape(point_depthwise(stacked, p.k), Shape{b, n, per_layer}), {0, 2, 1});
  Tensor<T> v = reshape(point_depthwise(stacked, p.v), Shape{b, n, per_layer});
  Tensor<T> attn = softmax_lastdim(detail::scaled_logits(matmul_batched(q, kt), alpha, p.temperature));
  if (attention_out) *attention_out = attn;
  Tensor<T> fused = reshape(matmul_batched(attn, v), Shape{b, n * c, h, w});
  Tensor<T> out = add(conv2d(fused, p.out, 0), stacked);
  return reshape(out, Shape{b, n, c, h, w});
}

/// Multiply-accumulates for the logits and the value product only
/// (projections are identical across kinds and counted separately):
/// full = 2*B*C*(HW)^2, axis = 2*B*C*(H^2*W + W^2*H).
inline std::uint64_t attention_mac_count(AttentionKind kind, std::uint64_t batch, std::uint64_t channels,
                                         std::uint64_t h, std::uint64_t w, std::uint64_t heads) {
  if (heads == 0 || channels % heads != 0) {
    throw DimensionError("attention_mac_count: channels " + std::to_string(channels) + " not divisible by heads " +
                         std::to_string(heads));
  }
  if (kind == AttentionKind::full) return 2 * batch * channels * (h * w) * (h * w);
  return 2 * batch * channels * (h * h * w + w * w * h);
}

/// Logits plus value product of one CAFB: 2 * B * N^2 * C*H*W.
inline std::uint64_t cafb_mac_count(std::uint64_t batch, std::uint64_t layers, std::uint64_t channels, std::uint64_t h,
                                    std::uint64_t w) {
  return 2 * batch * layers * layers * channels * h * w;
}

template <typename T>
AxisAttentionParams<T> make_axis_attention(ParamFactory<T>& f, const std::string& name, std::size_t channels,
                                           std::size_t heads, bool learnable_temperature = false) {
  AxisAttentionParams<T> p;
  p.q = f.point_depthwise(name + ".q", channels, channels);
  p.k = f.point_depthwise(name + ".k", channels, channels);
  p.v = f.point_depthwise(name + ".v", channels, channels);
  p.out = f.conv(name + ".out", channels, channels, 1);
  p.heads = heads;
  p.alpha = std::sqrt(double(channels / heads));
  if (learnable_temperature) p.temperature = f.scalar(name + ".temperature", T(1));
  return p;
}

template <typename T>
CafbParams<T> make_cafb(ParamFactory<T>& f, const std::string& name, std::size_t channels, std::size_t layers,
                        bool learnable_temperature = false) {
  const std::size_t stacked = channels * layers;
  CafbParams<T> p;
  p.q = f.point_depthwise(name + ".q", stacked, stacked);
  p.k = f.point_depthwise(name + ".k", stacked, stacked);
  p.v = f.point_depthwise(name + ".v", stacked, stacked);
  p.out = f.conv(name + ".out", stacked, stacked, 1);
  p.layers = layers;
  if (learnable_temperature) p.temperature = f.scalar(name + ".temperature", T(1));
  return p;
}

}  // namespace llformer
