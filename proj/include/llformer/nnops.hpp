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
#include <vector>

#include "llformer/tensor.hpp"

namespace llformer {

/// Convolution weights. `kernel` is [C_out, C_in / groups, k_h, k_w]; `bias`
/// is [C_out] or left undefined for a bias-free convolution.
template <typename T>
struct ConvWeights {
  Tensor<T> kernel;
  Tensor<T> bias;
  std::size_t groups = 1;

  std::size_t out_channels() const { return kernel.dim(0); }
  std::size_t in_channels() const { return kernel.dim(1) * groups; }
  std::size_t kernel_h() const { return kernel.dim(2); }
  std::size_t kernel_w() const { return kernel.dim(3); }
  bool has_bias() const { return bias.defined(); }
  bool depthwise() const { return groups > 1 && groups == in_channels() && out_channels() == groups; }
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  double epsilon = 1e-5;
};

namespace detail {

struct ConvGeometry {
  std::size_t batch, in_c, h, w, out_c, kh, kw, groups, pad, out_h, out_w;
};

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& x, const ConvWeights<T>& w, std::size_t padding) {
  if (x.rank() != 4) throw DimensionError("conv2d: input must be [B,C,H,W], got " + to_string(x.shape()));
  if (!w.kernel.defined() || w.kernel.rank() != 4) throw DimensionError("conv2d: kernel must be [C_out,C_in/groups,k_h,k_w]");
  if (w.groups == 0) throw DimensionError("conv2d: groups must be positive");
  const std::size_t in_c = x.dim(1);
  if (in_c % w.groups != 0) {
    throw DimensionError("conv2d: input channels (axis 1) = " + std::to_string(in_c) + " not divisible by groups = " +
                         std::to_string(w.groups));
  }
  if (w.kernel.dim(1) * w.groups != in_c) {
    throw DimensionError("conv2d: kernel axis 1 = " + std::to_string(w.kernel.dim(1)) + " times groups " +
                         std::to_string(w.groups) + " does not match input channels " + std::to_string(in_c));
  }
  if (w.kernel.dim(0) % w.groups != 0) {
    throw DimensionError("conv2d: output channels (kernel axis 0) = " + std::to_string(w.kernel.dim(0)) +
                         " not divisible by groups = " + std::to_string(w.groups));
  }
  if (w.has_bias() && (w.bias.rank() != 1 || w.bias.dim(0) != w.kernel.dim(0))) {
    throw DimensionError("conv2d: bias shape " + to_string(w.bias.shape()) + " does not match output channels");
  }
  ConvGeometry g{x.dim(0), in_c, x.dim(2), x.dim(3), w.kernel.dim(0), w.kernel.dim(2), w.kernel.dim(3), w.groups, padding, 0, 0};
  if (g.h + 2 * padding < g.kh || g.w + 2 * padding < g.kw) {
    throw DimensionError("conv2d: kernel " + std::to_string(g.kh) + "x" + std::to_string(g.kw) +
                         " does not fit padded input " + std::to_string(g.h) + "x" + std::to_string(g.w));
  }
  g.out_h = g.h + 2 * padding - g.kh + 1;
  g.out_w = g.w + 2 * padding - g.kw + 1;
  return g;
}

// Valid output columns [lo, hi) for kernel column j: input column ow - pad + j in [0, w).
inline void valid_range(std::size_t j, const ConvGeometry& g, std::size_t& lo, std::size_t& hi) {
  lo = j < g.pad ? g.pad - j : 0;
  const std::ptrdiff_t end = std::ptrdiff_t(g.w) + std::ptrdiff_t(g.pad) - std::ptrdiff_t(j);
  hi = std::size_t(std::clamp<std::ptrdiff_t>(end, 0, std::ptrdiff_t(g.out_w)));
  if (lo > hi) lo = hi;
}

template <typename T>
void im2col(const T* in, std::size_t channels, const ConvGeometry& g, T* cols) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = cols + ((c * g.kh + i) * g.kw + j) * plane;
        std::size_t lo, hi;
        valid_range(j, g, lo, hi);
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          T* dst = row + oh * g.out_w;
          const std::ptrdiff_t ih = std::ptrdiff_t(oh) - std::ptrdiff_t(g.pad) + std::ptrdiff_t(i);
          if (ih < 0 || ih >= std::ptrdiff_t(g.h)) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = in + (c * g.h + std::size_t(ih)) * g.w;
          std::fill(dst, dst + lo, T(0));
          for (std::size_t ow = lo; ow < hi; ++ow) dst[ow] = src[ow + j - g.pad];
          std::fill(dst + hi, dst + g.out_w, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, std::size_t channels, const ConvGeometry& g, T* in) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = cols + ((c * g.kh + i) * g.kw + j) * plane;
        std::size_t lo, hi;
        valid_range(j, g, lo, hi);
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const std::ptrdiff_t ih = std::ptrdiff_t(oh) - std::ptrdiff_t(g.pad) + std::ptrdiff_t(i);
          if (ih < 0 || ih >= std::ptrdiff_t(g.h)) continue;
          T* dst = in + (c * g.h + std::size_t(ih)) * g.w;
          const T* src = row + oh * g.out_w;
          for (std::size_t ow = lo; ow < hi; ++ow) dst[ow + j - g.pad] += src[ow];
        }
      }
    }
  }
}

template <typename T>
void depthwise_forward(const T* x, const T* k, const ConvGeometry& g, T* y) {
  const std::size_t planes = g.batch * g.in_c;
  for (std::size_t p = 0; p < planes; ++p) {
    const std::size_t c = p % g.in_c;
    const T* in = x + p * g.h * g.w;
    const T* ker = k + c * g.kh * g.kw;
    T* out = y + p * g.out_h * g.out_w;
    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
      T* orow = out + oh * g.out_w;
      for (std::size_t i = 0; i < g.kh; ++i) {
        const std::ptrdiff_t ih = std::ptrdiff_t(oh) - std::ptrdiff_t(g.pad) + std::ptrdiff_t(i);
        if (ih < 0 || ih >= std::ptrdiff_t(g.h)) continue;
        const T* irow = in + std::size_t(ih) * g.w;
        for (std::size_t j = 0; j < g.kw; ++j) {
          const T wv = ker[i * g.kw + j];
          std::size_t lo, hi;
          valid_range(j, g, lo, hi);
          if (lo == hi) continue;
          T* __restrict o = orow + lo;
          const T* __restrict src = irow + (lo + j - g.pad);
          for (std::size_t n = 0; n < hi - lo; ++n) o[n] += wv * src[n];
        }
      }
    }
  }
}

// The kernel gradient is accumulated per output column in `partial` (which
// vectorizes) and reduced once per plane.
template <typename T>
void depthwise_backward(const T* x, const T* k, const T* dy, const ConvGeometry& g, T* dx, T* dk) {
  const std::size_t planes = g.batch * g.in_c;
  const std::size_t taps = g.kh * g.kw;
  Buffer<T> partial(dk ? taps * g.out_w : 0);
  for (std::size_t p = 0; p < planes; ++p) {
    const std::size_t c = p % g.in_c;
    const T* in = x + p * g.h * g.w;
    const T* ker = k + c * taps;
    const T* grad_out = dy + p * g.out_h * g.out_w;
    T* grad_in = dx ? dx + p * g.h * g.w : nullptr;
    std::fill(partial.begin(), partial.end(), T(0));
    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
      const T* grow = grad_out + oh * g.out_w;
      for (std::size_t i = 0; i < g.kh; ++i) {
        const std::ptrdiff_t ih = std::ptrdiff_t(oh) - std::ptrdiff_t(g.pad) + std::ptrdiff_t(i);
        if (ih < 0 || ih >= std::ptrdiff_t(g.h)) continue;
        for (std::size_t j = 0; j < g.kw; ++j) {
          std::size_t lo, hi;
          valid_range(j, g, lo, hi);
          if (lo == hi) continue;
          const std::size_t shift = lo + j - g.pad;
          const std::size_t len = hi - lo;
          if (grad_in) {
            const T wv = ker[i * g.kw + j];
            T* __restrict irow = grad_in + std::size_t(ih) * g.w + shift;
            const T* __restrict gr = grow + lo;
            for (std::size_t n = 0; n < len; ++n) irow[n] += wv * gr[n];
          }
          if (dk) {
            const T* __restrict irow = in + std::size_t(ih) * g.w + shift;
            const T* __restrict gr = grow + lo;
            T* __restrict acc = partial.data() + (i * g.kw + j) * g.out_w + lo;
            for (std::size_t n = 0; n < len; ++n) acc[n] += gr[n] * irow[n];
          }
        }
      }
    }
    if (dk) {
      T* grad_k = dk + c * taps;
      for (std::size_t t = 0; t < taps; ++t) {
        T total = 0;
        for (std::size_t n = 0; n < g.out_w; ++n) total += partial[t * g.out_w + n];
        grad_k[t] += total;
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation with zero padding (stride 1, no dilation).
/// Output extent is H + 2*padding - k_h + 1 (likewise for W).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvWeights<T>& w, std::size_t padding) {
  const detail::ConvGeometry g = detail::conv_geometry(x, w, padding);
  const std::size_t out_plane = g.out_h * g.out_w;
  Buffer<T> out(g.batch * g.out_c * out_plane, T(0));

  const bool pointwise = g.kh == 1 && g.kw == 1 && g.pad == 0 && g.groups == 1;
  const bool depthwise = w.depthwise();
  const std::size_t cg = g.in_c / g.groups;   // input channels per group
  const std::size_t og = g.out_c / g.groups;  // output channels per group
  const std::size_t patch = cg * g.kh * g.kw;
  const T* xd = x.data().data();
  const T* kd = w.kernel.data().data();
  using CMap = detail::ConstMatMap<T>;
  using Map = detail::MatMap<T>;
  detail::count_macs(std::uint64_t(g.batch) * g.out_c * out_plane * patch);

  if (depthwise) {
    detail::depthwise_forward(xd, kd, g, out.data());
  } else if (pointwise) {
    CMap K(kd, g.out_c, g.in_c);
    for (std::size_t b = 0; b < g.batch; ++b) {
      CMap X(xd + b * g.in_c * out_plane, g.in_c, out_plane);
      Map Y(out.data() + b * g.out_c * out_plane, g.out_c, out_plane);
      Y.noalias() = K * X;
    }
  } else {
    Buffer<T> cols(patch * out_plane);
    for (std::size_t b = 0; b < g.batch; ++b) {
      for (std::size_t gi = 0; gi < g.groups; ++gi) {
        detail::im2col(xd + (b * g.in_c + gi * cg) * g.h * g.w, cg, g, cols.data());
        CMap K(kd + gi * og * patch, og, patch);
        CMap C(cols.data(), patch, out_plane);
        Map Y(out.data() + (b * g.out_c + gi * og) * out_plane, og, out_plane);
        Y.noalias() = K * C;
      }
    }
  }
  if (w.has_bias()) {
    const T* bd = w.bias.data().data();
    for (std::size_t b = 0; b < g.batch; ++b) {
      for (std::size_t c = 0; c < g.out_c; ++c) {
        T* plane = out.data() + (b * g.out_c + c) * out_plane;
        for (std::size_t i = 0; i < out_plane; ++i) plane[i] += bd[c];
      }
    }
  }

  Shape out_shape{g.batch, g.out_c, g.out_h, g.out_w};
  return detail::make_result<T>(
      out_shape, std::move(out), "conv2d", {&x, &w.kernel, &w.bias},
      [xn = x.node(), kn = w.kernel.node(), bn = w.has_bias() ? w.bias.node() : nullptr, g, pointwise, depthwise, cg, og,
       patch](const Node<T>& self) {
        const std::size_t out_plane = g.out_h * g.out_w;
        const T* dy = self.grad.data();
        if (bn && bn->requires_grad) {
          T* db = bn->grad_buffer();
          for (std::size_t b = 0; b < g.batch; ++b) {
            for (std::size_t c = 0; c < g.out_c; ++c) {
              const T* plane = dy + (b * g.out_c + c) * out_plane;
              T acc = 0;
              for (std::size_t i = 0; i < out_plane; ++i) acc += plane[i];
              db[c] += acc;
            }
          }
        }
        T* dx = xn->requires_grad ? xn->grad_buffer() : nullptr;
        T* dk = kn->requires_grad ? kn->grad_buffer() : nullptr;
        if (!dx && !dk) return;
        const T* xd = xn->data.data();
        const T* kd = kn->data.data();
        if (depthwise) {
          detail::depthwise_backward(xd, kd, dy, g, dx, dk);
          return;
        }
        if (pointwise) {
          CMap K(kd, g.out_c, g.in_c);
          for (std::size_t b = 0; b < g.batch; ++b) {
            CMap dY(dy + b * g.out_c * out_plane, g.out_c, out_plane);
            if (dx) {
              Map dX(dx + b * g.in_c * out_plane, g.in_c, out_plane);
              dX.noalias() += K.transpose() * dY;
            }
            if (dk) {
              Map dK(dk, g.out_c, g.in_c);
              CMap X(xd + b * g.in_c * out_plane, g.in_c, out_plane);
              dK.noalias() += dY * X.transpose();
            }
          }
          return;
        }
        Buffer<T> cols(patch * out_plane);
        Buffer<T> dcols(dx ? patch * out_plane : 0);
        for (std::size_t b = 0; b < g.batch; ++b) {
          for (std::size_t gi = 0; gi < g.groups; ++gi) {
            CMap dY(dy + (b * g.out_c + gi * og) * out_plane, og, out_plane);
            if (dk) {
              detail::im2col(xd + (b * g.in_c + gi * cg) * g.h * g.w, cg, g, cols.data());
              Map dK(dk + gi * og * patch, og, patch);
              CMap C(cols.data(), patch, out_plane);
              dK.noalias() += dY * C.transpose();
            }
            if (dx) {
              CMap K(kd + gi * og * patch, og, patch);
              Map dC(dcols.data(), patch, out_plane);
              dC.noalias() = K.transpose() * dY;
              detail::col2im_add(dcols.data(), cg, g, dx + (b * g.in_c + gi * cg) * g.h * g.w);
            }
          }
        }
      });
}

/// Convolution with padding k/2, which preserves H and W for odd kernels.
template <typename T>
Tensor<T> conv2d_same(const Tensor<T>& x, const ConvWeights<T>& w) {
  return conv2d(x, w, w.kernel.dim(2) / 2);
}

/// Layer normalization over the channel axis (axis 1) at every spatial
/// location of a [B, C, ...] tensor. Variance uses the biased 1/C estimator.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const LayerNormParams<T>& p) {
  if (x.rank() < 2) throw DimensionError("layer_norm: input needs a channel axis, got " + to_string(x.shape()));
  const std::size_t batch = x.dim(0), channels = x.dim(1);
  const std::size_t spatial = x.numel() / (batch * channels);
  if (p.gamma.numel() != channels || p.beta.numel() != channels) {
    throw DimensionError("layer_norm: parameter length " + std::to_string(p.gamma.numel()) +
                         " does not match channel axis 1 = " + std::to_string(channels));
  }
  if (!(p.epsilon > 0)) throw ContractError("layer_norm: epsilon must be positive");
  const T* xd = x.data().data();
  const T* gamma = p.gamma.data().data();
  const T* beta = p.beta.data().data();
  Buffer<T> out(x.numel());
  Buffer<T> normalized(x.numel());
  Buffer<T> rstd(batch * spatial);
  Buffer<T> mu(spatial), var(spatial);
  const T inv_c = T(1) / T(channels);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* xb = xd + b * channels * spatial;
    std::fill(mu.begin(), mu.end(), T(0));
    std::fill(var.begin(), var.end(), T(0));
    for (std::size_t c = 0; c < channels; ++c) {
      const T* row = xb + c * spatial;
      for (std::size_t s = 0; s < spatial; ++s) mu[s] += row[s];
    }
    for (std::size_t s = 0; s < spatial; ++s) mu[s] *= inv_c;
    for (std::size_t c = 0; c < channels; ++c) {
      const T* row = xb + c * spatial;
      for (std::size_t s = 0; s < spatial; ++s) {
        const T d = row[s] - mu[s];
        var[s] += d * d;
      }
    }
    T* r = rstd.data() + b * spatial;
    for (std::size_t s = 0; s < spatial; ++s) r[s] = T(1) / std::sqrt(var[s] * inv_c + T(p.epsilon));
    for (std::size_t c = 0; c < channels; ++c) {
      const T* row = xb + c * spatial;
      T* nrow = normalized.data() + (b * channels + c) * spatial;
      T* orow = out.data() + (b * channels + c) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) {
        nrow[s] = (row[s] - mu[s]) * r[s];
        orow[s] = gamma[c] * nrow[s] + beta[c];
      }
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), "layer_norm", {&x, &p.gamma, &p.beta},
      [xn = x.node(), gn = p.gamma.node(), bn = p.beta.node(), normalized = std::move(normalized),
       rstd = std::move(rstd), batch, channels, spatial](const Node<T>& self) {
        const T* dy = self.grad.data();
        const T* gamma = gn->data.data();
        if (gn->requires_grad || bn->requires_grad) {
          T* dg = gn->requires_grad ? gn->grad_buffer() : nullptr;
          T* dbeta = bn->requires_grad ? bn->grad_buffer() : nullptr;
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t c = 0; c < channels; ++c) {
              const T* grow = dy + (b * channels + c) * spatial;
              const T* nrow = normalized.data() + (b * channels + c) * spatial;
              T sg = 0, sb = 0;
              for (std::size_t s = 0; s < spatial; ++s) {
                sg += grow[s] * nrow[s];
                sb += grow[s];
              }
              if (dg) dg[c] += sg;
              if (dbeta) dbeta[c] += sb;
            }
          }
        }
        if (!xn->requires_grad) return;
        T* dx = xn->grad_buffer();
        const T inv_c = T(1) / T(channels);
        Buffer<T> mean_d(spatial), mean_dn(spatial);
        for (std::size_t b = 0; b < batch; ++b) {
          std::fill(mean_d.begin(), mean_d.end(), T(0));
          std::fill(mean_dn.begin(), mean_dn.end(), T(0));
          for (std::size_t c = 0; c < channels; ++c) {
            const T* grow = dy + (b * channels + c) * spatial;
            const T* nrow = normalized.data() + (b * channels + c) * spatial;
            for (std::size_t s = 0; s < spatial; ++s) {
              const T d = grow[s] * gamma[c];
              mean_d[s] += d;
              mean_dn[s] += d * nrow[s];
            }
          }
          const T* r = rstd.data() + b * spatial;
          for (std::size_t c = 0; c < channels; ++c) {
            const T* grow = dy + (b * channels + c) * spatial;
            const T* nrow = normalized.data() + (b * channels + c) * spatial;
            T* drow = dx + (b * channels + c) * spatial;
            for (std::size_t s = 0; s < spatial; ++s) {
              const T d = grow[s] * gamma[c];
              drow[s] += r[s] * (d - mean_d[s] * inv_c - nrow[s] * mean_dn[s] * inv_c);
            }
          }
        }
      });
}

/// Exact (erf-based) GELU: x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  Buffer<T> out(x.numel());
  const auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = xs[i];
    out[i] = T(0.5) * v * (T(1) + std::erf(v * T(kInvSqrt2)));
  }
  return detail::make_result<T>(x.shape(), std::move(out), "gelu", {&x}, [xn = x.node()](const Node<T>& self) {
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    T* g = xn->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T v = xn->data[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * T(kInvSqrt2)));
      const T pdf = T(kInvSqrt2Pi) * std::exp(T(-0.5) * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

/// Softmax over the last axis, stabilized by subtracting the row maximum.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  if (x.rank() == 0) throw DimensionError("softmax_lastdim: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = n ? x.numel() / n : 0;
  Buffer<T> out(x.data().begin(), x.data().end());
  for (std::size_t r = 0; r < rows; ++r) {
    Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> row(out.data() + r * n, Eigen::Index(n));
    const T mx = row.maxCoeff();
    row = (row - mx).exp();
    row /= row.sum();
  }
  Buffer<T> saved = out;
  return detail::make_result<T>(x.shape(), std::move(out), "softmax", {&x},
                                [xn = x.node(), y = std::move(saved), n, rows](const Node<T>& self) {
                                  T* g = xn->grad_buffer();
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    const T* yr = y.data() + r * n;
                                    const T* dy = self.grad.data() + r * n;
                                    T dot = 0;
                                    for (std::size_t j = 0; j < n; ++j) dot += dy[j] * yr[j];
                                    for (std::size_t j = 0; j < n; ++j) g[r * n + j] += yr[j] * (dy[j] - dot);
                                  }
                                });
}

namespace detail {
// Source offset in the [B, C*r*r, H/r, W/r] (unshuffled) layout for the
// element at (b, c, y, x) of the [B, C, H, W] (shuffled) layout.
inline std::size_t unshuffled_offset(std::size_t b, std::size_t c, std::size_t y, std::size_t x, std::size_t channels,
                                     std::size_t h, std::size_t w, std::size_t r) {
  const std::size_t lh = h / r, lw = w / r;
  const std::size_t oc = (c * r + y % r) * r + x % r;
  return ((b * channels * r * r + oc) * lh + y / r) * lw + x / r;
}

// Applies the shuffle bijection: `full` is [B,C,H,W], `packed` is [B,C*r*r,H/r,W/r].
template <typename T, bool ToPacked, bool Accumulate>
void shuffle_kernel(const T* src, T* dst, std::size_t batch, std::size_t channels, std::size_t h, std::size_t w,
                    std::size_t r) {
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const std::size_t full = ((b * channels + c) * h + y) * w + x;
          const std::size_t packed = unshuffled_offset(b, c, y, x, channels, h, w, r);
          const std::size_t from = ToPacked ? full : packed;
          const std::size_t to = ToPacked ? packed : full;
          if constexpr (Accumulate) dst[to] += src[from];
          else dst[to] = src[from];
        }
}
}  // namespace detail

/// Space-to-depth: [B,C,H,W] -> [B,C*r*r,H/r,W/r]; output channel c*r*r + i*r + j
/// holds input pixels (r*y + i, r*x + j).
template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, std::size_t r) {
  if (x.rank() != 4) throw DimensionError("pixel_unshuffle: input must be [B,C,H,W]");
  if (r == 0 || x.dim(2) % r || x.dim(3) % r) {
    throw DimensionError("pixel_unshuffle: H (axis 2) = " + std::to_string(x.dim(2)) + " and W (axis 3) = " +
                         std::to_string(x.dim(3)) + " must be divisible by r = " + std::to_string(r));
  }
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Buffer<T> out(x.numel());
  detail::shuffle_kernel<T, true, false>(x.data().data(), out.data(), b, c, h, w, r);
  return detail::make_result<T>(Shape{b, c * r * r, h / r, w / r}, std::move(out), "pixel_unshuffle", {&x},
                                [xn = x.node(), b, c, h, w, r](const Node<T>& self) {
                                  detail::shuffle_kernel<T, false, true>(self.grad.data(), xn->grad_buffer(), b, c, h, w, r);
                                });
}

/// Depth-to-space, the inverse of pixel_unshuffle: [B,C,H,W] -> [B,C/(r*r),H*r,W*r].
template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t r) {
  if (x.rank() != 4) throw DimensionError("pixel_shuffle: input must be [B,C,H,W]");
  if (r == 0 || x.dim(1) % (r * r)) {
    throw DimensionError("pixel_shuffle: channels (axis 1) = " + std::to_string(x.dim(1)) +
                         " must be divisible by r*r = " + std::to_string(r * r));
  }
  const std::size_t b = x.dim(0), c = x.dim(1) / (r * r), h = x.dim(2) * r, w = x.dim(3) * r;
  Buffer<T> out(x.numel());
  detail::shuffle_kernel<T, false, false>(x.data().data(), out.data(), b, c, h, w, r);
  return detail::make_result<T>(Shape{b, c, h, w}, std::move(out), "pixel_shuffle", {&x},
                                [xn = x.node(), b, c, h, w, r](const Node<T>& self) {
                                  detail::shuffle_kernel<T, true, true>(self.grad.data(), xn->grad_buffer(), b, c, h, w, r);
                                });
}

/// Reflect-pads the bottom and right edges of a [B,C,H,W] tensor (edge pixel
/// not repeated). Each pad must be smaller than the extent it extends.
template <typename T>
Tensor<T> reflect_pad_bottom_right(const Tensor<T>& x, std::size_t pad_h, std::size_t pad_w) {
  if (x.rank() != 4) throw DimensionError("reflect_pad: input must be [B,C,H,W]");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if ((pad_h && pad_h >= h) || (pad_w && pad_w >= w)) {
    throw DimensionError("reflect_pad: padding " + std::to_string(pad_h) + "x" + std::to_string(pad_w) +
                         " too large for " + std::to_string(h) + "x" + std::to_string(w));
  }
  if (pad_h == 0 && pad_w == 0) return x;
  const std::size_t oh = h + pad_h, ow = w + pad_w;
  std::vector<std::size_t> rows(oh), cols(ow);
  for (std::size_t i = 0; i < oh; ++i) rows[i] = i < h ? i : 2 * h - 2 - i;
  for (std::size_t j = 0; j < ow; ++j) cols[j] = j < w ? j : 2 * w - 2 - j;
  Buffer<T> out(planes * oh * ow);
  const T* xd = x.data().data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) out[(p * oh + i) * ow + j] = xd[(p * h + rows[i]) * w + cols[j]];
  Shape out_shape{x.dim(0), x.dim(1), oh, ow};
  return detail::make_result<T>(out_shape, std::move(out), "reflect_pad", {&x},
                                [xn = x.node(), rows, cols, planes, h, w, oh, ow](const Node<T>& self) {
                                  T* g = xn->grad_buffer();
                                  for (std::size_t p = 0; p < planes; ++p)
                                    for (std::size_t i = 0; i < oh; ++i)
                                      for (std::size_t j = 0; j < ow; ++j)
                                        g[(p * h + rows[i]) * w + cols[j]] += self.grad[(p * oh + i) * ow + j];
                                });
}

/// Top-left H x W window of a [B,C,H',W'] tensor.
template <typename T>
Tensor<T> crop(const Tensor<T>& x, std::size_t h, std::size_t w) {
  if (x.dim(2) == h && x.dim(3) == w) return x;
  return slice(slice(x, 2, 0, h), 3, 0, w);
}

/// A 1x1 convolution followed by a 3x3 depthwise convolution, the local
/// projection used for attention Q/K/V and both DGFN branches.
template <typename T>
struct PointDepthwise {
  ConvWeights<T> point;
  ConvWeights<T> depthwise;
};

template <typename T>
Tensor<T> point_depthwise(const Tensor<T>& x, const PointDepthwise<T>& p) {
  return conv2d_same(conv2d(x, p.point, 0), p.depthwise);
}

}  // namespace llformer
