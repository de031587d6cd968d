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


// Loop-level reference implementations used only by the tests. They favour
// obviousness over speed and share no code with the library kernels.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "llformer/llformer.hpp"

namespace oracle {

using llformer::Shape;
using llformer::Tensord;

// Dense 4-D array helper over a flat vector.
struct Array4 {
  std::size_t n0 = 0, n1 = 0, n2 = 0, n3 = 0;
  std::vector<double> v;
  Array4() = default;
  Array4(std::size_t a, std::size_t b, std::size_t c, std::size_t d) : n0(a), n1(b), n2(c), n3(d), v(a * b * c * d, 0.0) {}
  explicit Array4(const Tensord& t) : n0(t.dim(0)), n1(t.dim(1)), n2(t.dim(2)), n3(t.dim(3)), v(t.data().begin(), t.data().end()) {}
  double& operator()(std::size_t a, std::size_t b, std::size_t c, std::size_t d) { return v[((a * n1 + b) * n2 + c) * n3 + d]; }
  double operator()(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const {
    return v[((a * n1 + b) * n2 + c) * n3 + d];
  }
  Tensord tensor() const { return Tensord({n0, n1, n2, n3}, v); }
};

inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                  std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  return c;
}

// Zero-padded stride-1 grouped cross-correlation.
inline Array4 conv2d(const Array4& x, const llformer::ConvWeights<double>& w, std::size_t pad) {
  const Array4 k(w.kernel);
  const std::size_t groups = w.groups;
  const std::size_t out_c = k.n0, in_per = k.n1, kh = k.n2, kw = k.n3;
  const std::size_t out_per = out_c / groups;
  const std::size_t oh = x.n2 + 2 * pad - kh + 1, ow = x.n3 + 2 * pad - kw + 1;
  Array4 y(x.n0, out_c, oh, ow);
  for (std::size_t b = 0; b < x.n0; ++b)
    for (std::size_t o = 0; o < out_c; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = w.bias.defined() ? w.bias.data()[o] : 0.0;
          const std::size_t g = o / out_per;
          for (std::size_t c = 0; c < in_per; ++c)
            for (std::size_t u = 0; u < kh; ++u)
              for (std::size_t v = 0; v < kw; ++v) {
                const long yy = long(i + u) - long(pad), xx = long(j + v) - long(pad);
                if (yy < 0 || xx < 0 || yy >= long(x.n2) || xx >= long(x.n3)) continue;
                acc += k(o, c, u, v) * x(b, g * in_per + c, std::size_t(yy), std::size_t(xx));
              }
          y(b, o, i, j) = acc;
        }
  return y;
}

inline Array4 point_depthwise(const Array4& x, const llformer::PointDepthwise<double>& p) {
  return conv2d(conv2d(x, p.point, 0), p.depthwise, 1);
}

inline double gelu(double x) { return 0.5 * x * (1 + std::erf(x / std::sqrt(2.0))); }

inline Array4 layer_norm(const Array4& x, const llformer::LayerNormParams<double>& p) {
  Array4 y = x;
  for (std::size_t b = 0; b < x.n0; ++b)
    for (std::size_t i = 0; i < x.n2; ++i)
      for (std::size_t j = 0; j < x.n3; ++j) {
        double mean = 0, var = 0;
        for (std::size_t c = 0; c < x.n1; ++c) mean += x(b, c, i, j);
        mean /= double(x.n1);
        for (std::size_t c = 0; c < x.n1; ++c) var += (x(b, c, i, j) - mean) * (x(b, c, i, j) - mean);
        var /= double(x.n1);
        for (std::size_t c = 0; c < x.n1; ++c) {
          y(b, c, i, j) = (x(b, c, i, j) - mean) / std::sqrt(var + p.epsilon) * p.gamma.data()[c] + p.beta.data()[c];
        }
      }
  return y;
}

inline void softmax(std::vector<double>& row) {
  double mx = row[0];
  for (double v : row) mx = std::max(mx, v);
  double total = 0;
  for (double& v : row) {
    v = std::exp(v - mx);
    total += v;
  }
  for (double& v : row) v /= total;
}

inline double temperature_of(const Tensord& t) { return t.defined() ? t.data()[0] : 1.0; }

// Attention along one axis, spelled out position by position.
inline Array4 axis_attention(const Array4& x, const llformer::AxisAttentionParams<double>& p, bool height) {
  const Array4 q = point_depthwise(x, p.q), k = point_depthwise(x, p.k), v = point_depthwise(x, p.v);
  const std::size_t heads = p.heads, d = x.n1 / heads;
  const std::size_t len = height ? x.n2 : x.n3, lines = height ? x.n3 : x.n2;
  const double scale = temperature_of(p.temperature) / p.alpha;
  Array4 o(x.n0, x.n1, x.n2, x.n3);
  auto at = [&](const Array4& a, std::size_t b, std::size_t c, std::size_t line, std::size_t pos) {
    return height ? a(b, c, pos, line) : a(b, c, line, pos);
  };
  for (std::size_t b = 0; b < x.n0; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t line = 0; line < lines; ++line)
        for (std::size_t i = 0; i < len; ++i) {
          std::vector<double> logits(len);
          for (std::size_t j = 0; j < len; ++j) {
            double dot = 0;
            for (std::size_t e = 0; e < d; ++e) dot += at(q, b, h * d + e, line, i) * at(k, b, h * d + e, line, j);
            logits[j] = dot * scale;
          }
          softmax(logits);
          for (std::size_t e = 0; e < d; ++e) {
            double acc = 0;
            for (std::size_t j = 0; j < len; ++j) acc += logits[j] * at(v, b, h * d + e, line, j);
            if (height) o(b, h * d + e, i, line) = acc;
            else o(b, h * d + e, line, i) = acc;
          }
        }
  return conv2d(o, p.out, 0);
}

inline Array4 full_msa(const Array4& x, const llformer::AxisAttentionParams<double>& p) {
  const Array4 q = point_depthwise(x, p.q), k = point_depthwise(x, p.k), v = point_depthwise(x, p.v);
  const std::size_t heads = p.heads, d = x.n1 / heads, hw = x.n2 * x.n3;
  const double scale = temperature_of(p.temperature) / p.alpha;
  Array4 o(x.n0, x.n1, x.n2, x.n3);
  for (std::size_t b = 0; b < x.n0; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < hw; ++i) {
        std::vector<double> logits(hw);
        for (std::size_t j = 0; j < hw; ++j) {
          double dot = 0;
          for (std::size_t e = 0; e < d; ++e) {
            dot += q(b, h * d + e, i / x.n3, i % x.n3) * k(b, h * d + e, j / x.n3, j % x.n3);
          }
          logits[j] = dot * scale;
        }
        softmax(logits);
        for (std::size_t e = 0; e < d; ++e) {
          double acc = 0;
          for (std::size_t j = 0; j < hw; ++j) acc += logits[j] * v(b, h * d + e, j / x.n3, j % x.n3);
          o(b, h * d + e, i / x.n3, i % x.n3) = acc;
        }
      }
  return conv2d(o, p.out, 0);
}

// Layer attention over N stacked maps; returns the [B, N*C, H, W] stack.
inline Array4 cafb(const std::vector<Array4>& features, const llformer::CafbParams<double>& p) {
  const std::size_t n = features.size(), c = features[0].n1, h = features[0].n2, w = features[0].n3;
  Array4 stacked(features[0].n0, n * c, h, w);
  for (std::size_t b = 0; b < stacked.n0; ++b)
    for (std::size_t l = 0; l < n; ++l)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j) stacked(b, l * c + ch, i, j) = features[l](b, ch, i, j);
  const Array4 q = point_depthwise(stacked, p.q), k = point_depthwise(stacked, p.k), v = point_depthwise(stacked, p.v);
  const double alpha = p.alpha > 0 ? p.alpha : std::sqrt(double(c * h * w));
  const double scale = temperature_of(p.temperature) / alpha;
  Array4 fused(stacked.n0, n * c, h, w);
  for (std::size_t b = 0; b < stacked.n0; ++b)
    for (std::size_t l = 0; l < n; ++l) {
      std::vector<double> logits(n);
      for (std::size_t m = 0; m < n; ++m) {
        double dot = 0;
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) dot += q(b, l * c + ch, i, j) * k(b, m * c + ch, i, j);
        logits[m] = dot * scale;
      }
      softmax(logits);
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j) {
            double acc = 0;
            for (std::size_t m = 0; m < n; ++m) acc += logits[m] * v(b, m * c + ch, i, j);
            fused(b, l * c + ch, i, j) = acc;
          }
    }
  Array4 out = conv2d(fused, p.out, 0);
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += stacked.v[i];
  return out;
}

// PyTorch-convention pixel unshuffle written from the index formula:
// out[b, c*r*r + i*r + j, y, x] = in[b, c, y*r + i, x*r + j].
inline Array4 pixel_unshuffle(const Array4& x, std::size_t r) {
  Array4 y(x.n0, x.n1 * r * r, x.n2 / r, x.n3 / r);
  for (std::size_t b = 0; b < x.n0; ++b)
    for (std::size_t c = 0; c < x.n1; ++c)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < r; ++j)
          for (std::size_t yy = 0; yy < y.n2; ++yy)
            for (std::size_t xx = 0; xx < y.n3; ++xx) y(b, c * r * r + i * r + j, yy, xx) = x(b, c, yy * r + i, xx * r + j);
  return y;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs_diff(const Tensord& a, const Array4& b) {
  return max_abs_diff(std::vector<double>(a.data().begin(), a.data().end()), b.v);
}

// Direct formulas for the image metrics.
inline double psnr(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  const double mse = s / double(a.size());
  return mse == 0 ? INFINITY : 10 * std::log10(1 / mse);
}

inline double mae(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / double(a.size());
}

// Sliding 11x11 Gaussian window evaluated directly at each valid position on
// the luminance of two [3,H,W] images.
inline double ssim(const std::vector<double>& a, const std::vector<double>& b, std::size_t h, std::size_t w) {
  const std::size_t plane = h * w;
  std::vector<double> la(plane), lb(plane);
  for (std::size_t k = 0; k < plane; ++k) {
    la[k] = 0.2126 * a[k] + 0.7152 * a[plane + k] + 0.0722 * a[2 * plane + k];
    lb[k] = 0.2126 * b[k] + 0.7152 * b[plane + k] + 0.0722 * b[2 * plane + k];
  }
  double win[11][11], total = 0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) {
      win[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * 1.5 * 1.5));
      total += win[i][j];
    }
  for (auto& row : win)
    for (double& v : row) v /= total;
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double sum = 0;
  std::size_t count = 0;
  for (std::size_t y = 0; y + 11 <= h; ++y)
    for (std::size_t x = 0; x + 11 <= w; ++x) {
      double ma = 0, mb = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          ma += win[i][j] * la[(y + i) * w + x + j];
          mb += win[i][j] * lb[(y + i) * w + x + j];
        }
      double va = 0, vb = 0, cov = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          const double da = la[(y + i) * w + x + j] - ma, db = lb[(y + i) * w + x + j] - mb;
          va += win[i][j] * da * da;
          vb += win[i][j] * db * db;
          cov += win[i][j] * da * db;
        }
      sum += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  return sum / double(count);
}

}  // namespace oracle
