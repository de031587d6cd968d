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
#include <cstdio>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "llformer/degrade.hpp"
#include "llformer/errors.hpp"
#include "llformer/tensor.hpp"

namespace llformer {

namespace detail {

template <typename T>
void require_same_image_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  if (a.numel() == 0) throw DimensionError(std::string(op) + ": empty image");
}

// [3,H,W] -> H*W luminance; [1,H,W] or [H,W] is used as is.
template <typename T>
std::vector<double> luminance(const Tensor<T>& img, std::size_t& h, std::size_t& w) {
  const auto d = img.data();
  if (img.rank() == 2 || (img.rank() == 3 && img.dim(0) == 1)) {
    h = img.dim(img.rank() - 2);
    w = img.dim(img.rank() - 1);
    return std::vector<double>(d.begin(), d.end());
  }
  if (img.rank() != 3 || img.dim(0) != 3) {
    throw DimensionError("ssim: image must be [3,H,W], [1,H,W] or [H,W], got " + to_string(img.shape()));
  }
  h = img.dim(1);
  w = img.dim(2);
  const std::size_t plane = h * w;
  std::vector<double> out(plane);
  for (std::size_t k = 0; k < plane; ++k) {
    out[k] = kLumaR * double(d[k]) + kLumaG * double(d[plane + k]) + kLumaB * double(d[2 * plane + k]);
  }
  return out;
}

inline std::vector<double> gaussian_taps(std::size_t size, double sigma) {
  std::vector<double> g(size);
  const double centre = double(size - 1) / 2;
  double total = 0;
  for (std::size_t i = 0; i < size; ++i) {
    g[i] = std::exp(-(double(i) - centre) * (double(i) - centre) / (2 * sigma * sigma));
    total += g[i];
  }
  for (auto& v : g) v /= total;
  return g;
}

// Separable valid-mode filtering: (h - k + 1) x (w - k + 1) output.
inline std::vector<double> filter_valid(const std::vector<double>& src, std::size_t h, std::size_t w,
                                        const std::vector<double>& taps) {
  const std::size_t k = taps.size();
  const std::size_t oh = h - k + 1, ow = w - k + 1;
  std::vector<double> rows(h * ow);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0;
      for (std::size_t t = 0; t < k; ++t) acc += taps[t] * src[y * w + x + t];
      rows[y * ow + x] = acc;
    }
  std::vector<double> out(oh * ow);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0;
      for (std::size_t t = 0; t < k; ++t) acc += taps[t] * rows[(y + t) * ow + x];
      out[y * ow + x] = acc;
    }
  return out;
}

}  // namespace detail

inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

/// Mean squared error over every element, accumulated in double.
template <typename T>
double mse(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_image_shape(a, b, "mse");
  const auto x = a.data(), y = b.data();
  double acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = double(x[i]) - double(y[i]);
    acc += d * d;
  }
  return acc / double(x.size());
}

/// Peak signal-to-noise ratio with peak value 1. Identical images give +inf.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b) {
  const double e = mse(a, b);
  if (e == 0) return std::numeric_limits<double>::infinity();
  return 10 * std::log10(1 / e);
}

template <typename T>
double mae(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_image_shape(a, b, "mae");
  const auto x = a.data(), y = b.data();
  double acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += std::abs(double(x[i]) - double(y[i]));
  return acc / double(x.size());
}

/// Mean SSIM of the luminance channels: 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, dynamic range 1, averaged over valid window
/// positions only (no padding).
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_image_shape(a, b, "ssim");
  std::size_t h, w;
  const std::vector<double> x = detail::luminance(a, h, w);
  const std::vector<double> y = detail::luminance(b, h, w);
  if (h < kSsimWindow || w < kSsimWindow) {
    throw ContractError("ssim: image " + std::to_string(h) + "x" + std::to_string(w) + " is smaller than the " +
                        std::to_string(kSsimWindow) + "x" + std::to_string(kSsimWindow) + " window");
  }
  const auto taps = detail::gaussian_taps(kSsimWindow, kSsimSigma);
  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mu_x = detail::filter_valid(x, h, w, taps);
  const auto mu_y = detail::filter_valid(y, h, w, taps);
  const auto e_xx = detail::filter_valid(xx, h, w, taps);
  const auto e_yy = detail::filter_valid(yy, h, w, taps);
  const auto e_xy = detail::filter_valid(xy, h, w, taps);
  const double c1 = (kSsimK1 * 1) * (kSsimK1 * 1);
  const double c2 = (kSsimK2 * 1) * (kSsimK2 * 1);
  double total = 0;
  for (std::size_t i = 0; i < mu_x.size(); ++i) {
    const double mx = mu_x[i], my = mu_y[i];
    const double vx = e_xx[i] - mx * mx;
    const double vy = e_yy[i] - my * my;
    const double cxy = e_xy[i] - mx * my;
    total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
  }
  return total / double(mu_x.size());
}

struct MetricRecord {
  std::string id;
  double psnr_db = 0;
  double ssim = 0;
  double mae = 0;
};

/// Per-image scores plus their means. PSNR of identical images is reported
/// as "inf"; one infinite entry makes the mean infinite.
struct MetricReport {
  std::vector<MetricRecord> records;

  MetricRecord mean() const {
    MetricRecord m{"mean"};
    if (records.empty()) return m;
    for (const auto& r : records) {
      m.psnr_db += r.psnr_db;
      m.ssim += r.ssim;
      m.mae += r.mae;
    }
    const double n = double(records.size());
    m.psnr_db /= n;
    m.ssim /= n;
    m.mae /= n;
    return m;
  }

  static std::string format(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
  }

  static std::string row(const MetricRecord& r) {
    return r.id + "," + format(r.psnr_db) + "," + format(r.ssim) + "," + format(r.mae);
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "id,psnr_db,ssim,mae\n";
    for (const auto& r : records) os << row(r) << '\n';
    os << row(mean()) << '\n';
    return os.str();
  }
};

template <typename T>
MetricRecord evaluate_pair(const std::string& id, const Tensor<T>& enhanced, const Tensor<T>& reference) {
  return MetricRecord{id, psnr(enhanced, reference), ssim(enhanced, reference), mae(enhanced, reference)};
}

}  // namespace llformer
