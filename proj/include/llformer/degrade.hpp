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
#include <cstdint>
#include <string>
#include <vector>

#include "llformer/errors.hpp"
#include "llformer/rng.hpp"
#include "llformer/tensor.hpp"

namespace llformer {

/// Luminance weights (Rec. 709), shared with the SSIM grayscale conversion.
inline constexpr double kLumaR = 0.2126;
inline constexpr double kLumaG = 0.7152;
inline constexpr double kLumaB = 0.0722;

/// Tone-adjustment settings in slider units: exposure in stops, the others in
/// [-100, 100]. All zero is the identity.
struct DegradationParams {
  double exposure = 0;    // [-5, 0]
  double highlights = 0;  // [75, 100]
  double shadows = 0;     // [-50, 0]
  double vibrance = 0;    // [-75, 0]
  double whites = 0;      // [0, 80]
  std::uint64_t seed = 0;
  double x = 0, y = 0, z = 0;

  static DegradationParams neutral() { return {}; }
};

/// Draws X, Y, Z (in that order) uniformly on the open interval (0, 1) from
/// `Rng(seed)` (std::mt19937_64, 53-bit conversion) and maps them to the
/// five settings.
inline DegradationParams sample_params_from(double x, double y, double z) {
  DegradationParams p;
  p.x = x;
  p.y = y;
  p.z = z;
  p.exposure = -5 + 5 * x * x;
  p.highlights = 50 * std::min(y, 0.5) + 75;
  p.shadows = -100 * std::min(z, 0.5);
  p.vibrance = -75 + 75 * x * x;
  p.whites = 16 * (5 - 5 * x * x);
  return p;
}

inline DegradationParams sample_params(std::uint64_t seed) {
  Rng rng(seed);
  const double x = rng.uniform_open();
  const double y = rng.uniform_open();
  const double z = rng.uniform_open();
  DegradationParams p = sample_params_from(x, y, z);
  p.seed = seed;
  return p;
}

namespace detail {

inline double smoothstep(double edge0, double edge1, double t) {
  const double u = std::clamp((t - edge0) / (edge1 - edge0), 0.0, 1.0);
  return u * u * (3 - 2 * u);
}

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

// One pixel, channels in place. Every stage ends with a clamp to [0, 1].
inline void degrade_pixel(double rgb[3], const DegradationParams& p) {
  auto luma = [&] { return kLumaR * rgb[0] + kLumaG * rgb[1] + kLumaB * rgb[2]; };

  if (p.exposure != 0) {
    const double gain = std::exp2(p.exposure);
    for (int c = 0; c < 3; ++c) rgb[c] = clamp01(rgb[c] * gain);
  }
  if (p.highlights != 0) {
    const double k = p.highlights / 100 * smoothstep(0.5, 1, luma()) * 0.5;
    for (int c = 0; c < 3; ++c) rgb[c] = clamp01(rgb[c] + k * (1 - rgb[c]));
  }
  if (p.shadows != 0) {
    const double k = p.shadows / 100 * smoothstep(0.5, 0, luma()) * 0.5;
    for (int c = 0; c < 3; ++c) rgb[c] = clamp01(rgb[c] + k * rgb[c]);
  }
  if (p.whites != 0) {
    const double k = p.whites / 100 * smoothstep(0.7, 1, luma()) * 0.5;
    for (int c = 0; c < 3; ++c) rgb[c] = clamp01(rgb[c] + k * (1 - rgb[c]));
  }
  if (p.vibrance != 0) {
    // HSV-style saturation (max - min) / max; hue and value are kept by
    // rescaling each channel's distance from the max.
    const double mx = std::max({rgb[0], rgb[1], rgb[2]});
    const double mn = std::min({rgb[0], rgb[1], rgb[2]});
    if (mx > 0 && mx > mn) {
      const double sat = (mx - mn) / mx;
      const double target = clamp01(sat * (1 + p.vibrance / 100 * (1 - sat)));
      const double ratio = target / sat;
      for (int c = 0; c < 3; ++c) rgb[c] = clamp01(mx - (mx - rgb[c]) * ratio);
    }
  }
}

}  // namespace detail

/// Applies exposure, highlights, shadows, whites and vibrance (in that
/// order) to a [3,H,W] image with values in [0, 1]. Arithmetic is in double
/// regardless of T.
template <typename T>
Tensor<T> apply_degradation(const Tensor<T>& image, const DegradationParams& p) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError("apply_degradation: image must be [3,H,W], got " + to_string(image.shape()));
  }
  const std::size_t plane = image.dim(1) * image.dim(2);
  const auto in = image.data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (!(in[i] >= T(0) && in[i] <= T(1))) {
      throw ContractError("apply_degradation: value " + std::to_string(double(in[i])) + " at flat index " +
                          std::to_string(i) + " is outside [0, 1]");
    }
  }
  std::vector<T> out(in.size());
  for (std::size_t k = 0; k < plane; ++k) {
    double rgb[3] = {double(in[k]), double(in[plane + k]), double(in[2 * plane + k])};
    detail::degrade_pixel(rgb, p);
    for (int c = 0; c < 3; ++c) out[c * plane + k] = T(rgb[c]);
  }
  return Tensor<T>(image.shape(), std::move(out));
}

/// Deterministic test scene of size [3,H,W]: a diagonal colour gradient,
/// a few flat discs and rectangles, and low-amplitude sinusoidal texture.
/// Values stay inside [0.02, 0.98].
inline Tensor<float> procedural_image(std::uint64_t seed, std::size_t h, std::size_t w) {
  Rng rng(seed);
  double base0[3], base1[3];
  for (int c = 0; c < 3; ++c) {
    base0[c] = 0.15 + 0.7 * rng.uniform();
    base1[c] = 0.15 + 0.7 * rng.uniform();
  }
  struct Shape2 {
    bool disc;
    double cy, cx, ry, rx, rgb[3];
  };
  std::vector<Shape2> shapes(4 + rng.below(4));
  for (auto& s : shapes) {
    s.disc = rng.coin();
    s.cy = rng.uniform() * double(h);
    s.cx = rng.uniform() * double(w);
    s.ry = (0.08 + 0.25 * rng.uniform()) * double(h);
    s.rx = (0.08 + 0.25 * rng.uniform()) * double(w);
    for (double& v : s.rgb) v = 0.05 + 0.9 * rng.uniform();
  }
  const double fy = 0.2 + 0.6 * rng.uniform(), fx = 0.2 + 0.6 * rng.uniform();
  const std::size_t plane = h * w;
  std::vector<float> out(3 * plane);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double t = (double(y) / double(h) + double(x) / double(w)) / 2;
      double rgb[3];
      for (int c = 0; c < 3; ++c) rgb[c] = base0[c] * (1 - t) + base1[c] * t;
      for (const auto& s : shapes) {
        const double dy = (double(y) - s.cy) / s.ry, dx = (double(x) - s.cx) / s.rx;
        const bool inside = s.disc ? dy * dy + dx * dx <= 1 : std::abs(dy) <= 1 && std::abs(dx) <= 1;
        if (inside) std::copy(s.rgb, s.rgb + 3, rgb);
      }
      const double texture = 0.04 * std::sin(fy * double(y)) * std::sin(fx * double(x));
      for (int c = 0; c < 3; ++c) out[c * plane + y * w + x] = float(std::clamp(rgb[c] + texture, 0.02, 0.98));
    }
  return Tensor<float>({3, h, w}, std::move(out));
}

}  // namespace llformer
