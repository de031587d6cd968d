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
#include <limits>
#include <random>
#include <cstdlib>
#include <sstream>
#include <stdexcept>
#include <string>

namespace llformer {

/// Seeded pseudo-random stream on top of std::mt19937_64, whose output
/// sequence is fixed by the C++ standard. The standard distributions are
/// implementation-defined, so the conversions to floating point are done here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return double(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform on the open interval (0, 1).
  double uniform_open() { return (double(engine_() >> 11) + 0.5) * 0x1.0p-53; }

  /// Uniform integer in [0, n), unbiased by rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v;
    do {
      v = engine_();
    } while (v >= limit);
    return v % n;
  }

  bool coin() { return (engine_() >> 63) != 0; }

  /// Standard normal via the Marsaglia polar method.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2 * uniform() - 1;
      v = 2 * uniform() - 1;
      s = u * u + v * v;
    } while (s >= 1 || s == 0);
    const double m = std::sqrt(-2 * std::log(s) / s);
    spare_ = v * m;
    has_spare_ = true;
    return u * m;
  }

  /// Normal with standard deviation `stddev`, redrawn until within `bound` deviations.
  double truncated_normal(double stddev, double bound = 2.0) {
    double z;
    do {
      z = normal();
    } while (std::abs(z) > bound);
    return z * stddev;
  }

  std::string state() const {
    std::ostringstream os;
    os << engine_ << ' ' << (has_spare_ ? 1 : 0) << ' ' << std::hexfloat << spare_;
    return os.str();
  }

  void set_state(const std::string& text) {
    std::istringstream is(text);
    int spare_flag = 0;
    std::string spare_text;
    is >> engine_ >> spare_flag >> spare_text;
    if (!is) throw std::invalid_argument("Rng: malformed state string");
    has_spare_ = spare_flag != 0;
    spare_ = std::strtod(spare_text.c_str(), nullptr);
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0;
};

/// SplitMix64 finalizer; derives independent seeds from (seed, index) pairs.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index = 0) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace llformer
