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

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "llformer/errors.hpp"
#include "llformer/tensor.hpp"

namespace llformer {

/// Images are [3,H,W] float tensors with values in [0, 1].
using Image = Tensor<float>;

namespace detail {

struct PngHeader {
  std::uint32_t width = 0, height = 0;
  int bit_depth = 0, color_type = 0;
};

inline std::uint32_t read_be32(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

// Signature plus the IHDR chunk, which the format requires to come first.
inline PngHeader read_png_header(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image '" + path + "'");
  unsigned char buf[33];
  in.read(reinterpret_cast<char*>(buf), sizeof buf);
  if (in.gcount() != std::streamsize(sizeof buf)) throw FormatError("'" + path + "' is too short to be a PNG file");
  static const unsigned char signature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (!std::equal(signature, signature + 8, buf)) throw FormatError("'" + path + "' is not a PNG file (only PNG is supported)");
  if (!std::equal(buf + 12, buf + 16, reinterpret_cast<const unsigned char*>("IHDR"))) {
    throw FormatError("'" + path + "': PNG header chunk missing");
  }
  PngHeader h;
  h.width = read_be32(buf + 16);
  h.height = read_be32(buf + 20);
  h.bit_depth = buf[24];
  h.color_type = buf[25];
  return h;
}

inline const char* color_type_name(int t) {
  switch (t) {
    case 0: return "grayscale";
    case 2: return "RGB";
    case 3: return "palette";
    case 4: return "grayscale+alpha";
    case 6: return "RGBA";
    default: return "unknown";
  }
}

inline std::uint8_t to_byte(float v) {
  const double c = std::clamp(double(v), 0.0, 1.0);
  return std::uint8_t(std::floor(c * 255 + 0.5));
}

}  // namespace detail

/// Decodes an 8-bit RGB or grayscale PNG. Grayscale is replicated to three
/// channels; values are byte / 255.
inline Image load_image(const std::string& path) {
  const detail::PngHeader header = detail::read_png_header(path);
  if (header.bit_depth != 8) {
    throw FormatError("'" + path + "': unsupported PNG bit depth " + std::to_string(header.bit_depth) +
                      " (only 8-bit is supported)");
  }
  if (header.color_type != 0 && header.color_type != 2) {
    throw FormatError("'" + path + "': unsupported PNG color type " + detail::color_type_name(header.color_type) +
                      " (only RGB and grayscale are supported)");
  }
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw FormatError("'" + path + "': " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  const std::size_t h = img.height, w = img.width;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, bytes.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw FormatError("'" + path + "': " + msg);
  }
  const std::size_t plane = h * w;
  std::vector<float> data(3 * plane);
  for (std::size_t k = 0; k < plane; ++k)
    for (std::size_t c = 0; c < 3; ++c) data[c * plane + k] = float(bytes[3 * k + c]) / 255.0f;
  return Image({3, h, w}, std::move(data));
}

/// Encodes a [3,H,W] image as 8-bit RGB PNG: values are clamped to [0, 1]
/// and rounded half up, byte = floor(255 v + 0.5). NaN is rejected.
template <typename T>
void save_image(const std::string& path, const Tensor<T>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError("save_image: image must be [3,H,W], got " + to_string(image.shape()));
  }
  const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
  const auto d = image.data();
  std::vector<std::uint8_t> bytes(3 * plane);
  for (std::size_t k = 0; k < plane; ++k)
    for (std::size_t c = 0; c < 3; ++c) {
      const T v = d[c * plane + k];
      if (std::isnan(double(v))) throw ContractError("save_image: NaN value in image for '" + path + "'");
      bytes[3 * k + c] = detail::to_byte(float(v));
    }
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = png_uint_32(w);
  img.height = png_uint_32(h);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    throw IoError("cannot write '" + path + "': " + img.message);
  }
}

/// One dataset entry. `normal_path` is empty when no reference is given.
struct ImageRecord {
  std::string id;
  std::string low_path;
  std::string normal_path;
};

/// Manifest problems, reported together.
class ManifestError : public FormatError {
 public:
  explicit ManifestError(std::vector<std::string> problems)
      : FormatError(join(problems)), problems_(std::move(problems)) {}
  const std::vector<std::string>& problems() const noexcept { return problems_; }

 private:
  static std::string join(const std::vector<std::string>& p) {
    std::string s = "manifest has " + std::to_string(p.size()) + " problem(s):";
    for (const auto& m : p) s += "\n  " + m;
    return s;
  }
  std::vector<std::string> problems_;
};

namespace detail {

inline std::vector<std::string> split_csv_line(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace detail

/// Reads a CSV manifest with header columns id, low, normal (any order; no
/// quoting). Relative paths are resolved against the manifest's directory.
/// An empty `normal` cell is allowed when `require_normal` is false. Records
/// keep file order.
inline std::vector<ImageRecord> load_manifest(const std::string& path, bool require_normal = true) {
  namespace fs = std::filesystem;
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path + "'");
  const fs::path base = fs::path(path).parent_path();
  std::string line;
  if (!std::getline(in, line)) throw ManifestError({"empty file, expected header 'id,low,normal'"});
  const auto header = detail::split_csv_line(line);
  int col_id = -1, col_low = -1, col_normal = -1;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "id") col_id = int(i);
    if (header[i] == "low") col_low = int(i);
    if (header[i] == "normal") col_normal = int(i);
  }
  std::vector<std::string> problems;
  if (col_id < 0) problems.push_back("missing column 'id'");
  if (col_low < 0) problems.push_back("missing column 'low'");
  if (col_normal < 0) problems.push_back("missing column 'normal'");
  if (!problems.empty()) throw ManifestError(problems);

  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? p : (base / p).string(); };
  std::vector<ImageRecord> records;
  std::set<std::string> seen;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      problems.push_back("line " + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                         " fields, found " + std::to_string(cells.size()));
      continue;
    }
    ImageRecord r{cells[std::size_t(col_id)], cells[std::size_t(col_low)], cells[std::size_t(col_normal)]};
    if (r.id.empty()) problems.push_back("line " + std::to_string(lineno) + ": empty id");
    if (!seen.insert(r.id).second) problems.push_back("line " + std::to_string(lineno) + ": duplicate id '" + r.id + "'");
    if (r.low_path.empty()) {
      problems.push_back("line " + std::to_string(lineno) + ": empty low path");
    } else {
      r.low_path = resolve(r.low_path);
      if (!fs::exists(r.low_path)) problems.push_back("line " + std::to_string(lineno) + ": missing file '" + r.low_path + "'");
    }
    if (r.normal_path.empty()) {
      if (require_normal) problems.push_back("line " + std::to_string(lineno) + ": empty normal path");
    } else {
      r.normal_path = resolve(r.normal_path);
      if (!fs::exists(r.normal_path)) {
        problems.push_back("line " + std::to_string(lineno) + ": missing file '" + r.normal_path + "'");
      }
    }
    records.push_back(std::move(r));
  }
  if (!problems.empty()) throw ManifestError(problems);
  return records;
}

/// Writes a manifest; paths are written as given.
inline void save_manifest(const std::string& path, const std::vector<ImageRecord>& records) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest '" + path + "'");
  out << "id,low,normal\n";
  for (const auto& r : records) out << r.id << ',' << r.low_path << ',' << r.normal_path << '\n';
  if (!out) throw IoError("write failed for manifest '" + path + "'");
}

}  // namespace llformer
