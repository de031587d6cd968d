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


#include <gtest/gtest.h>
#include <png.h>

#include <fstream>

#include "test_util.hpp"

namespace {

using namespace llformer;

// Writes raw samples with libpng in the requested layout.
void write_png(const std::string& path, std::uint32_t format, std::uint32_t w, std::uint32_t h, const void* data) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = w;
  img.height = h;
  img.format = format;
  ASSERT_TRUE(png_image_write_to_file(&img, path.c_str(), 0, data, 0, nullptr)) << img.message;
}

class ImageIo : public ::testing::Test {
 protected:
  void SetUp() override { dir_ = testutil::temp_dir("imageio"); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }
  std::filesystem::path dir_;
};

TEST_F(ImageIo, SingleWhitePixel) {
  const std::uint8_t px[3] = {255, 255, 255};
  write_png(path("w.png"), PNG_FORMAT_RGB, 1, 1, px);
  Image img = load_image(path("w.png"));
  EXPECT_EQ(img.shape(), (Shape{3, 1, 1}));
  for (float v : img.data()) EXPECT_EQ(v, 1.0f);
}

TEST_F(ImageIo, ChannelOrderAndLayout) {
  // 2x1 image: red then blue.
  const std::uint8_t px[6] = {255, 0, 0, 0, 0, 51};
  write_png(path("rb.png"), PNG_FORMAT_RGB, 2, 1, px);
  Image img = load_image(path("rb.png"));
  EXPECT_EQ(img.at({0, 0, 0}), 1.0f);
  EXPECT_EQ(img.at({2, 0, 0}), 0.0f);
  EXPECT_EQ(img.at({2, 0, 1}), 0.2f);
}

TEST_F(ImageIo, GrayscaleIsReplicated) {
  const std::uint8_t px[4] = {0, 51, 102, 255};
  write_png(path("g.png"), PNG_FORMAT_GRAY, 2, 2, px);
  Image img = load_image(path("g.png"));
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(img.at({c, 1, 0}), 0.4f);
}

TEST_F(ImageIo, RoundTripIsExactOnByteGrid) {
  std::vector<float> v(3 * 5 * 7);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = float((i * 37) % 256) / 255.0f;
  Image img({3, 5, 7}, v);
  save_image(path("rt.png"), img);
  EXPECT_TRUE(testutil::bit_equal(load_image(path("rt.png")).data(), img.data()));
}

TEST_F(ImageIo, QuantizationAndClamping) {
  Image img({3, 1, 4}, {0.5f, 1.2f, -0.3f, 0.0f, 0.5f, 1.2f, -0.3f, 0.0f, 0.5f, 1.2f, -0.3f, 0.0f});
  save_image(path("q.png"), img);
  Image back = load_image(path("q.png"));
  EXPECT_EQ(back.at({0, 0, 0}), 128.0f / 255.0f);
  EXPECT_EQ(back.at({0, 0, 1}), 1.0f);
  EXPECT_EQ(back.at({0, 0, 2}), 0.0f);
  Image bad({3, 1, 1}, {0.1f, std::nanf(""), 0.1f});
  EXPECT_THROW(save_image(path("nan.png"), bad), ContractError);
  EXPECT_THROW(save_image(path("r.png"), Image::zeros({1, 2, 2})), DimensionError);
}

TEST_F(ImageIo, RejectsUnsupportedFormats) {
  const std::uint16_t deep[3] = {65535, 0, 1000};
  write_png(path("16.png"), PNG_FORMAT_LINEAR_RGB, 1, 1, deep);
  try {
    load_image(path("16.png"));
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("bit depth 16"), std::string::npos) << e.what();
  }
  const std::uint8_t rgba[4] = {1, 2, 3, 4};
  write_png(path("a.png"), PNG_FORMAT_RGBA, 1, 1, rgba);
  try {
    load_image(path("a.png"));
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("RGBA"), std::string::npos) << e.what();
  }
  std::ofstream(path("j.jpg")) << "\xff\xd8\xff\xe0 not a png at all, padding padding padding";
  EXPECT_THROW(load_image(path("j.jpg")), FormatError);
  EXPECT_THROW(load_image(path("missing.png")), IoError);
}

TEST_F(ImageIo, ManifestRoundTripAndRelativePaths) {
  save_image(path("l.png"), Image::full({3, 2, 2}, 0.1f));
  save_image(path("n.png"), Image::full({3, 2, 2}, 0.9f));
  save_manifest(path("m.csv"), {{"a", "l.png", "n.png"}, {"b", path("l.png"), "n.png"}});
  auto recs = load_manifest(path("m.csv"));
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0].id, "a");
  EXPECT_EQ(std::filesystem::path(recs[0].low_path), dir_ / "l.png");
  EXPECT_EQ(std::filesystem::path(recs[1].normal_path), dir_ / "n.png");
}

TEST_F(ImageIo, ManifestColumnOrderIsFree) {
  save_image(path("l.png"), Image::full({3, 2, 2}, 0.1f));
  std::ofstream(path("m.csv")) << "normal,id,low\n,x,l.png\n";
  EXPECT_THROW(load_manifest(path("m.csv")), ManifestError);
  auto recs = load_manifest(path("m.csv"), false);
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(recs[0].id, "x");
  EXPECT_TRUE(recs[0].normal_path.empty());
}

TEST_F(ImageIo, ManifestReportsAllProblems) {
  save_image(path("l.png"), Image::full({3, 2, 2}, 0.1f));
  std::ofstream(path("m.csv")) << "id,low,normal\n"
                                  "a,l.png,l.png\n"
                                  "a,l.png,l.png\n"
                                  "b,gone.png,l.png\n"
                                  "c,l.png\n";
  try {
    load_manifest(path("m.csv"));
    FAIL();
  } catch (const ManifestError& e) {
    EXPECT_EQ(e.problems().size(), 3u) << e.what();
  }
  std::ofstream(path("h.csv")) << "name,low\n";
  try {
    load_manifest(path("h.csv"));
    FAIL();
  } catch (const ManifestError& e) {
    EXPECT_EQ(e.problems().size(), 2u);
  }
}

}  // namespace
