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

#include "oracles.hpp"
#include "test_util.hpp"

namespace {

using namespace llformer;
using testutil::probe_loss;
using testutil::random_tensor;

struct ConvCase {
  std::size_t in_c, out_c, k, groups, pad;
  bool bias;
};

class ConvOracle : public ::testing::TestWithParam<ConvCase> {};

TEST_P(ConvOracle, ForwardAndGradients) {
  const ConvCase c = GetParam();
  Rng rng(c.in_c * 31 + c.k * 7 + c.groups);
  ParamTable<double> table;
  ParamFactory<double> f(table, rng);
  ConvWeights<double> w = f.conv("c", c.out_c, c.in_c, c.k, c.groups, c.bias);
  testutil::randomize_biases(table, rng);
  Tensord x = random_tensor({2, c.in_c, 5, 4}, rng);
  Tensord y = conv2d(x, w, c.pad);
  const oracle::Array4 ref = oracle::conv2d(oracle::Array4(x), w, c.pad);
  ASSERT_EQ(y.shape(), (Shape{ref.n0, ref.n1, ref.n2, ref.n3}));
  EXPECT_LT(oracle::max_abs_diff(y, ref), 1e-12);

  EXPECT_LT(grad_check([&](const Tensord& p) { return probe_loss(conv2d(p, w, c.pad)); }, x, 1e-5), 1e-6);
  EXPECT_LT(grad_check(
                [&](const Tensord& k) {
                  ConvWeights<double> w2 = w;
                  w2.kernel = k;
                  return probe_loss(conv2d(x, w2, c.pad));
                },
                w.kernel, 1e-5),
            1e-6);
  if (c.bias) {
    EXPECT_LT(grad_check(
                  [&](const Tensord& b) {
                    ConvWeights<double> w2 = w;
                    w2.bias = b;
                    return probe_loss(conv2d(x, w2, c.pad));
                  },
                  w.bias, 1e-5),
              1e-6);
  }
}

INSTANTIATE_TEST_SUITE_P(Paths, ConvOracle,
                         ::testing::Values(ConvCase{3, 5, 1, 1, 0, true},    // pointwise
                                           ConvCase{4, 4, 3, 4, 1, false},   // depthwise
                                           ConvCase{4, 4, 3, 4, 0, true},    // depthwise, valid
                                           ConvCase{3, 6, 3, 1, 1, true},    // dense 3x3
                                           ConvCase{4, 6, 3, 2, 1, false},   // grouped
                                           ConvCase{2, 3, 5, 1, 2, true}));  // wide kernel

TEST(Conv, ShapeErrorsNameTheAxis) {
  Rng rng(1);
  ParamTable<double> table;
  ParamFactory<double> f(table, rng);
  auto w = f.conv("c", 4, 4, 3);
  try {
    conv2d(random_tensor({1, 3, 4, 4}, rng), w, 1);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("input channels"), std::string::npos);
  }
  EXPECT_THROW(conv2d(random_tensor({3, 4, 4}, rng), w, 1), DimensionError);
}

TEST(Conv, CountsMacs) {
  Rng rng(2);
  ParamTable<double> table;
  ParamFactory<double> f(table, rng);
  auto dense = f.conv("d", 6, 4, 3, 2);
  MacCounter counter;
  conv2d_same(random_tensor({1, 4, 8, 8}, rng), dense);
  EXPECT_EQ(counter.count(), 6u * 2 * 9 * 64);
}

TEST(LayerNorm, MatchesOracleAndGradients) {
  Rng rng(3);
  ParamTable<double> table;
  ParamFactory<double> f(table, rng);
  auto ln = f.layer_norm("ln", 5);
  for (auto& v : ln.gamma.mutable_data()) v = 0.5 + rng.uniform();
  for (auto& v : ln.beta.mutable_data()) v = rng.uniform() - 0.5;
  Tensord x = random_tensor({2, 5, 3, 4}, rng);
  EXPECT_LT(oracle::max_abs_diff(layer_norm(x, ln), oracle::layer_norm(oracle::Array4(x), ln)), 1e-12);
  EXPECT_LT(grad_check([&](const Tensord& p) { return probe_loss(layer_norm(p, ln)); }, x, 1e-5), 1e-6);
  EXPECT_LT(grad_check(
                [&](const Tensord& g) {
                  auto l2 = ln;
                  l2.gamma = g;
                  return probe_loss(layer_norm(x, l2));
                },
                ln.gamma, 1e-5),
            1e-6);
  EXPECT_LT(grad_check(
                [&](const Tensord& b) {
                  auto l2 = ln;
                  l2.beta = b;
                  return probe_loss(layer_norm(x, l2));
                },
                ln.beta, 1e-5),
            1e-6);
}

TEST(LayerNorm, ConstantChannelsGiveBeta) {
  ParamTable<double> table;
  Rng rng(4);
  ParamFactory<double> f(table, rng);
  auto ln = f.layer_norm("ln", 3);
  Tensord y = layer_norm(Tensord::full({1, 3, 2, 2}, 0.7), ln);
  for (double v : y.data()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(Gelu, ValuesAndGradient) {
  Tensord x({5}, {-3, -1, 0, 1, 3});
  Tensord y = gelu(x);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(y.data()[i], oracle::gelu(x.data()[i]), 1e-15);
  EXPECT_EQ(y.data()[2], 0.0);
  Rng rng(5);
  Tensord z = random_tensor({3, 7}, rng, -3, 3);
  EXPECT_LT(grad_check([&](const Tensord& p) { return probe_loss(gelu(p)); }, z, 1e-5), 1e-6);
}

TEST(Softmax, RowsSumToOneAndGradient) {
  Rng rng(6);
  Tensord x = random_tensor({4, 6}, rng, -5, 5);
  Tensord y = softmax_lastdim(x);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 6; ++j) s += y.at({r, j});
    EXPECT_NEAR(s, 1.0, 1e-14);
  }
  // Large logits must not overflow.
  Tensord big({1, 2}, {1000, 1000});
  EXPECT_DOUBLE_EQ(softmax_lastdim(big).data()[0], 0.5);
  EXPECT_LT(grad_check([&](const Tensord& p) { return probe_loss(softmax_lastdim(p)); }, x, 1e-5), 1e-6);
}

TEST(PixelShuffle, UnshuffleMatchesIndexOracleAndInverts) {
  Rng rng(7);
  Tensord x = random_tensor({2, 3, 4, 6}, rng);
  Tensord u = pixel_unshuffle(x, 2);
  ASSERT_EQ(u.shape(), (Shape{2, 12, 2, 3}));
  EXPECT_EQ(oracle::max_abs_diff(u, oracle::pixel_unshuffle(oracle::Array4(x), 2)), 0.0);
  EXPECT_EQ(testutil::values(pixel_shuffle(u, 2)), testutil::values(x));
  EXPECT_THROW(pixel_unshuffle(random_tensor({1, 1, 3, 4}, rng), 2), DimensionError);
  EXPECT_THROW(pixel_shuffle(random_tensor({1, 3, 2, 2}, rng), 2), DimensionError);
  EXPECT_LT(grad_check([&](const Tensord& p) { return probe_loss(pixel_unshuffle(p, 2)); }, x, 1e-5), 1e-7);
  EXPECT_LT(grad_check([&](const Tensord& p) { return probe_loss(pixel_shuffle(p, 2)); }, u, 1e-5), 1e-7);
}

TEST(ReflectPad, MirrorsWithoutEdgeRepeatAndCrops) {
  Tensord x({1, 1, 1, 4}, {1, 2, 3, 4});
  Tensord y = reflect_pad_bottom_right(x, 0, 2);
  EXPECT_EQ(testutil::values(y), (std::vector<double>{1, 2, 3, 4, 3, 2}));
  EXPECT_EQ(testutil::values(crop(y, 1, 4)), testutil::values(x));
  Rng rng(8);
  Tensord z = random_tensor({1, 2, 5, 3}, rng);
  EXPECT_LT(grad_check([&](const Tensord& p) { return probe_loss(reflect_pad_bottom_right(p, 3, 2)); }, z, 1e-5), 1e-7);
  EXPECT_THROW(reflect_pad_bottom_right(z, 5, 0), DimensionError);
}

TEST(PointDepthwise, ComposesPointThenDepthwise) {
  Rng rng(9);
  ParamTable<double> table;
  ParamFactory<double> f(table, rng);
  auto p = f.point_depthwise("pd", 3, 4);
  Tensord x = random_tensor({1, 3, 4, 4}, rng);
  EXPECT_LT(oracle::max_abs_diff(point_depthwise(x, p), oracle::point_depthwise(oracle::Array4(x), p)), 1e-12);
}

TEST(Finiteness, OpsKeepFiniteInputsFinite) {
  Rng rng(10);
  Tensord x = random_tensor({1, 4, 4, 4}, rng, -50, 50);
  ParamTable<double> table;
  ParamFactory<double> f(table, rng);
  auto ln = f.layer_norm("ln", 4);
  for (const Tensord& y : {gelu(x), softmax_lastdim(x), layer_norm(x, ln), layer_norm(Tensord::zeros({1, 4, 2, 2}), ln)}) {
    for (double v : y.data()) EXPECT_TRUE(std::isfinite(v));
  }
}

}  // namespace
