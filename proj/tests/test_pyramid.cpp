#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "arflow/pyramid.hpp"
#include "test_support.hpp"

namespace arflow {
namespace {

using testing::random_tensor;

// Independent half-pixel bilinear resize, one output pixel at a time.
std::vector<double> resize_oracle(const std::vector<double>& src, std::size_t h, std::size_t w, std::size_t oh,
                                  std::size_t ow) {
  auto coord = [](std::size_t d, std::size_t in, std::size_t out) {
    double s = (d + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    return std::min(std::max(s, 0.0), static_cast<double>(in - 1));
  };
  std::vector<double> out(oh * ow);
  for (std::size_t y = 0; y < oh; ++y) {
    const double sy = coord(y, h, oh);
    const std::size_t y0 = static_cast<std::size_t>(sy), y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - y0;
    for (std::size_t x = 0; x < ow; ++x) {
      const double sx = coord(x, w, ow);
      const std::size_t x0 = static_cast<std::size_t>(sx), x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - x0;
      out[y * ow + x] = (1 - fy) * ((1 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1]) +
                        fy * ((1 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
    }
  }
  return out;
}

std::vector<ScaleSize> sizes(std::initializer_list<std::pair<std::size_t, std::size_t>> l) {
  std::vector<ScaleSize> v;
  for (auto [h, w] : l) v.push_back({h, w});
  return v;
}

TEST(ScaleSequence, HandDerivedSequences) {
  EXPECT_EQ(build_scale_sequence(32, 32, 4).scales, sizes({{4, 4}, {8, 8}, {16, 16}, {32, 32}}));
  EXPECT_EQ(build_scale_sequence(4, 4, 4).scales, sizes({{4, 4}}));
  auto uhd = build_scale_sequence(3840, 2160, 4);
  EXPECT_EQ(uhd.scales, sizes({{4, 3},
                               {8, 5},
                               {15, 9},
                               {30, 17},
                               {60, 34},
                               {120, 68},
                               {240, 135},
                               {480, 270},
                               {960, 540},
                               {1920, 1080},
                               {3840, 2160}}));
  EXPECT_EQ(uhd.count(), 11u);
}

TEST(ScaleSequence, DegenerateInputsGiveSingleScale) {
  EXPECT_EQ(build_scale_sequence(1, 1, 4).count(), 1u);
  EXPECT_EQ(build_scale_sequence(3, 100, 4).scales, sizes({{3, 100}}));
  EXPECT_THROW(build_scale_sequence(0, 5, 4), ContractError);
}

TEST(ScaleSequence, RecurrenceInvariantOnRandomSizes) {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<std::size_t> side(1, 5000), tau(1, 9);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t h = side(rng), w = side(rng), t = tau(rng);
    auto seq = build_scale_sequence(h, w, t);
    ASSERT_EQ(seq.finest(), (ScaleSize{h, w}));
    for (std::size_t s = 1; s < seq.count(); ++s) {
      EXPECT_EQ(seq[s - 1].height, (seq[s].height + 1) / 2);
      EXPECT_EQ(seq[s - 1].width, (seq[s].width + 1) / 2);
    }
    if (seq.count() > 1) {
      EXPECT_LE(std::min(seq[0].height, seq[0].width), t);
      EXPECT_GT(std::min(seq[1].height, seq[1].width), t);
    }
  }
}

TEST(ResidualTargets, ConstantImage) {
  auto img = Tensor<float>::full({1, 3, 32, 20}, 0.42f);
  auto seq = build_scale_sequence(32, 20);
  auto stack = residual_targets(img, seq);
  for (float v : stack.residuals[0].data()) EXPECT_EQ(v, 0.42f);
  for (std::size_t s = 1; s < seq.count(); ++s)
    for (float v : stack.residuals[s].data()) EXPECT_EQ(v, 0.0f);
}

TEST(ResidualTargets, TelescopingReconstruction) {
  std::mt19937_64 rng(22);
  std::uniform_int_distribution<std::size_t> side(1, 128);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t h = side(rng), w = side(rng);
    auto img = random_tensor<float>({1, 3, h, w}, rng);
    auto seq = build_scale_sequence(h, w);
    auto stack = residual_targets(img, seq);
    Tensor<float> est;
    for (const auto& r : stack.residuals) est = fuse_scale(est, r);
    for (std::size_t i = 0; i < img.numel(); ++i) ASSERT_NEAR(est.data()[i], img.data()[i], 1e-5);
  }
}

TEST(ResidualTargets, TwoScaleRampMatchesOracle) {
  const std::size_t h = 6, w = 7;
  std::vector<double> ramp(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) ramp[y * w + x] = 0.1 * x + 0.05 * y * y;
  Tensor<double> img({1, 1, h, w}, ramp);
  auto seq = build_scale_sequence(h, w);
  ASSERT_EQ(seq.count(), 2u);
  auto stack = residual_targets(img, seq);

  auto coarse = resize_oracle(ramp, h, w, 3, 4);
  auto up = resize_oracle(coarse, 3, 4, h, w);
  for (std::size_t i = 0; i < coarse.size(); ++i) EXPECT_NEAR(stack.residuals[0].data()[i], coarse[i], 1e-12);
  for (std::size_t i = 0; i < ramp.size(); ++i) EXPECT_NEAR(stack.residuals[1].data()[i], ramp[i] - up[i], 1e-12);
}

TEST(FuseScale, BaseCasesAndGroundTruth) {
  std::mt19937_64 rng(23);
  auto r = random_tensor<double>({1, 3, 8, 6}, rng);
  auto same = fuse_scale(Tensor<double>(), r);
  EXPECT_EQ(same.values(), r.values());
  auto zero_prev = fuse_scale(Tensor<double>::zeros({1, 3, 4, 3}), r);
  EXPECT_EQ(zero_prev.values(), r.values());

  auto prev = random_tensor<double>({1, 3, 4, 3}, rng);
  auto up_only = fuse_scale(prev, Tensor<double>::zeros({1, 3, 8, 6}));
  EXPECT_EQ(up_only.values(), bilinear_resize(prev, 8, 6).values());

  auto img = random_tensor<double>({1, 3, 16, 11}, rng);
  auto seq = build_scale_sequence(16, 11);
  auto stack = residual_targets(img, seq);
  for (std::size_t s = 1; s < seq.count(); ++s) {
    auto fused = fuse_scale(stack.sharp[s - 1], stack.residuals[s]);
    for (std::size_t i = 0; i < fused.numel(); ++i) EXPECT_NEAR(fused.data()[i], stack.sharp[s].data()[i], 1e-12);
  }
  EXPECT_THROW(fuse_scale(Tensor<double>::zeros({1, 3, 5, 3}), r), ContractError);
}

TEST(DetailLayer, ZeroCases) {
  std::mt19937_64 rng(24);
  auto img = random_tensor<float>({1, 3, 9, 7}, rng);
  const auto d1 = detail_layer(img, 1);
  for (float v : d1.data()) EXPECT_EQ(v, 0.0f);
  auto c = Tensor<float>::full({1, 3, 9, 7}, -0.25f);
  for (std::size_t d : {2u, 3u, 5u}) {
    const auto dl = detail_layer(c, d);
    for (float v : dl.data()) EXPECT_EQ(v, 0.0f);
  }
}

TEST(DetailLayer, CheckerboardMatchesResizeOracle) {
  std::vector<double> cb(64);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) cb[y * 8 + x] = (x + y) % 2 ? 1.0 : 0.0;
  auto d = detail_layer(Tensor<double>({1, 1, 8, 8}, cb), 2);
  auto up = resize_oracle(resize_oracle(cb, 8, 8, 4, 4), 4, 4, 8, 8);
  double max_abs = 0;
  for (std::size_t i = 0; i < 64; ++i) {
    EXPECT_NEAR(d.data()[i], cb[i] - up[i], 1e-12);
    max_abs = std::max(max_abs, std::abs(d.data()[i]));
  }
  EXPECT_GT(max_abs, 0.4);
}

TEST(RestoreFull, IdentityAndLinearityInAlpha) {
  std::mt19937_64 rng(25);
  for (auto [h, w, d] : {std::array<std::size_t, 3>{32, 32, 2}, {37, 29, 2}, {50, 21, 3}, {9, 9, 4}}) {
    auto blur = random_tensor<float>({1, 3, h, w}, rng);
    auto low = downsample(blur, d);
    auto restored = restore_full(low, blur, d, 1.0f);
    for (std::size_t i = 0; i < blur.numel(); ++i) ASSERT_NEAR(restored.data()[i], blur.data()[i], 1e-6);
  }

  auto blur = random_tensor<double>({1, 3, 20, 14}, rng);
  auto pred = random_tensor<double>({1, 3, 10, 7}, rng);
  auto a0 = restore_full(pred, blur, 2, 0.0);
  EXPECT_EQ(a0.values(), bilinear_resize(pred, 20, 14).values());
  auto a1 = restore_full(pred, blur, 2, 1.0);
  auto ahalf = restore_full(pred, blur, 2, 0.5);
  for (std::size_t i = 0; i < a0.numel(); ++i)
    EXPECT_NEAR(ahalf.data()[i], 0.5 * (a0.data()[i] + a1.data()[i]), 1e-12);

  // No downsampling: the prediction is already full resolution and is returned as is.
  auto full_pred = random_tensor<double>({1, 3, 20, 14}, rng);
  EXPECT_EQ(restore_full(full_pred, blur, 1, 1.0).values(), full_pred.values());
  EXPECT_THROW(restore_full(pred, blur, 3, 1.0), ContractError);
}

}  // namespace
}  // namespace arflow
