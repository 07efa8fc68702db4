#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "arflow/errors.hpp"
#include "arflow/image_io.hpp"

namespace arflow {

struct SynthConfig {
  std::size_t count = 200;
  std::size_t size = 48;
  double blur_sigma = 1.5;
  std::uint64_t seed = 0;
  std::size_t shapes = 6;  // per image, on top of a gradient background
};

/// Random smooth background with rectangles, discs and thick lines in flat colors.
inline Image procedural_image(std::size_t size, std::size_t shapes, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto color = [&] { return std::array<double, 3>{u(rng) * 255, u(rng) * 255, u(rng) * 255}; };
  const auto c0 = color(), c1 = color();
  const double angle = u(rng) * 6.283185307179586;
  const double gx = std::cos(angle), gy = std::sin(angle);
  const double n = static_cast<double>(size);

  std::vector<double> px(size * size * 3);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double f = std::clamp(0.5 + ((x - n / 2) * gx + (y - n / 2) * gy) / n, 0.0, 1.0);
      for (std::size_t c = 0; c < 3; ++c) px[(y * size + x) * 3 + c] = c0[c] + f * (c1[c] - c0[c]);
    }

  for (std::size_t k = 0; k < shapes; ++k) {
    const auto col = color();
    const int kind = static_cast<int>(u(rng) * 3);
    const double cx = u(rng) * n, cy = u(rng) * n;
    const double a = (0.1 + 0.3 * u(rng)) * n, b = (0.1 + 0.3 * u(rng)) * n;
    const double dx = std::cos(u(rng) * 6.283185307179586), dy = std::sqrt(1 - dx * dx);
    const double thick = 1.0 + 2.0 * u(rng);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double px_ = x + 0.5 - cx, py_ = y + 0.5 - cy;
        bool inside = false;
        if (kind == 0) inside = std::abs(px_) <= a / 2 && std::abs(py_) <= b / 2;
        else if (kind == 1) inside = px_ * px_ + py_ * py_ <= (a / 2) * (a / 2);
        else inside = std::abs(px_ * dy - py_ * dx) <= thick && std::abs(px_ * dx + py_ * dy) <= a;
        if (inside)
          for (std::size_t c = 0; c < 3; ++c) px[(y * size + x) * 3 + c] = col[c];
      }
  }

  Image img(size, size);
  for (std::size_t i = 0; i < px.size(); ++i)
    img.rgb[i] = static_cast<std::uint8_t>(std::lround(std::clamp(px[i], 0.0, 255.0)));
  return img;
}

/// Separable Gaussian blur, radius ceil(3 sigma), edge pixels replicated.
inline Image gaussian_blur(const Image& src, double sigma) {
  detail::require(sigma > 0, "gaussian_blur: sigma must be positive");
  const int radius = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * radius + 1);
  double s = 0;
  for (int i = -radius; i <= radius; ++i) s += k[i + radius] = std::exp(-(i * i) / (2 * sigma * sigma));
  for (auto& v : k) v /= s;

  const int w = static_cast<int>(src.width), h = static_cast<int>(src.height);
  std::vector<double> tmp(src.rgb.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i)
          acc += k[i + radius] * src.rgb[(y * w + std::clamp(x + i, 0, w - 1)) * 3 + c];
        tmp[(y * w + x) * 3 + c] = acc;
      }
  Image out(src.width, src.height);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp[(std::clamp(y + i, 0, h - 1) * w + x) * 3 + c];
        out.rgb[(y * w + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(acc, 0.0, 255.0)));
      }
  return out;
}

/// Writes <root>/sharp/NNNN.png and the blurred copy <root>/blur/NNNN.png.
inline void write_synthetic_dataset(const std::filesystem::path& root, const SynthConfig& cfg) {
  detail::require(cfg.count >= 1 && cfg.size >= 1, "synth: count and size must be positive");
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(root / "blur", ec);
  fs::create_directories(root / "sharp", ec);
  if (!fs::is_directory(root / "blur") || !fs::is_directory(root / "sharp"))
    throw DataError(root.string() + ": cannot create dataset directories");
  std::mt19937_64 rng(cfg.seed);
  for (std::size_t i = 0; i < cfg.count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%04zu.png", i);
    const Image sharp = procedural_image(cfg.size, cfg.shapes, rng);
    write_png(sharp, root / "sharp" / name);
    write_png(gaussian_blur(sharp, cfg.blur_sigma), root / "blur" / name);
  }
}

}  // namespace arflow
