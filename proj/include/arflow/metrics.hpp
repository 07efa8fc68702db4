#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "arflow/errors.hpp"
#include "arflow/image_io.hpp"
#include "arflow/tensor.hpp"

namespace arflow {

// Stand-in for +inf PSNR in reports and tables.
inline constexpr double kPsnrCap = 99.0;

/// 10 log10(peak^2 / MSE); +inf for identical inputs.
inline double psnr(std::span<const double> a, std::span<const double> b, double peak) {
  detail::require(a.size() == b.size() && !a.empty(), "psnr: inputs must have the same nonzero size");
  detail::require(peak > 0, "psnr: peak must be positive");
  double se = 0;
  for (std::size_t i = 0; i < a.size(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
  if (se == 0) return std::numeric_limits<double>::infinity();
  const double mse = se / static_cast<double>(a.size());
  return 10.0 * std::log10(peak * peak / mse);
}

inline double capped_psnr(double v) { return std::min(v, kPsnrCap); }

/// Single-channel plane, row-major.
struct GrayPlane {
  std::size_t height = 0, width = 0;
  std::vector<double> px;
};

/// Channel mean of a [3, H, W] (or [1, 3, H, W]) tensor.
template <typename T>
GrayPlane to_gray(const Tensor<T>& t) {
  detail::require((t.rank() == 4 && t.dim(0) == 1) || t.rank() == 3,
                  "to_gray: expected [C, H, W] or [1, C, H, W], got " + shape_str(t.shape()));
  const std::size_t off = t.rank() - 3;
  const std::size_t c = t.dim(off), h = t.dim(off + 1), w = t.dim(off + 2);
  GrayPlane g{h, w, std::vector<double>(h * w, 0.0)};
  auto d = t.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h * w; ++i) g.px[i] += static_cast<double>(d[ch * h * w + i]);
  for (auto& v : g.px) v /= static_cast<double>(c);
  return g;
}

inline GrayPlane to_gray(const Image& img) {
  GrayPlane g{img.height, img.width, std::vector<double>(img.width * img.height)};
  for (std::size_t i = 0; i < g.px.size(); ++i)
    g.px[i] = (static_cast<double>(img.rgb[i * 3]) + img.rgb[i * 3 + 1] + img.rgb[i * 3 + 2]) / 3.0;
  return g;
}

/// Largest odd window no bigger than 11 that fits inside the image.
inline std::size_t ssim_window(std::size_t height, std::size_t width) {
  std::size_t w = std::min<std::size_t>({11, height, width});
  if (w % 2 == 0) --w;
  return w;
}

namespace detail {

inline std::vector<double> gaussian_taps(std::size_t size, double sigma) {
  std::vector<double> k(size);
  const double c = (static_cast<double>(size) - 1) / 2;
  double s = 0;
  for (std::size_t i = 0; i < size; ++i) {
    const double x = static_cast<double>(i) - c;
    k[i] = std::exp(-x * x / (2 * sigma * sigma));
    s += k[i];
  }
  for (auto& v : k) v /= s;
  return k;
}

// Separable valid-mode filtering.
inline std::vector<double> filter_valid(const std::vector<double>& img, std::size_t h, std::size_t w,
                                        const std::vector<double>& k) {
  const std::size_t n = k.size(), oh = h - n + 1, ow = w - n + 1;
  std::vector<double> rows(h * ow, 0.0), out(oh * ow, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) s += k[i] * img[y * w + x + i];
      rows[y * ow + x] = s;
    }
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) s += k[i] * rows[(y + i) * ow + x];
      out[y * ow + x] = s;
    }
  return out;
}

}  // namespace detail

/// Mean SSIM over all window positions that fit entirely inside the image.
/// Gaussian window 11x11 (sigma 1.5), K1 = 0.01, K2 = 0.03, L = peak.
/// Identical inputs return exactly 1.
inline double ssim(const GrayPlane& a, const GrayPlane& b, double peak) {
  detail::require(a.height == b.height && a.width == b.width && !a.px.empty(), "ssim: images differ in size");
  detail::require(peak > 0, "ssim: peak must be positive");
  if (a.px == b.px) return 1.0;
  const std::size_t h = a.height, w = a.width;
  const auto k = detail::gaussian_taps(ssim_window(h, w), 1.5);
  std::vector<double> aa(a.px.size()), bb(a.px.size()), ab(a.px.size());
  for (std::size_t i = 0; i < a.px.size(); ++i) {
    aa[i] = a.px[i] * a.px[i];
    bb[i] = b.px[i] * b.px[i];
    ab[i] = a.px[i] * b.px[i];
  }
  const auto mu_a = detail::filter_valid(a.px, h, w, k), mu_b = detail::filter_valid(b.px, h, w, k);
  const auto e_aa = detail::filter_valid(aa, h, w, k), e_bb = detail::filter_valid(bb, h, w, k);
  const auto e_ab = detail::filter_valid(ab, h, w, k);
  const double c1 = (0.01 * peak) * (0.01 * peak), c2 = (0.03 * peak) * (0.03 * peak);
  double total = 0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double va = e_aa[i] - ma * ma, vb = e_bb[i] - mb * mb, cov = e_ab[i] - ma * mb;
    total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(mu_a.size());
}

inline double psnr(const Image& a, const Image& b) {
  detail::require(a.width == b.width && a.height == b.height, "psnr: images differ in size");
  std::vector<double> x(a.rgb.begin(), a.rgb.end()), y(b.rgb.begin(), b.rgb.end());
  return psnr(x, y, 255.0);
}

inline double ssim(const Image& a, const Image& b) { return ssim(to_gray(a), to_gray(b), 255.0); }

template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double peak) {
  detail::require(a.shape() == b.shape(), "psnr: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> x(a.data().begin(), a.data().end()), y(b.data().begin(), b.data().end());
  return psnr(x, y, peak);
}

template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, double peak) {
  detail::require(a.shape() == b.shape(), "ssim: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return ssim(to_gray(a), to_gray(b), peak);
}

}  // namespace arflow
