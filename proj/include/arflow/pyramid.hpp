#pragma once

#include <algorithm>
#include <cstddef>
#include <utility>
#include <vector>

#include "arflow/errors.hpp"
#include "arflow/ops.hpp"
#include "arflow/tensor.hpp"

namespace arflow {

struct ScaleSize {
  std::size_t height = 0;
  std::size_t width = 0;
  friend bool operator==(const ScaleSize&, const ScaleSize&) = default;
};

/// Resolutions from coarsest (index 0) to the target resolution (last).
struct ScaleSequence {
  std::vector<ScaleSize> scales;
  std::size_t tau_min = 4;

  std::size_t count() const { return scales.size(); }
  const ScaleSize& operator[](std::size_t i) const { return scales[i]; }
  const ScaleSize& finest() const { return scales.back(); }
  const ScaleSize& coarsest() const { return scales.front(); }
};

inline std::size_t ceil_half(std::size_t v) { return (v + 1) / 2; }

/// Ceiling-halves (height, width) until the shorter side is at most tau_min.
/// Inputs already at or below tau_min give a single-scale sequence.
inline ScaleSequence build_scale_sequence(std::size_t height, std::size_t width, std::size_t tau_min = 4) {
  detail::require(height >= 1 && width >= 1, "build_scale_sequence: image must be at least 1x1");
  detail::require(tau_min >= 1, "build_scale_sequence: tau_min must be >= 1");
  ScaleSequence seq;
  seq.tau_min = tau_min;
  ScaleSize cur{height, width};
  seq.scales.push_back(cur);
  while (std::min(cur.height, cur.width) > tau_min) {
    cur = ScaleSize{ceil_half(cur.height), ceil_half(cur.width)};
    seq.scales.push_back(cur);
  }
  std::reverse(seq.scales.begin(), seq.scales.end());
  return seq;
}

template <typename T>
Tensor<T> resize_to(const Tensor<T>& img, const ScaleSize& size) {
  return bilinear_resize(img, size.height, size.width);
}

/// Per-scale ground truth for one batch of sharp images.
template <typename T>
struct ResidualStack {
  std::vector<Tensor<T>> sharp;      // I_sharp^s, bilinear resize of the full-resolution image
  std::vector<Tensor<T>> prev_up;    // Up(I_sharp^{s-1}), zero at the coarsest scale
  std::vector<Tensor<T>> residuals;  // r^s = sharp[s] - prev_up[s]
};

template <typename T>
ResidualStack<T> residual_targets(const Tensor<T>& sharp_full, const ScaleSequence& seq) {
  detail::require_rank(sharp_full, 4, "residual_targets");
  detail::require(sharp_full.dim(2) == seq.finest().height && sharp_full.dim(3) == seq.finest().width,
                  "residual_targets: image does not match the finest scale");
  ResidualStack<T> stack;
  for (std::size_t s = 0; s < seq.count(); ++s) {
    Tensor<T> cur = resize_to(sharp_full, seq[s]);
    Tensor<T> up = s == 0 ? Tensor<T>::zeros(cur.shape()) : resize_to(stack.sharp.back(), seq[s]);
    stack.residuals.push_back(sub(cur, up));
    stack.prev_up.push_back(std::move(up));
    stack.sharp.push_back(std::move(cur));
  }
  return stack;
}

/// Up(prev) + residual. An undefined prev stands for the zero image at the coarsest scale.
template <typename T>
Tensor<T> fuse_scale(const Tensor<T>& prev, const Tensor<T>& residual) {
  detail::require_rank(residual, 4, "fuse_scale residual");
  if (!prev.defined()) return residual;
  detail::require_rank(prev, 4, "fuse_scale prev");
  detail::require(prev.dim(0) == residual.dim(0) && prev.dim(1) == residual.dim(1),
                  "fuse_scale: batch/channel mismatch " + shape_str(prev.shape()) + " vs " +
                      shape_str(residual.shape()));
  detail::require(ceil_half(residual.dim(2)) == prev.dim(2) && ceil_half(residual.dim(3)) == prev.dim(3),
                  "fuse_scale: " + shape_str(prev.shape()) + " is not the scale below " +
                      shape_str(residual.shape()));
  return add(bilinear_resize(prev, residual.dim(2), residual.dim(3)), residual);
}

/// Resolution after downsampling by factor d (ceiling division on both sides).
inline ScaleSize downsampled_size(std::size_t height, std::size_t width, std::size_t factor) {
  detail::require(factor >= 1, "downsample factor must be >= 1");
  return ScaleSize{(height + factor - 1) / factor, (width + factor - 1) / factor};
}

template <typename T>
Tensor<T> downsample(const Tensor<T>& img, std::size_t factor) {
  if (factor == 1) return img;
  return resize_to(img, downsampled_size(img.dim(2), img.dim(3), factor));
}

/// D = I - Up(Down(I)); identically zero for factor 1.
template <typename T>
Tensor<T> detail_layer(const Tensor<T>& blur_full, std::size_t factor) {
  detail::require_rank(blur_full, 4, "detail_layer");
  detail::require(factor >= 1, "detail_layer: factor must be >= 1");
  if (factor == 1) return Tensor<T>::zeros(blur_full.shape());
  Tensor<T> low = downsample(blur_full, factor);
  return sub(blur_full, bilinear_resize(low, blur_full.dim(2), blur_full.dim(3)));
}

/// Up(low_pred) + alpha * D. Without downsampling (factor 1) low_pred is returned unchanged.
template <typename T>
Tensor<T> restore_full(const Tensor<T>& low_pred, const Tensor<T>& blur_full, std::size_t factor, T alpha) {
  detail::require_rank(low_pred, 4, "restore_full");
  detail::require_rank(blur_full, 4, "restore_full");
  const ScaleSize low = downsampled_size(blur_full.dim(2), blur_full.dim(3), factor);
  detail::require(low_pred.dim(2) == low.height && low_pred.dim(3) == low.width,
                  "restore_full: prediction " + shape_str(low_pred.shape()) +
                      " is not at the downsampled resolution of " + shape_str(blur_full.shape()));
  if (factor == 1) return low_pred;
  Tensor<T> up = bilinear_resize(low_pred, blur_full.dim(2), blur_full.dim(3));
  if (alpha == T(0)) return up;
  return add(up, scale(detail_layer(blur_full, factor), alpha));
}

}  // namespace arflow
