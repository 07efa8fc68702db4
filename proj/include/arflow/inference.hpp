#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>

#include "arflow/config.hpp"
#include "arflow/errors.hpp"
#include "arflow/image_io.hpp"
#include "arflow/pyramid.hpp"
#include "arflow/rectified_flow.hpp"
#include "arflow/vfield_net.hpp"

namespace arflow {

// Input too large to process at the requested working resolution.
class SizeLimitError : public DataError {
 public:
  using DataError::DataError;
};

struct DeblurStats {
  std::size_t field_evaluations = 0;
  std::size_t scales = 0;
  std::vector<int> steps;
};

/// Coarse-to-fine restoration of a [1, 3, H, W] image in [-1, 1].
///
/// Each scale generates a residual by integrating the field from fresh noise,
/// conditioned on the blurry input at that scale and the upsampled estimate of
/// the scale below, and adds it to that upsampled estimate. With down > 1 the
/// chain runs at the reduced resolution and the result is lifted back with the
/// blurry input's detail layer. Output is clamped to [-1, 1].
template <typename T>
Tensor<T> deblur(const Tensor<T>& blur_full, const VFieldNet<T>& net, const InferenceConfig& cfg,
                 DeblurStats* stats = nullptr) {
  cfg.validate();
  detail::require(blur_full.rank() == 4 && blur_full.dim(1) == 3 && blur_full.dim(2) >= 1 && blur_full.dim(3) >= 1,
                  "deblur: expected [B, 3, H, W] input, got " + shape_str(blur_full.shape()));
  const std::size_t h = blur_full.dim(2), w = blur_full.dim(3);
  const ScaleSize work = downsampled_size(h, w, cfg.down);
  if (work.height * work.width > cfg.max_pixels) {
    std::size_t d = cfg.down;
    while (downsampled_size(h, w, d).height * downsampled_size(h, w, d).width > cfg.max_pixels) ++d;
    throw SizeLimitError("input " + std::to_string(w) + "x" + std::to_string(h) + " exceeds the working limit of " +
                         std::to_string(cfg.max_pixels) + " pixels at down=" + std::to_string(cfg.down) +
                         "; try --down " + std::to_string(d));
  }

  Rng rng(cfg.seed);
  const Tensor<T> low = downsample(blur_full, cfg.down);
  const ScaleSequence seq = build_scale_sequence(work.height, work.width, cfg.tau_min);
  const std::vector<int> steps = resolve_schedule(cfg.schedule, seq.count());
  std::size_t evals = 0;

  Tensor<T> est;
  for (std::size_t s = 0; s < seq.count(); ++s) {
    const Tensor<T> blur_s = resize_to(low, seq[s]);
    const Tensor<T> prev_up = est.defined() ? resize_to(est, seq[s]) : Tensor<T>::zeros(blur_s.shape());
    const T s_scalar = static_cast<T>(scale_scalar(s + 1, seq.count()));
    Tensor<T> r = solve_residual(net, blur_s, prev_up, s_scalar, steps[s], rng, &evals);
    est = fuse_scale(est, r);
  }

  if (stats) *stats = DeblurStats{evals, seq.count(), steps};
  Tensor<T> out = restore_full(est, blur_full, cfg.down, static_cast<T>(cfg.alpha));
  Buffer<T> v(out.data().begin(), out.data().end());
  for (auto& x : v) x = std::isnan(x) ? T(0) : std::clamp(x, T(-1), T(1));
  return Tensor<T>(out.shape(), std::move(v));
}

/// 8-bit in, 8-bit out.
template <typename T = float>
Image deblur_image(const Image& blur, const VFieldNet<T>& net, const InferenceConfig& cfg,
                   DeblurStats* stats = nullptr) {
  return tensor_to_image(deblur(image_to_tensor<T>(blur), net, cfg, stats));
}

}  // namespace arflow
