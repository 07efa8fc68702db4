#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <vector>

#include "arflow/config.hpp"
#include "arflow/ops.hpp"
#include "arflow/pyramid.hpp"
#include "arflow/rectified_flow.hpp"
#include "arflow/vfield_net.hpp"

namespace arflow {

/// Called once per trained scale with the previous-scale condition that was fed to the net.
template <typename T>
using TeacherHook = std::function<void(std::size_t scale, const Tensor<T>& prev_up)>;

template <typename T>
struct ScaleRecord {
  std::size_t scale = 0;
  std::vector<T> t;
  Tensor<T> xt;
  Tensor<T> v_pred;
  Tensor<T> residual;
};

template <typename T>
struct FlowPass {
  Tensor<T> loss;  // mean over the trained scales of the per-scale MSE
  std::vector<ScaleRecord<T>> records;
};

/// Teacher-forced flow matching over `scales` (indices into seq, coarsest = 0).
///
/// For each scale: t ~ U(0,1) per item, then z0 ~ N(0, I); the net sees the
/// path point, the blurry input at that scale and the upsampled ground truth
/// of the scale below.
template <typename T>
FlowPass<T> flow_loss(const VFieldNet<T>& net, const Tensor<T>& blur_full, const Tensor<T>& sharp_full,
                      const ScaleSequence& seq, const std::vector<std::size_t>& scales, Rng& rng,
                      const TeacherHook<T>& hook = {}) {
  detail::require(!scales.empty(), "flow_loss: no scales selected");
  detail::require_same_shape(blur_full, sharp_full, "flow_loss");
  const ResidualStack<T> stack = residual_targets(sharp_full, seq);
  const std::size_t batch = sharp_full.dim(0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  FlowPass<T> pass;
  Tensor<T> acc;
  for (std::size_t s : scales) {
    detail::require(s < seq.count(), "flow_loss: scale index out of range");
    const Tensor<T>& r = stack.residuals[s];
    const Tensor<T>& prev_up = stack.prev_up[s];
    if (hook) hook(s, prev_up);
    std::vector<T> t(batch);
    for (auto& v : t) v = static_cast<T>(unif(rng));
    const std::vector<T> s_scalar(batch, static_cast<T>(scale_scalar(s + 1, seq.count())));
    Tensor<T> z0 = standard_normal<T>(r.shape(), rng);
    Tensor<T> xt = sample_path(z0, r, t);
    Tensor<T> v = net.forward(xt, resize_to(blur_full, seq[s]), prev_up, std::span<const T>(t),
                              std::span<const T>(s_scalar));
    Tensor<T> l = mse_loss(v, target_field(z0, r));
    acc = acc.defined() ? add(acc, l) : l;
    pass.records.push_back({s, std::move(t), std::move(xt), std::move(v), r});
  }
  pass.loss = scale(acc, static_cast<T>(1.0 / static_cast<double>(scales.size())));
  return pass;
}

/// Mean |x_t + (1 - t) v - r| with one t per batch item.
template <typename T>
Tensor<T> consistency_loss(const Tensor<T>& xt, const std::vector<T>& t, const Tensor<T>& v_pred,
                           const Tensor<T>& r) {
  detail::require_same_shape(xt, v_pred, "consistency_loss");
  detail::require_same_shape(xt, r, "consistency_loss");
  std::vector<T> remaining(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) remaining[i] = T(1) - t[i];
  return l1_loss(add(xt, scale_per_batch(v_pred, remaining)), r);
}

template <typename T>
Tensor<T> consistency_loss(const Tensor<T>& xt, T t, const Tensor<T>& v_pred, const Tensor<T>& r) {
  detail::require_rank(xt, 4, "consistency_loss");
  return consistency_loss(xt, std::vector<T>(xt.dim(0), t), v_pred, r);
}

/// Consistency averaged over the scales of a flow pass.
template <typename T>
Tensor<T> consistency_loss(const FlowPass<T>& pass) {
  Tensor<T> acc;
  for (const auto& rec : pass.records) {
    Tensor<T> l = consistency_loss(rec.xt, rec.t, rec.v_pred, rec.residual);
    acc = acc.defined() ? add(acc, l) : l;
  }
  return scale(acc, static_cast<T>(1.0 / static_cast<double>(pass.records.size())));
}

/// One field evaluation from the zero state with no previous estimate (t = 1,
/// finest scale), restored to full resolution and compared to the sharp image.
template <typename T>
Tensor<T> final_supervision_loss(const VFieldNet<T>& net, const Tensor<T>& blur_low, const Tensor<T>& blur_full,
                                 const Tensor<T>& sharp_full, std::size_t factor, T alpha) {
  detail::require_same_shape(blur_full, sharp_full, "final_supervision_loss");
  const Tensor<T> zero = Tensor<T>::zeros(blur_low.shape());
  Tensor<T> pred = net.forward(zero, blur_low, zero, T(1), T(1));
  return l1_loss(restore_full(pred, blur_full, factor, alpha), sharp_full);
}

template <typename T>
struct LossParts {
  Tensor<T> flow, final, cons, cond;  // undefined = not computed
};

/// Scalar values for logging; a term whose weight is 0 is reported as disabled.
struct LossLog {
  double flow = 0, final = 0, cons = 0, cond = 0, total = 0;
  bool cons_enabled = true, cond_enabled = true;
};

/// Weighted sum of the defined parts with a positive weight. Zero-weight terms
/// are left out of the graph entirely.
template <typename T>
Tensor<T> total_loss(const LossParts<T>& parts, const LossWeights& w, LossLog* log = nullptr) {
  w.validate();
  Tensor<T> acc;
  auto addw = [&](const Tensor<T>& part, double weight, double* slot) {
    if (!part.defined()) return;
    if (slot) *slot = static_cast<double>(part.item());
    if (weight == 0.0) return;
    Tensor<T> term = scale(part, static_cast<T>(weight));
    acc = acc.defined() ? add(acc, term) : term;
  };
  addw(parts.flow, w.flow, log ? &log->flow : nullptr);
  addw(parts.final, w.final, log ? &log->final : nullptr);
  addw(parts.cons, w.cons, log ? &log->cons : nullptr);
  addw(parts.cond, w.cond, log ? &log->cond : nullptr);
  if (!acc.defined()) acc = Tensor<T>::scalar(T(0));
  if (log) {
    log->total = static_cast<double>(acc.item());
    log->cons_enabled = w.cons > 0 && parts.cons.defined();
    log->cond_enabled = w.cond > 0 && parts.cond.defined();
  }
  return acc;
}

}  // namespace arflow
