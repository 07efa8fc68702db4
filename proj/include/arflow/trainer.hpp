#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "arflow/cond_reg.hpp"
#include "arflow/config.hpp"
#include "arflow/dataset.hpp"
#include "arflow/losses.hpp"
#include "arflow/optim.hpp"
#include "arflow/pyramid.hpp"
#include "arflow/tape.hpp"
#include "arflow/vfield_net.hpp"

namespace arflow {

/// Everything a training run owns: live weights, EMA shadow, optimizer and RNG.
template <typename T>
struct TrainState {
  TrainConfig cfg;
  VFieldNet<T> net;
  VFieldNet<T> ema;
  AdamW<T> opt;
  Rng rng;
  std::uint64_t step = 0;

  explicit TrainState(const TrainConfig& c)
      : cfg(c), net(c.net), ema(c.net), rng(c.seed) {
    cfg.validate();
    ema.copy_values_from(net);
    net.set_requires_grad(true);
    opt = AdamW<T>(net.parameters(), {c.learning_rate, c.beta1, c.beta2, c.adam_eps, c.weight_decay});
  }
};

struct StepResult {
  LossLog log;
  double grad_norm = 0;
  bool aborted = false;  // non-finite loss: parameters left untouched
  CondDiagnostics cond;
};

/// Computes all loss parts on one batch. Runs under whatever tape is active.
template <typename T>
Tensor<T> compute_losses(const VFieldNet<T>& net, const Batch<T>& batch, const TrainConfig& cfg, Rng& rng,
                         LossLog* log, CondDiagnostics* cond, const TeacherHook<T>& hook = {}) {
  const ScaleSequence seq = build_scale_sequence(batch.sharp.dim(2), batch.sharp.dim(3), cfg.tau_min);
  std::vector<std::size_t> scales;
  if (cfg.sample_scale) {
    scales.push_back(std::uniform_int_distribution<std::size_t>(0, seq.count() - 1)(rng));
  } else {
    for (std::size_t s = 0; s < seq.count(); ++s) scales.push_back(s);
  }

  LossParts<T> parts;
  FlowPass<T> pass = flow_loss(net, batch.blur, batch.sharp, seq, scales, rng, hook);
  parts.flow = pass.loss;
  if (cfg.weights.cons > 0) parts.cons = consistency_loss(pass);
  // The penalty only looks at the finest scale; in sampled mode that is whenever it is drawn.
  if (cfg.weights.cond > 0 && pass.records.back().scale == seq.count() - 1)
    parts.cond = cond_penalty(pass.records.back().v_pred, cfg.attn, cond);
  if (cfg.weights.final > 0) {
    const Tensor<T> low = downsample(batch.blur, cfg.down);
    parts.final = final_supervision_loss(net, low, batch.blur, batch.sharp, cfg.down, static_cast<T>(cfg.alpha));
  }
  return total_loss(parts, cfg.weights, log);
}

/// Forward, backward, clip, AdamW, EMA. A non-finite loss skips the update.
template <typename T>
StepResult train_step(TrainState<T>& state, const Batch<T>& batch, const TeacherHook<T>& hook = {}) {
  StepResult res;
  auto& params = state.net.parameters();
  for (auto& p : params) p.value.zero_grad();

  Tape<T> tape;
  Tensor<T> loss;
  {
    typename Tape<T>::Recording rec(tape);
    loss = compute_losses(state.net, batch, state.cfg, state.rng, &res.log, &res.cond, hook);
  }
  if (!std::isfinite(res.log.total)) {
    res.aborted = true;
    return res;
  }
  if (tape.size() > 0) tape.backward(loss);

  std::vector<std::span<T>> grads;
  for (auto& p : params) grads.push_back(p.value.mutable_grad());
  res.grad_norm = clip_grad_norm(grads, state.cfg.clip_norm);
  if (!std::isfinite(res.grad_norm)) {
    res.aborted = true;
    return res;
  }
  state.opt.step(params);
  ema_update(state.ema, state.net, state.cfg.ema_decay);
  ++state.step;
  return res;
}

/// Total step budget: `steps` when set, else enough batches to cover `epochs` passes.
inline std::size_t planned_steps(const TrainConfig& cfg, std::size_t dataset_size) {
  if (cfg.steps > 0) return cfg.steps;
  return cfg.epochs * ((dataset_size + cfg.batch_size - 1) / cfg.batch_size);
}

/// Runs train_step until `total` successful or aborted steps have been attempted.
template <typename T>
void train_loop(TrainState<T>& state, const std::vector<LoadedPair>& data, std::size_t total,
                const std::function<void(std::size_t, const StepResult&)>& on_step = {}) {
  BatchSampler sampler(data.size());
  for (std::size_t i = 0; i < total; ++i) {
    const Batch<T> batch = load_and_augment<T>(data, sampler.next(state.cfg.batch_size, state.rng), state.cfg,
                                               state.rng);
    StepResult r = train_step(state, batch);
    if (on_step) on_step(i, r);
  }
}

}  // namespace arflow
