#pragma once

#include <cstddef>
#include <functional>
#include <random>
#include <type_traits>
#include <vector>

#include "arflow/errors.hpp"
#include "arflow/ops.hpp"
#include "arflow/tensor.hpp"
#include "arflow/vfield_net.hpp"

namespace arflow {

using Rng = std::mt19937_64;

inline const std::vector<int>& default_schedule() {
  static const std::vector<int> kSchedule{8, 8, 6, 4, 3, 2, 1};
  return kSchedule;
}

/// First `scales` entries of `base`, padded by repeating its last value.
inline std::vector<int> resolve_schedule(const std::vector<int>& base, std::size_t scales) {
  detail::require(!base.empty(), "resolve_schedule: empty schedule");
  detail::require(scales >= 1, "resolve_schedule: need at least one scale");
  for (int n : base) detail::require(n >= 1, "resolve_schedule: step counts must be >= 1");
  std::vector<int> out(base.begin(), base.begin() + static_cast<std::ptrdiff_t>(std::min(scales, base.size())));
  while (out.size() < scales) out.push_back(base.back());
  return out;
}

/// Heun evaluates the field twice per step, Euler once.
inline std::size_t field_evaluations(const std::vector<int>& resolved) {
  std::size_t n = 0;
  for (int steps : resolved) n += steps == 1 ? 1 : 2 * static_cast<std::size_t>(steps);
  return n;
}

template <typename T>
Tensor<T> standard_normal(const Shape& shape, Rng& rng, double stddev = 1.0) {
  detail::require(stddev >= 0, "standard_normal: stddev must be >= 0");
  if (stddev == 0) return Tensor<T>::zeros(shape);
  std::normal_distribution<double> dist(0.0, stddev);
  Buffer<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(shape, std::move(v));
}

/// (1 - t) z0 + t r
template <typename T>
Tensor<T> sample_path(const Tensor<T>& z0, const Tensor<T>& r, T t) {
  detail::require_same_shape(z0, r, "sample_path");
  return add(scale(z0, T(1) - t), scale(r, t));
}

/// Per-item times t[b] along the leading axis.
template <typename T>
Tensor<T> sample_path(const Tensor<T>& z0, const Tensor<T>& r, const std::vector<T>& t) {
  detail::require_same_shape(z0, r, "sample_path");
  std::vector<T> one_minus(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) one_minus[i] = T(1) - t[i];
  return add(scale_per_batch(z0, one_minus), scale_per_batch(r, t));
}

/// r - z0, the constant velocity of the straight path.
template <typename T>
Tensor<T> target_field(const Tensor<T>& z0, const Tensor<T>& r) {
  return sub(r, z0);
}

namespace detail {

template <typename X, typename S>
X axpy(const X& x, S a, const X& v) {
  if constexpr (std::is_arithmetic_v<X>) {
    return x + a * v;
  } else {
    return add(x, scale(v, static_cast<typename X::value_type>(a)));
  }
}

}  // namespace detail

/// One explicit Euler step x + dt f(x, t).
template <typename X, typename S, typename Field>
X euler_step(Field&& field, const X& x, S tk, S dt) {
  return detail::axpy(x, dt, field(x, tk));
}

/// One Heun (explicit trapezoidal) step; calls `field` exactly twice.
template <typename X, typename S, typename Field>
X heun_step(Field&& field, const X& x, S tk, S dt) {
  const X v0 = field(x, tk);
  const X predictor = detail::axpy(x, dt, v0);
  const X v1 = field(predictor, tk + dt);
  if constexpr (std::is_arithmetic_v<X>) {
    return x + dt / S(2) * (v0 + v1);
  } else {
    return detail::axpy(x, dt / S(2), add(v0, v1));
  }
}

/// Integrates dx/dt = field(x, t) from t = 0 to 1 on the uniform grid t_k = k / steps.
/// A single step uses Euler, anything longer uses Heun.
template <typename X, typename Field>
X integrate_unit_interval(Field&& field, X x, int steps) {
  detail::require(steps >= 1, "integrate: steps must be >= 1");
  using S = std::conditional_t<std::is_arithmetic_v<X>, X, double>;
  const S dt = S(1) / static_cast<S>(steps);
  if (steps == 1) return euler_step(field, x, S(0), dt);
  for (int k = 0; k < steps; ++k) x = heun_step(field, x, static_cast<S>(k) * dt, dt);
  return x;
}

/// Draws z0 ~ N(0, sigma0^2 I) and integrates the conditioned field to t = 1,
/// returning the generated residual for this scale.
template <typename T>
Tensor<T> solve_residual(const VFieldNet<T>& net, const Tensor<T>& blur_s, const Tensor<T>& prev_up, T s_scalar,
                         int steps, Rng& rng, std::size_t* evaluations = nullptr, double sigma0 = 1.0) {
  detail::require(steps >= 1, "solve_residual: steps must be >= 1");
  Tensor<T> z0 = standard_normal<T>(blur_s.shape(), rng, sigma0);
  auto field = [&](const Tensor<T>& x, double t) {
    if (evaluations) ++*evaluations;
    return net.forward(x, blur_s, prev_up, static_cast<T>(t), s_scalar);
  };
  return integrate_unit_interval(field, std::move(z0), steps);
}

}  // namespace arflow
