#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "arflow/errors.hpp"
#include "arflow/tensor.hpp"
#include "arflow/vfield_net.hpp"

namespace arflow {

/// Scales every gradient by max_norm / norm when the global L2 norm exceeds
/// max_norm. Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::vector<std::span<T>> grads, double max_norm) {
  detail::require(max_norm > 0, "clip_grad_norm: max_norm must be positive");
  double sq = 0;
  for (auto g : grads)
    for (T v : g) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (auto g : grads)
      for (T& v : g) v = static_cast<T>(static_cast<double>(v) * f);
  }
  return norm;
}

/// Adam with decoupled weight decay.
template <typename T>
class AdamW {
 public:
  struct Options {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  AdamW() = default;
  AdamW(const std::vector<NamedParam<T>>& params, Options opt) : opt_(opt) {
    for (const auto& p : params) {
      m_.emplace_back(p.value.numel(), T(0));
      v_.emplace_back(p.value.numel(), T(0));
    }
  }

  /// Updates each parameter from its grad buffer (missing grads count as zero).
  void step(std::vector<NamedParam<T>>& params) {
    detail::require(params.size() == m_.size(), "AdamW: parameter list changed");
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor<T>& p = params[k].value;
      auto data = p.mutable_data();
      auto grad = p.has_grad() ? p.grad() : std::span<const T>();
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
        const double m = opt_.beta1 * static_cast<double>(m_[k][i]) + (1 - opt_.beta1) * g;
        const double v = opt_.beta2 * static_cast<double>(v_[k][i]) + (1 - opt_.beta2) * g * g;
        m_[k][i] = static_cast<T>(m);
        v_[k][i] = static_cast<T>(v);
        double x = static_cast<double>(data[i]);
        x -= opt_.lr * opt_.weight_decay * x;
        x -= opt_.lr * (m / bc1) / (std::sqrt(v / bc2) + opt_.eps);
        data[i] = static_cast<T>(x);
      }
    }
  }

  std::uint64_t steps() const { return t_; }
  const Options& options() const { return opt_; }
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }
  void set_steps(std::uint64_t t) { t_ = t; }

 private:
  Options opt_;
  std::vector<std::vector<T>> m_, v_;
  std::uint64_t t_ = 0;
};

/// shadow <- decay * shadow + (1 - decay) * param
template <typename T>
void ema_update(VFieldNet<T>& shadow, const VFieldNet<T>& net, double decay) {
  detail::require(shadow.config().same_shape(net.config()), "ema_update: architecture mismatch");
  auto& sp = shadow.parameters();
  const auto& np = net.parameters();
  for (std::size_t k = 0; k < sp.size(); ++k) {
    auto s = sp[k].value.mutable_data();
    auto p = np[k].value.data();
    for (std::size_t i = 0; i < s.size(); ++i)
      s[i] = static_cast<T>(decay * static_cast<double>(s[i]) + (1.0 - decay) * static_cast<double>(p[i]));
  }
}

}  // namespace arflow
