#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "arflow/errors.hpp"
#include "arflow/ops.hpp"
#include "arflow/tensor.hpp"

namespace arflow {

struct NetConfig {
  std::size_t width = 32;       // feature channels
  std::size_t num_blocks = 4;   // modulated residual blocks
  std::size_t embed_dim = 64;   // joint time/scale embedding width
  std::size_t freq_bands = 16;  // sinusoidal frequencies for t
  std::uint64_t init_seed = 0;

  static constexpr std::size_t kInChannels = 9;
  static constexpr std::size_t kOutChannels = 3;

  friend bool operator==(const NetConfig&, const NetConfig&) = default;

  // Same parameter shapes; the init seed does not matter.
  bool same_shape(const NetConfig& o) const {
    return width == o.width && num_blocks == o.num_blocks && embed_dim == o.embed_dim && freq_bands == o.freq_bands;
  }
};

/// s -> (s - 1) / (S - 1) for 1-based s; a single-scale pyramid maps to 1.
inline double scale_scalar(std::size_t s, std::size_t total) {
  detail::require(total >= 1 && s >= 1 && s <= total,
                  "scale_scalar: s=" + std::to_string(s) + " outside [1, " + std::to_string(total) + "]");
  if (total == 1) return 1.0;
  return static_cast<double>(s - 1) / static_cast<double>(total - 1);
}

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> value;
};

/// Conditional vector field v(x_t, blur, Up(prev), t, s).
///
/// Layout: the three 3-channel inputs are concatenated to 9 channels, a stem
/// convolution lifts them to `width` channels, `num_blocks` residual blocks
/// follow, and a head convolution maps back to 3 channels with no output
/// nonlinearity. Each block is
///
///     h + conv2(silu(modulate(conv1(silu(h)), scale_k(e), shift_k(e))))
///
/// where e = Emb(t, s) is an MLP over [sin(w_i t), cos(w_i t), s] with
/// geometrically spaced w_i in [1, 1000], and scale_k / shift_k are per-block
/// linear projections of silu(e). Every layer is a 3x3 same-size convolution,
/// so the network accepts any H x W.
template <typename T>
class VFieldNet {
 public:
  explicit VFieldNet(NetConfig cfg = {}) : cfg_(cfg) {
    detail::require(cfg_.width >= 1 && cfg_.embed_dim >= 1 && cfg_.freq_bands >= 1,
                    "VFieldNet: width, embed_dim and freq_bands must be positive");
    std::mt19937_64 rng(cfg_.init_seed);
    const std::size_t feat = 2 * cfg_.freq_bands + 1;
    add_linear("embed.fc1", cfg_.embed_dim, feat, rng);
    add_linear("embed.fc2", cfg_.embed_dim, cfg_.embed_dim, rng);
    add_conv("stem", cfg_.width, NetConfig::kInChannels, rng);
    for (std::size_t b = 0; b < cfg_.num_blocks; ++b) {
      const std::string p = "blocks." + std::to_string(b);
      add_conv(p + ".conv1", cfg_.width, cfg_.width, rng);
      add_linear(p + ".scale", cfg_.width, cfg_.embed_dim, rng);
      add_linear(p + ".shift", cfg_.width, cfg_.embed_dim, rng);
      add_conv(p + ".conv2", cfg_.width, cfg_.width, rng);
    }
    add_conv("head", NetConfig::kOutChannels, cfg_.width, rng);
  }

  const NetConfig& config() const { return cfg_; }
  std::vector<NamedParam<T>>& parameters() { return params_; }
  const std::vector<NamedParam<T>>& parameters() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  /// Number of 3x3 layers on any input-to-output path; an output pixel depends
  /// only on inputs within this Chebyshev distance.
  std::size_t receptive_radius() const { return 2 + 2 * cfg_.num_blocks; }

  const Tensor<T>& param(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return p.value;
    throw ContractError("VFieldNet: no parameter named " + name);
  }
  Tensor<T>& param(const std::string& name) {
    return const_cast<Tensor<T>&>(static_cast<const VFieldNet&>(*this).param(name));
  }

  void set_requires_grad(bool on) {
    for (auto& p : params_) p.value.set_requires_grad(on);
  }

  /// Overwrites parameter values (not gradients) from another net of the same config.
  void copy_values_from(const VFieldNet& other) {
    detail::require(other.cfg_.same_shape(cfg_), "copy_values_from: architecture mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto dst = params_[i].value.mutable_data();
      auto src = other.params_[i].value.data();
      std::copy(src.begin(), src.end(), dst.begin());
    }
  }

  /// Time/scale features [B, 2F + 1] fed to the embedding MLP.
  Tensor<T> time_scale_features(std::span<const T> t, std::span<const T> s_scalar) const {
    detail::require(t.size() == s_scalar.size() && !t.empty(), "embedding: need one (t, s) per batch item");
    const std::size_t f = cfg_.freq_bands;
    const std::size_t feat = 2 * f + 1;
    std::vector<T> out(t.size() * feat);
    for (std::size_t b = 0; b < t.size(); ++b) {
      for (std::size_t k = 0; k < f; ++k) {
        const double w = f == 1 ? 1.0 : std::exp(static_cast<double>(k) * std::log(1000.0) / static_cast<double>(f - 1));
        out[b * feat + k] = static_cast<T>(std::sin(w * static_cast<double>(t[b])));
        out[b * feat + f + k] = static_cast<T>(std::cos(w * static_cast<double>(t[b])));
      }
      out[b * feat + 2 * f] = s_scalar[b];
    }
    return Tensor<T>(Shape{t.size(), feat}, std::move(out));
  }

  /// Emb(t, s): [B, embed_dim].
  Tensor<T> embed(std::span<const T> t, std::span<const T> s_scalar) const {
    Tensor<T> h = linear(time_scale_features(t, s_scalar), param_at(0), param_at(1));
    return linear(silu(h), param_at(2), param_at(3));
  }

  Tensor<T> embed(T t, T s_scalar) const {
    const T tv[1] = {t};
    const T sv[1] = {s_scalar};
    return reshape(embed(std::span<const T>(tv), std::span<const T>(sv)), Shape{cfg_.embed_dim});
  }

  /// Per-item time and scale values, one pair per batch entry.
  Tensor<T> forward(const Tensor<T>& xt, const Tensor<T>& blur, const Tensor<T>& prev_up, std::span<const T> t,
                    std::span<const T> s_scalar) const {
    detail::require_rank(xt, 4, "VFieldNet::forward x_t");
    detail::require(xt.dim(1) == 3, "VFieldNet::forward: x_t must have 3 channels");
    detail::require(xt.shape() == blur.shape() && xt.shape() == prev_up.shape(),
                    "VFieldNet::forward: x_t " + shape_str(xt.shape()) + ", blur " + shape_str(blur.shape()) +
                        ", prev " + shape_str(prev_up.shape()) + " must share a shape");
    detail::require(t.size() == xt.dim(0), "VFieldNet::forward: need one t per batch item");

    const Tensor<T> emb = silu(embed(t, s_scalar));
    std::size_t idx = 4;
    Tensor<T> h = conv2d(concat_channels<T>({xt, blur, prev_up}), param_at(idx), param_at(idx + 1));
    idx += 2;
    for (std::size_t b = 0; b < cfg_.num_blocks; ++b) {
      Tensor<T> y = conv2d(silu(h), param_at(idx), param_at(idx + 1));
      Tensor<T> gamma = linear(emb, param_at(idx + 2), param_at(idx + 3));
      Tensor<T> beta = linear(emb, param_at(idx + 4), param_at(idx + 5));
      y = conv2d(silu(modulate(y, gamma, beta)), param_at(idx + 6), param_at(idx + 7));
      h = add(h, y);
      idx += 8;
    }
    return conv2d(silu(h), param_at(idx), param_at(idx + 1));
  }

  /// Same t and s for the whole batch.
  Tensor<T> forward(const Tensor<T>& xt, const Tensor<T>& blur, const Tensor<T>& prev_up, T t, T s_scalar) const {
    detail::require_rank(xt, 4, "VFieldNet::forward x_t");
    const std::vector<T> tv(xt.dim(0), t), sv(xt.dim(0), s_scalar);
    return forward(xt, blur, prev_up, std::span<const T>(tv), std::span<const T>(sv));
  }

 private:
  const Tensor<T>& param_at(std::size_t i) const { return params_[i].value; }

  // LeCun-uniform weights (variance 1 / fan_in), zero biases.
  static Tensor<T> init_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
    const double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Buffer<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor<T>(std::move(shape), std::move(v));
  }

  void add_conv(const std::string& name, std::size_t cout, std::size_t cin, std::mt19937_64& rng) {
    params_.push_back({name + ".weight", init_uniform(Shape{cout, cin, 3, 3}, cin * 9, rng)});
    params_.push_back({name + ".bias", Tensor<T>::zeros(Shape{cout})});
  }

  void add_linear(const std::string& name, std::size_t out, std::size_t in, std::mt19937_64& rng) {
    params_.push_back({name + ".weight", init_uniform(Shape{out, in}, in, rng)});
    params_.push_back({name + ".bias", Tensor<T>::zeros(Shape{out})});
  }

  NetConfig cfg_;
  std::vector<NamedParam<T>> params_;
};

}  // namespace arflow
