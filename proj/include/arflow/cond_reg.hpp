#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SVD>

#include "arflow/errors.hpp"
#include "arflow/ops.hpp"
#include "arflow/tape.hpp"
#include "arflow/tensor.hpp"

namespace arflow {

struct AttentionConfig {
  std::size_t grid = 16;  // pooled M x M grid, N = M^2 tokens
  double temp = 1.0;
  double eps_norm = 1e-6;
  double eps_diag = 1e-3;
  double kappa_thr = 100.0;
  std::size_t max_images = 1;

  void validate() const {
    detail::require(grid >= 2, "AttentionConfig: grid must be >= 2");
    detail::require(temp > 0.0, "AttentionConfig: temp must be positive");
    detail::require(kappa_thr > 1.0, "AttentionConfig: kappa_thr must exceed 1");
    detail::require(max_images >= 1, "AttentionConfig: max_images must be >= 1");
  }
};

// Stand-in for a non-finite or unbounded condition number.
inline constexpr double kKappaSentinel = 1e12;

/// [B, C, H, W] -> pooled tokens [B, M*M, C].
template <typename T>
Tensor<T> pool_tokens(const Tensor<T>& v, std::size_t grid) {
  detail::require_rank(v, 4, "pool_tokens");
  const std::size_t b = v.dim(0), c = v.dim(1);
  Tensor<T> pooled = adaptive_avg_pool(v, grid);
  return transpose_last(reshape(pooled, Shape{b, c, grid * grid}));
}

/// Centers each channel over the tokens, then L2-normalizes every token.
template <typename T>
Tensor<T> normalize_tokens(const Tensor<T>& tokens, T eps_norm) {
  return normalize_last(center_tokens(tokens), eps_norm);
}

/// softmax(T T^T / (sqrt(C) * temp)) over the last axis.
template <typename T>
Tensor<T> token_attention(const Tensor<T>& tokens, T temp) {
  detail::require_rank(tokens, 3, "token_attention");
  const T c = static_cast<T>(tokens.dim(2));
  Tensor<T> logits = matmul(tokens, transpose_last(tokens));
  return softmax_last(scale(logits, T(1) / (std::sqrt(c) * temp)));
}

/// Row-stochastic attention [B, N, N] induced by a predicted vector field.
template <typename T>
Tensor<T> induce_attention(const Tensor<T>& v_pred, const AttentionConfig& cfg) {
  cfg.validate();
  Tensor<T> tokens = normalize_tokens(pool_tokens(v_pred, cfg.grid), static_cast<T>(cfg.eps_norm));
  return token_attention(tokens, static_cast<T>(cfg.temp));
}

struct ExtremeSingular {
  double sigma_max = 0;
  double sigma_min = 0;
  double kappa = 1;
  bool degenerate = false;  // extreme singular value not simple: derivative undefined
  bool clamped = false;     // kappa replaced by kKappaSentinel
  Eigen::VectorXd u_max, v_max, u_min, v_min;
};

/// SVD of (A + eps I) keeping the extreme singular triplets.
inline ExtremeSingular extreme_singular(const Eigen::MatrixXd& a, double eps_diag, bool with_vectors) {
  detail::require(a.rows() == a.cols() && a.rows() >= 1, "condition number needs a square matrix");
  Eigen::MatrixXd shifted = a;
  shifted.diagonal().array() += eps_diag;
  ExtremeSingular out;
  if (!shifted.allFinite()) {
    out.kappa = kKappaSentinel;
    out.clamped = true;
    return out;
  }
  const unsigned opts = with_vectors ? (Eigen::ComputeFullU | Eigen::ComputeFullV) : 0u;
  Eigen::BDCSVD<Eigen::MatrixXd> svd(shifted, opts);
  const Eigen::VectorXd& s = svd.singularValues();
  const Eigen::Index n = s.size();
  out.sigma_max = s(0);
  out.sigma_min = s(n - 1);
  if (n >= 2) {
    constexpr double kGap = 1e-9;
    out.degenerate = std::abs(s(0) - s(1)) < kGap || std::abs(s(n - 2) - s(n - 1)) < kGap;
  }
  const double kappa = out.sigma_max / out.sigma_min;
  if (!(out.sigma_min > 0.0) || !std::isfinite(kappa) || kappa > kKappaSentinel) {
    out.kappa = kKappaSentinel;
    out.clamped = true;
  } else {
    out.kappa = kappa;
  }
  if (with_vectors) {
    out.u_max = svd.matrixU().col(0);
    out.v_max = svd.matrixV().col(0);
    out.u_min = svd.matrixU().col(n - 1);
    out.v_min = svd.matrixV().col(n - 1);
  }
  return out;
}

template <typename T>
Eigen::MatrixXd to_matrix(const Tensor<T>& a, std::size_t item = 0) {
  const std::size_t n = a.dim(a.rank() - 1);
  detail::require(a.dim(a.rank() - 2) == n, "condition number needs square matrices");
  Eigen::MatrixXd m(n, n);
  const T* src = a.data().data() + item * n * n;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) m(i, j) = static_cast<double>(src[i * n + j]);
  return m;
}

/// kappa_2(A + eps I) = sigma_max / sigma_min for a square [N, N] tensor (or one item of [B, N, N]).
template <typename T>
double spectral_condition_number(const Tensor<T>& a, double eps_diag, std::size_t item = 0) {
  detail::require(a.rank() == 2 || a.rank() == 3, "spectral_condition_number: expected [N,N] or [B,N,N]");
  return extreme_singular(to_matrix(a, item), eps_diag, false).kappa;
}

inline double spectral_condition_number(const Eigen::MatrixXd& a, double eps_diag) {
  return extreme_singular(a, eps_diag, false).kappa;
}

struct CondDiagnostics {
  std::vector<double> kappas;
  std::vector<bool> gradient_skipped;
  std::size_t images = 0;
};

/// mean_b ReLU(log kappa_2(A_b + eps I) - log kappa_thr) over a batch of matrices.
///
/// The gradient flows through sigma_max and sigma_min only:
/// d sigma / dA = u v^T for the matching singular pair. Items whose extreme
/// singular values are not simple, or whose kappa had to be clamped, contribute
/// their value but no gradient. At the hinge (kappa == kappa_thr) the gradient is 0.
template <typename T>
Tensor<T> log_condition_hinge(const Tensor<T>& attn, double eps_diag, double kappa_thr,
                              CondDiagnostics* diag = nullptr) {
  detail::require_rank(attn, 3, "log_condition_hinge");
  const std::size_t batch = attn.dim(0), n = attn.dim(1);
  const double log_thr = std::log(kappa_thr);
  auto grads = std::make_shared<std::vector<T>>();
  const bool want_grad = detail::recording_tape<T>({&attn}) != nullptr;
  if (want_grad) grads->assign(attn.numel(), T(0));

  double total = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    ExtremeSingular es = extreme_singular(to_matrix(attn, b), eps_diag, want_grad);
    const double excess = std::log(es.kappa) - log_thr;
    const bool skip = es.degenerate || es.clamped;
    if (diag) {
      diag->kappas.push_back(es.kappa);
      diag->gradient_skipped.push_back(skip);
    }
    if (excess <= 0.0) continue;
    total += excess;
    if (!want_grad || skip) continue;
    const double inv_b = 1.0 / static_cast<double>(batch);
    T* g = grads->data() + b * n * n;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        g[i * n + j] = static_cast<T>(inv_b * (es.u_max(i) * es.v_max(j) / es.sigma_max -
                                               es.u_min(i) * es.v_min(j) / es.sigma_min));
  }
  if (diag) diag->images += batch;

  Tensor<T> res = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(batch)));
  if (want_grad) {
    detail::recording_tape<T>({&attn})->record(res.impl(), [ai = attn.impl(), grads](const Buffer<T>& g) {
      if (auto* ga = detail::grad_of(ai))
        for (std::size_t i = 0; i < grads->size(); ++i) (*ga)[i] += g[0] * (*grads)[i];
    });
  }
  return res;
}

/// Condition-number penalty on the first min(B, max_images) predictions.
template <typename T>
Tensor<T> cond_penalty(const Tensor<T>& v_pred, const AttentionConfig& cfg, CondDiagnostics* diag = nullptr) {
  cfg.validate();
  detail::require_rank(v_pred, 4, "cond_penalty");
  const std::size_t k = std::min(v_pred.dim(0), cfg.max_images);
  Tensor<T> subset = k == v_pred.dim(0) ? v_pred : narrow_batch(v_pred, 0, k);
  return log_condition_hinge(induce_attention(subset, cfg), cfg.eps_diag, cfg.kappa_thr, diag);
}

}  // namespace arflow
