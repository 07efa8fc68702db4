#pragma once

// Differentiable tensor operations. Every function here is pure in its
// inputs and, when a tape is recording and some input requires a gradient,
// appends its local gradient rule to that tape.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <vector>

#include <Eigen/Core>

#include "arflow/errors.hpp"
#include "arflow/tape.hpp"
#include "arflow/tensor.hpp"

namespace arflow {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using MapConstMat = Eigen::Map<const RowMat<T>>;

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

template <typename T>
void require_rank(const Tensor<T>& a, std::size_t rank, const char* op) {
  require(a.rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                                shape_str(a.shape()));
}

// Linear interpolation taps along one axis for the half-pixel convention.
template <typename T>
struct ResizeAxis {
  std::vector<std::size_t> lo, hi;
  std::vector<T> frac;

  ResizeAxis(std::size_t src, std::size_t dst) : lo(dst), hi(dst), frac(dst) {
    const double ratio = static_cast<double>(src) / static_cast<double>(dst);
    const double last = static_cast<double>(src - 1);
    for (std::size_t d = 0; d < dst; ++d) {
      double s = (static_cast<double>(d) + 0.5) * ratio - 0.5;
      s = std::clamp(s, 0.0, last);
      const auto i0 = static_cast<std::size_t>(std::floor(s));
      lo[d] = i0;
      hi[d] = std::min(i0 + 1, src - 1);
      frac[d] = static_cast<T>(s - static_cast<double>(i0));
    }
  }
};

inline std::size_t pool_begin(std::size_t i, std::size_t in, std::size_t out) { return (i * in) / out; }
inline std::size_t pool_end(std::size_t i, std::size_t in, std::size_t out) {
  return ((i + 1) * in + out - 1) / out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Buffer<T> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  Tensor<T> res(a.shape(), std::move(out));
  if (auto* tape = detail::recording_tape<T>({&a, &b})) {
    tape->record(res.impl(), [ai = a.impl(), bi = b.impl()](const Buffer<T>& g) {
      if (auto* ga = detail::grad_of(ai))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
      if (auto* gb = detail::grad_of(bi))
        for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
    });
  }
  return res;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Buffer<T> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  Tensor<T> res(a.shape(), std::move(out));
  if (auto* tape = detail::recording_tape<T>({&a, &b})) {
    tape->record(res.impl(), [ai = a.impl(), bi = b.impl()](const Buffer<T>& g) {
      if (auto* ga = detail::grad_of(ai))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
      if (auto* gb = detail::grad_of(bi))
        for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
    });
  }
  return res;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Buffer<T> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  Tensor<T> res(a.shape(), std::move(out));
  if (auto* tape = detail::recording_tape<T>({&a, &b})) {
    tape->record(res.impl(), [ai = a.impl(), bi = b.impl()](const Buffer<T>& g) {
      if (auto* ga = detail::grad_of(ai))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bi->data[i];
      if (auto* gb = detail::grad_of(bi))
        for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * ai->data[i];
    });
  }
  return res;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Buffer<T> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * x[i];
  Tensor<T> res(a.shape(), std::move(out));
  if (auto* tape = detail::recording_tape<T>({&a})) {
    tape->record(res.impl(), [ai = a.impl(), s](const Buffer<T>& g) {
      if (auto* ga = detail::grad_of(ai))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += s * g[i];
    });
  }
  return res;
}

/// Multiplies batch item b (leading axis) by coeffs[b].
template <typename T>
Tensor<T> scale_per_batch(const Tensor<T>& a, const std::vector<T>& coeffs) {
  detail::require(a.rank() >= 1 && a.dim(0) == coeffs.size(),
                  "scale_per_batch: need one coefficient per batch item");
  const std::size_t inner = a.numel() / std::max<std::size_t>(coeffs.size(), 1);
  Buffer<T> out(a.numel());
  const auto x = a.data();
  for (std::size_t b = 0; b < coeffs.size(); ++b)
    for (std::size_t i = 0; i < inner; ++i) out[b * inner + i] = coeffs[b] * x[b * inner + i];
  Tensor<T> res(a.shape(), std::move(out));
  if (auto* tape = detail::recording_tape<T>({&a})) {
    tape->record(res.impl(), [ai = a.impl(), coeffs, inner](const Buffer<T>& g) {
      if (auto* ga = detail::grad_of(ai))
        for (std::size_t b = 0; b < coeffs.size(); ++b)
          for (std::size_t i = 0; i < inner; ++i) (*ga)[b * inner + i] += coeffs[b] * g[b * inner + i];
    });
  }
  return res;
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  Buffer<T> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / (T(1) + std::exp(-x[i]));
  Tensor<T> res(a.shape(), std::move(out));
  if (auto* tape = detail::recording_tape<T>({&a})) {
    tape->record(res.impl(), [ai = a.impl()](const Buffer<T>& g) {
      if (auto* ga = detail::grad_of(ai)) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T v = ai->data[i];
          const T sig = T(1) / (T(1) + std::exp(-v));
          (*ga)[i] += g[i] * (sig + v * sig * (T(1) - sig));
        }
      }
    });
  }
  return res;
}

/// Copy with a new shape of equal element count.
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  detail::require(shape_numel(shape) == a.numel(),
                  "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  Tensor<T> res(std::move(shape), a.impl()->data);
  if (auto* tape = detail::recording_tape<T>({&a})) {
    tape->record(res.impl(), [ai = a.impl()](const Buffer<T>& g) {
      if (auto* ga = detail::grad_of(ai))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    });
  }
  return res;
}

/// Items [start, start + count) along the leading axis.
template <typename T>
Tensor<T> narrow_batch(const Tensor<T>& a, std::size_t start, std::size_t count) {
  detail::require(a.rank() >= 1 && start + count <= a.dim(0) && count > 0,
                  "narrow_batch: range out of bounds for " + shape_str(a.shape()));
  const std::size_t inner = a.numel() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = count;
  Buffer<T> out(a.data().begin() + start * inner, a.data().begin() + (start + count) * inner);
  Tensor<T> res(std::move(shape), std::move(out));
  if (auto* tape = detail::recording_tape<T>({&a})) {
    tape->record(res.impl(), [ai = a.impl(), offset = start * inner](const Buffer<T>& g) {
      if (auto* ga = detail::grad_of(ai))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[offset + i] += g[i];
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Reductions (all return shape [1])

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  Tensor<T> res = Tensor<T>::scalar(acc);
  if (auto* tape = detail::recording_tape<T>({&a})) {
    tape->record(res.impl(), [ai = a.impl()](const Buffer<T>& g) {
      if (auto* ga = detail::grad_of(ai))
        for (auto& v : *ga) v += g[0];
    });
  }
  return res;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// mean((a - b)^2)
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mse_loss");
  const auto x = a.data();
  const auto y = b.data();
  T acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += (x[i] - y[i]) * (x[i] - y[i]);
  const T inv_n = T(1) / static_cast<T>(x.size());
  Tensor<T> res = Tensor<T>::scalar(acc * inv_n);
  if (auto* tape = detail::recording_tape<T>({&a, &b})) {
    tape->record(res.impl(), [ai = a.impl(), bi = b.impl(), inv_n](const Buffer<T>& g) {
      auto* ga = detail::grad_of(ai);
      auto* gb = detail::grad_of(bi);
      for (std::size_t i = 0; i < ai->data.size(); ++i) {
        const T d = T(2) * inv_n * g[0] * (ai->data[i] - bi->data[i]);
        if (ga) (*ga)[i] += d;
        if (gb) (*gb)[i] -= d;
      }
    });
  }
  return res;
}

/// mean(|a - b|); subgradient 0 at a == b.
template <typename T>
Tensor<T> l1_loss(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "l1_loss");
  const auto x = a.data();
  const auto y = b.data();
  T acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += std::abs(x[i] - y[i]);
  const T inv_n = T(1) / static_cast<T>(x.size());
  Tensor<T> res = Tensor<T>::scalar(acc * inv_n);
  if (auto* tape = detail::recording_tape<T>({&a, &b})) {
    tape->record(res.impl(), [ai = a.impl(), bi = b.impl(), inv_n](const Buffer<T>& g) {
      auto* ga = detail::grad_of(ai);
      auto* gb = detail::grad_of(bi);
      for (std::size_t i = 0; i < ai->data.size(); ++i) {
        const T diff = ai->data[i] - bi->data[i];
        const T sgn = diff > T(0) ? T(1) : (diff < T(0) ? T(-1) : T(0));
        if (ga) (*ga)[i] += inv_n * g[0] * sgn;
        if (gb) (*gb)[i] -= inv_n * g[0] * sgn;
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Image-shaped operations on [B, C, H, W]

/// Concatenates 4-D tensors along the channel axis.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_channels: no inputs");
  const std::size_t batch = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  std::size_t channels = 0;
  for (const auto& p : parts) {
    detail::require_rank(p, 4, "concat_channels");
    detail::require(p.dim(0) == batch && p.dim(2) == h && p.dim(3) == w,
                    "concat_channels: incompatible shapes " + shape_str(parts[0].shape()) + " and " +
                        shape_str(p.shape()));
    channels += p.dim(1);
  }
  const std::size_t plane = h * w;
  Buffer<T> out(batch * channels * plane);
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t c0 = 0;
    for (const auto& p : parts) {
      const std::size_t n = p.dim(1) * plane;
      std::copy_n(p.data().begin() + b * n, n, out.begin() + (b * channels + c0) * plane);
      c0 += p.dim(1);
    }
  }
  Tensor<T> res(Shape{batch, channels, h, w}, std::move(out));
  if (auto* tape = detail::recording_tape<T>(parts)) {
    std::vector<std::shared_ptr<detail::TensorImpl<T>>> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    tape->record(res.impl(), [impls, batch, channels, plane](const Buffer<T>& g) {
      for (std::size_t b = 0; b < batch; ++b) {
        std::size_t c0 = 0;
        for (const auto& pi : impls) {
          const std::size_t n = pi->shape[1] * plane;
          if (auto* gp = detail::grad_of(pi)) {
            const T* src = g.data() + (b * channels + c0) * plane;
            for (std::size_t i = 0; i < n; ++i) (*gp)[b * n + i] += src[i];
          }
          c0 += pi->shape[1];
        }
      }
    });
  }
  return res;
}

/// 3x3 cross-correlation, stride 1, zero padding 1, plus per-channel bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::require_rank(input, 4, "conv2d input");
  detail::require_rank(weight, 4, "conv2d weight");
  detail::require(weight.dim(2) == 3 && weight.dim(3) == 3, "conv2d: only 3x3 kernels are supported");
  detail::require(weight.dim(1) == input.dim(1),
                  "conv2d: input has " + std::to_string(input.dim(1)) + " channels, weight expects " +
                      std::to_string(weight.dim(1)));
  detail::require(bias.numel() == weight.dim(0), "conv2d: bias length must equal output channels");

  const std::size_t batch = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = weight.dim(0);
  const std::size_t plane = h * w;
  const std::size_t k = cin * 9;

  auto cols = std::make_shared<Buffer<T>>(batch * k * plane);
  const auto x = input.data();
  for (std::size_t b = 0; b < batch; ++b) {
    T* col = cols->data() + b * k * plane;
    for (std::size_t c = 0; c < cin; ++c) {
      const T* src = x.data() + (b * cin + c) * plane;
      for (std::size_t ky = 0; ky < 3; ++ky) {
        for (std::size_t kx = 0; kx < 3; ++kx) {
          T* row = col + ((c * 3 + ky) * 3 + kx) * plane;
          for (std::size_t y = 0; y < h; ++y) {
            const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
            T* dst = row + y * w;
            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) {
              std::fill_n(dst, w, T(0));
              continue;
            }
            const T* srow = src + static_cast<std::size_t>(sy) * w;
            for (std::size_t xx = 0; xx < w; ++xx) {
              const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - 1;
              dst[xx] = (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) ? T(0) : srow[sx];
            }
          }
        }
      }
    }
  }

  Buffer<T> out(batch * cout * plane);
  detail::MapConstMat<T> wmat(weight.data().data(), cout, k);
  const auto bv = bias.data();
  for (std::size_t b = 0; b < batch; ++b) {
    detail::MapConstMat<T> col(cols->data() + b * k * plane, k, plane);
    detail::MapMat<T> o(out.data() + b * cout * plane, cout, plane);
    o.noalias() = wmat * col;
    for (std::size_t c = 0; c < cout; ++c) o.row(c).array() += bv[c];
  }

  Tensor<T> res(Shape{batch, cout, h, w}, std::move(out));
  if (auto* tape = detail::recording_tape<T>({&input, &weight, &bias})) {
    tape->record(res.impl(), [xi = input.impl(), wi = weight.impl(), bi = bias.impl(), cols, batch, cin,
                              cout, h, w, plane, k](const Buffer<T>& g) {
      auto* gw = detail::grad_of(wi);
      auto* gb = detail::grad_of(bi);
      auto* gx = detail::grad_of(xi);
      Buffer<T> dcol(gx ? k * plane : 0);
      for (std::size_t b = 0; b < batch; ++b) {
        detail::MapConstMat<T> go(g.data() + b * cout * plane, cout, plane);
        detail::MapConstMat<T> col(cols->data() + b * k * plane, k, plane);
        if (gw) {
          detail::MapMat<T> dw(gw->data(), cout, k);
          dw.noalias() += go * col.transpose();
        }
        if (gb)
          for (std::size_t c = 0; c < cout; ++c) (*gb)[c] += go.row(c).sum();
        if (gx) {
          detail::MapConstMat<T> wmat(wi->data.data(), cout, k);
          detail::MapMat<T> dc(dcol.data(), k, plane);
          dc.noalias() = wmat.transpose() * go;
          for (std::size_t c = 0; c < cin; ++c) {
            T* dst = gx->data() + (b * cin + c) * plane;
            for (std::size_t ky = 0; ky < 3; ++ky) {
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const T* row = dcol.data() + ((c * 3 + ky) * 3 + kx) * plane;
                for (std::size_t y = 0; y < h; ++y) {
                  const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
                  if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
                  T* drow = dst + static_cast<std::size_t>(sy) * w;
                  const T* srow = row + y * w;
                  for (std::size_t xx = 0; xx < w; ++xx) {
                    const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - 1;
                    if (sx >= 0 && sx < static_cast<std::ptrdiff_t>(w)) drow[sx] += srow[xx];
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  return res;
}

/// Bilinear resize with half-pixel centers:
///   src = (dst + 0.5) * (src_size / dst_size) - 0.5, clamped to [0, src_size - 1].
/// Interpolation is written as a + f * (b - a) so constant images come out exact.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& input, std::size_t out_h, std::size_t out_w) {
  detail::require_rank(input, 4, "bilinear_resize");
  detail::require(out_h >= 1 && out_w >= 1, "bilinear_resize: output size must be positive");
  const std::size_t batch = input.dim(0), ch = input.dim(1), h = input.dim(2), w = input.dim(3);
  detail::require(h >= 1 && w >= 1, "bilinear_resize: empty input");

  auto ay = std::make_shared<detail::ResizeAxis<T>>(h, out_h);
  auto ax = std::make_shared<detail::ResizeAxis<T>>(w, out_w);
  Buffer<T> out(batch * ch * out_h * out_w);
  const auto x = input.data();
  for (std::size_t p = 0; p < batch * ch; ++p) {
    const T* src = x.data() + p * h * w;
    T* dst = out.data() + p * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const T* r0 = src + ay->lo[oy] * w;
      const T* r1 = src + ay->hi[oy] * w;
      const T fy = ay->frac[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const std::size_t x0 = ax->lo[ox], x1 = ax->hi[ox];
        const T fx = ax->frac[ox];
        const T top = r0[x0] + fx * (r0[x1] - r0[x0]);
        const T bot = r1[x0] + fx * (r1[x1] - r1[x0]);
        dst[oy * out_w + ox] = top + fy * (bot - top);
      }
    }
  }

  Tensor<T> res(Shape{batch, ch, out_h, out_w}, std::move(out));
  if (auto* tape = detail::recording_tape<T>({&input})) {
    tape->record(res.impl(), [xi = input.impl(), ay, ax, batch, ch, h, w, out_h, out_w](const Buffer<T>& g) {
      auto* gx = detail::grad_of(xi);
      if (!gx) return;
      for (std::size_t p = 0; p < batch * ch; ++p) {
        T* dsrc = gx->data() + p * h * w;
        const T* gout = g.data() + p * out_h * out_w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const T fy = ay->frac[oy];
          T* r0 = dsrc + ay->lo[oy] * w;
          T* r1 = dsrc + ay->hi[oy] * w;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const T gv = gout[oy * out_w + ox];
            const T fx = ax->frac[ox];
            const std::size_t x0 = ax->lo[ox], x1 = ax->hi[ox];
            r0[x0] += gv * (T(1) - fx) * (T(1) - fy);
            r0[x1] += gv * fx * (T(1) - fy);
            r1[x0] += gv * (T(1) - fx) * fy;
            r1[x1] += gv * fx * fy;
          }
        }
      }
    });
  }
  return res;
}

/// Bin (i, j) averages rows [floor(iH/M), ceil((i+1)H/M)) and the analogous columns.
template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& input, std::size_t grid) {
  detail::require_rank(input, 4, "adaptive_avg_pool");
  detail::require(grid >= 1, "adaptive_avg_pool: grid must be positive");
  const std::size_t batch = input.dim(0), ch = input.dim(1), h = input.dim(2), w = input.dim(3);
  Buffer<T> out(batch * ch * grid * grid);
  const auto x = input.data();
  for (std::size_t p = 0; p < batch * ch; ++p) {
    const T* src = x.data() + p * h * w;
    for (std::size_t i = 0; i < grid; ++i) {
      const std::size_t y0 = detail::pool_begin(i, h, grid), y1 = detail::pool_end(i, h, grid);
      for (std::size_t j = 0; j < grid; ++j) {
        const std::size_t x0 = detail::pool_begin(j, w, grid), x1 = detail::pool_end(j, w, grid);
        T acc = 0;
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t xx = x0; xx < x1; ++xx) acc += src[y * w + xx];
        out[(p * grid + i) * grid + j] = acc / static_cast<T>((y1 - y0) * (x1 - x0));
      }
    }
  }
  Tensor<T> res(Shape{batch, ch, grid, grid}, std::move(out));
  if (auto* tape = detail::recording_tape<T>({&input})) {
    tape->record(res.impl(), [xi = input.impl(), batch, ch, h, w, grid](const Buffer<T>& g) {
      auto* gx = detail::grad_of(xi);
      if (!gx) return;
      for (std::size_t p = 0; p < batch * ch; ++p) {
        T* dsrc = gx->data() + p * h * w;
        for (std::size_t i = 0; i < grid; ++i) {
          const std::size_t y0 = detail::pool_begin(i, h, grid), y1 = detail::pool_end(i, h, grid);
          for (std::size_t j = 0; j < grid; ++j) {
            const std::size_t x0 = detail::pool_begin(j, w, grid), x1 = detail::pool_end(j, w, grid);
            const T share = g[(p * grid + i) * grid + j] / static_cast<T>((y1 - y0) * (x1 - x0));
            for (std::size_t y = y0; y < y1; ++y)
              for (std::size_t xx = x0; xx < x1; ++xx) dsrc[y * w + xx] += share;
          }
        }
      }
    });
  }
  return res;
}

/// x * (1 + scale[b, c]) + shift[b, c], broadcast over the spatial plane.
template <typename T>
Tensor<T> modulate(const Tensor<T>& x, const Tensor<T>& scale_bc, const Tensor<T>& shift_bc) {
  detail::require_rank(x, 4, "modulate");
  const std::size_t batch = x.dim(0), ch = x.dim(1), plane = x.dim(2) * x.dim(3);
  detail::require(scale_bc.numel() == batch * ch && shift_bc.numel() == batch * ch,
                  "modulate: scale/shift must have B*C entries");
  Buffer<T> out(x.numel());
  const auto xv = x.data();
  const auto sv = scale_bc.data();
  const auto tv = shift_bc.data();
  for (std::size_t bc = 0; bc < batch * ch; ++bc) {
    const T a = T(1) + sv[bc];
    const T s = tv[bc];
    for (std::size_t i = 0; i < plane; ++i) out[bc * plane + i] = xv[bc * plane + i] * a + s;
  }
  Tensor<T> res(x.shape(), std::move(out));
  if (auto* tape = detail::recording_tape<T>({&x, &scale_bc, &shift_bc})) {
    tape->record(res.impl(), [xi = x.impl(), si = scale_bc.impl(), ti = shift_bc.impl(), batch, ch,
                              plane](const Buffer<T>& g) {
      auto* gx = detail::grad_of(xi);
      auto* gs = detail::grad_of(si);
      auto* gt = detail::grad_of(ti);
      for (std::size_t bc = 0; bc < batch * ch; ++bc) {
        const T a = T(1) + si->data[bc];
        T gsum = 0, gdot = 0;
        for (std::size_t i = 0; i < plane; ++i) {
          const T gv = g[bc * plane + i];
          if (gx) (*gx)[bc * plane + i] += gv * a;
          gsum += gv;
          gdot += gv * xi->data[bc * plane + i];
        }
        if (gs) (*gs)[bc] += gdot;
        if (gt) (*gt)[bc] += gsum;
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Matrix-shaped operations

/// Softmax over the last axis; subtracts the row max before exponentiating.
template <typename T>
Tensor<T> softmax_last(const Tensor<T>& input) {
  detail::require(input.rank() >= 1, "softmax_last: rank-0 input");
  const std::size_t n = input.shape().back();
  const std::size_t rows = input.numel() / n;
  Buffer<T> out(input.numel());
  const auto x = input.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = x.data() + r * n;
    T* dst = out.data() + r * n;
    const T mx = *std::max_element(src, src + n);
    T total = 0;
    for (std::size_t i = 0; i < n; ++i) total += (dst[i] = std::exp(src[i] - mx));
    for (std::size_t i = 0; i < n; ++i) dst[i] /= total;
  }
  Tensor<T> res(input.shape(), std::move(out));
  if (auto* tape = detail::recording_tape<T>({&input})) {
    tape->record(res.impl(), [xi = input.impl(), yi = res.impl().get(), rows, n](const Buffer<T>& g) {
      auto* gx = detail::grad_of(xi);
      if (!gx) return;
      // yi is the node's own output, alive for as long as the node is.
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = yi->data.data() + r * n;
        const T* gy = g.data() + r * n;
        T dot = 0;
        for (std::size_t i = 0; i < n; ++i) dot += gy[i] * y[i];
        for (std::size_t i = 0; i < n; ++i) (*gx)[r * n + i] += y[i] * (gy[i] - dot);
      }
    });
  }
  return res;
}

/// Batched product [B, N, K] x [B, K, M] -> [B, N, M].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a, 3, "matmul lhs");
  detail::require_rank(b, 3, "matmul rhs");
  detail::require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
                  "matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t batch = a.dim(0), n = a.dim(1), k = a.dim(2), m = b.dim(2);
  Buffer<T> out(batch * n * m);
  for (std::size_t i = 0; i < batch; ++i) {
    detail::MapConstMat<T> lhs(a.data().data() + i * n * k, n, k);
    detail::MapConstMat<T> rhs(b.data().data() + i * k * m, k, m);
    detail::MapMat<T> o(out.data() + i * n * m, n, m);
    o.noalias() = lhs * rhs;
  }
  Tensor<T> res(Shape{batch, n, m}, std::move(out));
  if (auto* tape = detail::recording_tape<T>({&a, &b})) {
    tape->record(res.impl(), [ai = a.impl(), bi = b.impl(), batch, n, k, m](const Buffer<T>& g) {
      auto* ga = detail::grad_of(ai);
      auto* gb = detail::grad_of(bi);
      for (std::size_t i = 0; i < batch; ++i) {
        detail::MapConstMat<T> go(g.data() + i * n * m, n, m);
        if (ga) {
          detail::MapConstMat<T> rhs(bi->data.data() + i * k * m, k, m);
          detail::MapMat<T> da(ga->data() + i * n * k, n, k);
          da.noalias() += go * rhs.transpose();
        }
        if (gb) {
          detail::MapConstMat<T> lhs(ai->data.data() + i * n * k, n, k);
          detail::MapMat<T> db(gb->data() + i * k * m, k, m);
          db.noalias() += lhs.transpose() * go;
        }
      }
    });
  }
  return res;
}

/// [B, N, K] -> [B, K, N]
template <typename T>
Tensor<T> transpose_last(const Tensor<T>& a) {
  detail::require_rank(a, 3, "transpose_last");
  const std::size_t batch = a.dim(0), n = a.dim(1), k = a.dim(2);
  Buffer<T> out(a.numel());
  const auto x = a.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) out[(b * k + j) * n + i] = x[(b * n + i) * k + j];
  Tensor<T> res(Shape{batch, k, n}, std::move(out));
  if (auto* tape = detail::recording_tape<T>({&a})) {
    tape->record(res.impl(), [ai = a.impl(), batch, n, k](const Buffer<T>& g) {
      if (auto* ga = detail::grad_of(ai))
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < k; ++j) (*ga)[(b * n + i) * k + j] += g[(b * k + j) * n + i];
    });
  }
  return res;
}

/// Affine map x[B, in] * weight[out, in]^T + bias[out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::require_rank(x, 2, "linear input");
  detail::require_rank(weight, 2, "linear weight");
  detail::require(weight.dim(1) == x.dim(1) && bias.numel() == weight.dim(0),
                  "linear: incompatible shapes " + shape_str(x.shape()) + " and " + shape_str(weight.shape()));
  const std::size_t batch = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  Buffer<T> out(batch * out_dim);
  detail::MapConstMat<T> xm(x.data().data(), batch, in);
  detail::MapConstMat<T> wm(weight.data().data(), out_dim, in);
  detail::MapMat<T> om(out.data(), batch, out_dim);
  om.noalias() = xm * wm.transpose();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < out_dim; ++o) om(b, o) += bias.data()[o];
  Tensor<T> res(Shape{batch, out_dim}, std::move(out));
  if (auto* tape = detail::recording_tape<T>({&x, &weight, &bias})) {
    tape->record(res.impl(), [xi = x.impl(), wi = weight.impl(), bi = bias.impl(), batch, in,
                              out_dim](const Buffer<T>& g) {
      detail::MapConstMat<T> go(g.data(), batch, out_dim);
      if (auto* gx = detail::grad_of(xi)) {
        detail::MapConstMat<T> wm2(wi->data.data(), out_dim, in);
        detail::MapMat<T> dx(gx->data(), batch, in);
        dx.noalias() += go * wm2;
      }
      if (auto* gw = detail::grad_of(wi)) {
        detail::MapConstMat<T> xm2(xi->data.data(), batch, in);
        detail::MapMat<T> dw(gw->data(), out_dim, in);
        dw.noalias() += go.transpose() * xm2;
      }
      if (auto* gb = detail::grad_of(bi))
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t o = 0; o < out_dim; ++o) (*gb)[o] += go(b, o);
    });
  }
  return res;
}

/// Subtracts, for each batch item and channel, the mean over the token axis of [B, N, C].
template <typename T>
Tensor<T> center_tokens(const Tensor<T>& x) {
  detail::require_rank(x, 3, "center_tokens");
  const std::size_t batch = x.dim(0), n = x.dim(1), c = x.dim(2);
  Buffer<T> out(x.impl()->data);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 0; j < c; ++j) {
      T m = 0;
      for (std::size_t i = 0; i < n; ++i) m += out[(b * n + i) * c + j];
      m /= static_cast<T>(n);
      for (std::size_t i = 0; i < n; ++i) out[(b * n + i) * c + j] -= m;
    }
  }
  Tensor<T> res(x.shape(), std::move(out));
  if (auto* tape = detail::recording_tape<T>({&x})) {
    tape->record(res.impl(), [xi = x.impl(), batch, n, c](const Buffer<T>& g) {
      auto* gx = detail::grad_of(xi);
      if (!gx) return;
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t j = 0; j < c; ++j) {
          T m = 0;
          for (std::size_t i = 0; i < n; ++i) m += g[(b * n + i) * c + j];
          m /= static_cast<T>(n);
          for (std::size_t i = 0; i < n; ++i) (*gx)[(b * n + i) * c + j] += g[(b * n + i) * c + j] - m;
        }
      }
    });
  }
  return res;
}

/// x / (||x||_2 + eps) along the last axis.
template <typename T>
Tensor<T> normalize_last(const Tensor<T>& x, T eps) {
  detail::require(x.rank() >= 1, "normalize_last: rank-0 input");
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.numel() / c;
  Buffer<T> out(x.numel());
  const auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T nrm = 0;
    for (std::size_t j = 0; j < c; ++j) nrm += xv[r * c + j] * xv[r * c + j];
    nrm = std::sqrt(nrm);
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = xv[r * c + j] / (nrm + eps);
  }
  Tensor<T> res(x.shape(), std::move(out));
  if (auto* tape = detail::recording_tape<T>({&x})) {
    tape->record(res.impl(), [xi = x.impl(), rows, c, eps](const Buffer<T>& g) {
      auto* gx = detail::grad_of(xi);
      if (!gx) return;
      for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xi->data.data() + r * c;
        const T* gr = g.data() + r * c;
        T nrm = 0, dot = 0;
        for (std::size_t j = 0; j < c; ++j) {
          nrm += xr[j] * xr[j];
          dot += gr[j] * xr[j];
        }
        nrm = std::sqrt(nrm);
        const T denom = nrm + eps;
        const T coef = nrm > T(0) ? dot / (denom * denom * nrm) : T(0);
        for (std::size_t j = 0; j < c; ++j) (*gx)[r * c + j] += gr[j] / denom - coef * xr[j];
      }
    });
  }
  return res;
}

}  // namespace arflow
