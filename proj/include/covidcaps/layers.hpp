/*
 * Copyright 2026 The covidcaps Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <variant>

#include "covidcaps/autodiff.hpp"

namespace covidcaps {

// ---------------------------------------------------------------------------
// Layer primitive specs
// ---------------------------------------------------------------------------

struct Conv2dSpec {
  std::size_t out_channels = 1;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

struct BatchNormSpec {
  double eps = 1e-5;
  double momentum = 0.9;  // weight on the previous running statistic
};

struct AvgPool2dSpec {
  std::size_t pool = 2;
  std::size_t stride = 2;
};

struct DenseSpec {
  std::size_t out_features = 1;
};

struct ReshapeSpec {
  Shape target;  // per-sample shape; batch axis is kept
};

struct ReluSpec {};

using LayerPrimitiveSpec = std::variant<Conv2dSpec, BatchNormSpec, AvgPool2dSpec,
                                        DenseSpec, ReshapeSpec, ReluSpec>;

inline void validate(const LayerPrimitiveSpec& spec) {
  std::visit(
      [](const auto& s) {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, Conv2dSpec>) {
          if (s.out_channels == 0 || s.kernel == 0)
            throw ParameterError("conv2d: channels and kernel must be >= 1");
          if (s.stride == 0) throw ParameterError("conv2d: stride must be >= 1");
        } else if constexpr (std::is_same_v<S, BatchNormSpec>) {
          if (!(s.eps > 0)) throw ParameterError("batch_norm: eps must be > 0");
          if (!(s.momentum >= 0 && s.momentum < 1))
            throw ParameterError("batch_norm: momentum must be in [0,1)");
        } else if constexpr (std::is_same_v<S, AvgPool2dSpec>) {
          if (s.pool == 0) throw ParameterError("avg_pool2d: pool must be >= 1");
          if (s.stride == 0)
            throw ParameterError("avg_pool2d: stride must be >= 1");
        } else if constexpr (std::is_same_v<S, DenseSpec>) {
          if (s.out_features == 0)
            throw ParameterError("dense: out_features must be >= 1");
        } else if constexpr (std::is_same_v<S, ReshapeSpec>) {
          if (s.target.empty())
            throw ParameterError("reshape: empty target shape");
          for (auto d : s.target)
            if (d == 0) throw ParameterError("reshape: zero target dimension");
        }
      },
      spec);
}

inline std::size_t conv_output_extent(std::size_t in, std::size_t kernel,
                                      std::size_t stride, std::size_t padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

namespace detail {

struct ConvGeometry {
  std::size_t n, c, h, w, f, kh, kw, oh, ow, stride, pad;
};

template <std::floating_point T>
ConvGeometry conv_geometry(const Tensor<T>& x, const Tensor<T>& k,
                           const Tensor<T>& b, std::size_t stride,
                           std::size_t padding) {
  if (x.rank() != 4 || k.rank() != 4 || b.rank() != 1) {
    throw DimensionError("conv2d expects input[N,C,H,W], kernel[F,C,kh,kw], "
                         "bias[F]; got " + shape_string(x.shape()) + ", " +
                         shape_string(k.shape()) + ", " +
                         shape_string(b.shape()));
  }
  if (stride == 0) throw ParameterError("conv2d: stride must be >= 1");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), k.dim(0), k.dim(2),
                 k.dim(3), 0, 0, stride, padding};
  if (k.dim(1) != g.c) {
    throw DimensionError("conv2d: input has " + std::to_string(g.c) +
                         " channels but kernel expects " +
                         std::to_string(k.dim(1)));
  }
  if (b.dim(0) != g.f) {
    throw DimensionError("conv2d: bias has " + std::to_string(b.dim(0)) +
                         " entries for " + std::to_string(g.f) + " filters");
  }
  if (g.h + 2 * padding < g.kh || g.w + 2 * padding < g.kw) {
    throw DimensionError("conv2d: kernel " + std::to_string(g.kh) + "x" +
                         std::to_string(g.kw) + " larger than padded input " +
                         std::to_string(g.h + 2 * padding) + "x" +
                         std::to_string(g.w + 2 * padding));
  }
  g.oh = conv_output_extent(g.h, g.kh, stride, padding);
  g.ow = conv_output_extent(g.w, g.kw, stride, padding);
  return g;
}

// Range of output columns ox for which ox*stride + k - pad lies in [0, w).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t k,
                                                       std::size_t pad,
                                                       std::size_t stride,
                                                       std::size_t in,
                                                       std::size_t out) {
  // need ox*stride >= pad - k  and  ox*stride + k - pad <= in - 1
  std::size_t lo = 0;
  if (pad > k) lo = (pad - k + stride - 1) / stride;
  if (k > in - 1 + pad) return {0, 0};
  std::size_t hi = (in - 1 + pad - k) / stride + 1;
  if (hi > out) hi = out;
  if (lo > hi) lo = hi;
  return {lo, hi};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d (cross-correlation, no kernel flip)
// ---------------------------------------------------------------------------

template <std::floating_point T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel,
                 const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding) {
  const auto g = detail::conv_geometry(input, kernel, bias, stride, padding);
  Tensor<T> out(Shape{g.n, g.f, g.oh, g.ow});
  const T* x = input.data().data();
  const T* w = kernel.data().data();
  T* y = out.data().data();
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t f = 0; f < g.f; ++f) {
      T* yp = y + ((n * g.f + f) * g.oh) * g.ow;
      std::fill(yp, yp + g.oh * g.ow, bias[f]);
      for (std::size_t c = 0; c < g.c; ++c) {
        const T* xp = x + ((n * g.c + c) * g.h) * g.w;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          const auto [oy0, oy1] = detail::valid_range(ky, g.pad, g.stride, g.h, g.oh);
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            const T wv = w[((f * g.c + c) * g.kh + ky) * g.kw + kx];
            const auto [ox0, ox1] =
                detail::valid_range(kx, g.pad, g.stride, g.w, g.ow);
            if (ox0 >= ox1) continue;
            const std::size_t len = ox1 - ox0;
            for (std::size_t oy = oy0; oy < oy1; ++oy) {
              // first valid input column of this row
              const T* row = xp + (oy * g.stride + ky - g.pad) * g.w +
                             (ox0 * g.stride + kx - g.pad);
              T* orow = yp + oy * g.ow + ox0;
              if (g.stride == 1) {
                for (std::size_t i = 0; i < len; ++i) orow[i] += wv * row[i];
              } else {
                for (std::size_t i = 0; i < len; ++i)
                  orow[i] += wv * row[i * g.stride];
              }
            }
          }
        }
      }
    }
  }
  return out;
}

namespace ops {

template <std::floating_point T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, const Var<T>& bias,
              std::size_t stride, std::size_t padding) {
  Tensor<T> out = covidcaps::conv2d(input.value(), kernel.value(), bias.value(),
                                    stride, padding);
  auto xn = input.node(), kn = kernel.node(), bn = bias.node();
  return make_result<T>(
      std::move(out), {input, kernel, bias},
      [xn, kn, bn, stride, padding](const Tensor<T>& gout) {
        const auto g = detail::conv_geometry(xn->value, kn->value, bn->value,
                                             stride, padding);
        const T* x = xn->value.data().data();
        const T* w = kn->value.data().data();
        const T* dy = gout.data().data();
        Tensor<T> dx, dw, db;
        if (xn->requires_grad) dx = Tensor<T>(xn->value.shape());
        if (kn->requires_grad) dw = Tensor<T>(kn->value.shape());
        if (bn->requires_grad) db = Tensor<T>(bn->value.shape());
        for (std::size_t n = 0; n < g.n; ++n) {
          for (std::size_t f = 0; f < g.f; ++f) {
            const T* dyp = dy + ((n * g.f + f) * g.oh) * g.ow;
            if (!db.empty()) {
              double acc = 0;
              for (std::size_t i = 0; i < g.oh * g.ow; ++i) acc += dyp[i];
              db[f] += static_cast<T>(acc);
            }
            for (std::size_t c = 0; c < g.c; ++c) {
              const T* xp = x + ((n * g.c + c) * g.h) * g.w;
              T* dxp = dx.empty() ? nullptr
                                  : dx.data().data() + ((n * g.c + c) * g.h) * g.w;
              for (std::size_t ky = 0; ky < g.kh; ++ky) {
                const auto [oy0, oy1] =
                    detail::valid_range(ky, g.pad, g.stride, g.h, g.oh);
                for (std::size_t kx = 0; kx < g.kw; ++kx) {
                  const std::size_t widx = ((f * g.c + c) * g.kh + ky) * g.kw + kx;
                  const T wv = w[widx];
                  const auto [ox0, ox1] =
                      detail::valid_range(kx, g.pad, g.stride, g.w, g.ow);
                  if (ox0 >= ox1) continue;
                  const std::size_t len = ox1 - ox0;
                  T wacc = 0;
                  for (std::size_t oy = oy0; oy < oy1; ++oy) {
                    const std::size_t base = (oy * g.stride + ky - g.pad) * g.w +
                                             (ox0 * g.stride + kx - g.pad);
                    const T* drow = dyp + oy * g.ow + ox0;
                    if (dxp) {
                      T* dxrow = dxp + base;
                      for (std::size_t i = 0; i < len; ++i)
                        dxrow[i * g.stride] += wv * drow[i];
                    }
                    if (!dw.empty()) {
                      const T* row = xp + base;
                      for (std::size_t i = 0; i < len; ++i)
                        wacc += drow[i] * row[i * g.stride];
                    }
                  }
                  if (!dw.empty()) dw[widx] += wacc;
                }
              }
            }
          }
        }
        if (!dx.empty()) xn->accumulate(dx);
        if (!dw.empty()) kn->accumulate(dw);
        if (!db.empty()) bn->accumulate(db);
      });
}

}  // namespace ops

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

enum class NormMode { train, infer };

/// Running per-channel statistics. `initialized` is false until set or
/// updated by a training-mode pass.
template <std::floating_point T>
struct RunningStats {
  Tensor<T> mean;
  Tensor<T> var;
  bool initialized = false;

  static RunningStats fresh(std::size_t channels) {
    return {Tensor<T>(Shape{channels}, T{0}), Tensor<T>(Shape{channels}, T{1}),
            true};
  }
};

namespace detail {

template <std::floating_point T>
void check_batch_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                      const Tensor<T>& beta, double eps) {
  if (!(eps > 0)) throw ParameterError("batch_norm: eps must be > 0");
  if (x.rank() != 4) {
    throw DimensionError("batch_norm expects input[N,C,H,W], got " +
                         shape_string(x.shape()));
  }
  const std::size_t c = x.dim(1);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw DimensionError("batch_norm: gamma/beta must be [" +
                         std::to_string(c) + "]");
  }
}

}  // namespace detail

namespace ops {

/// Per-channel normalization. In train mode batch statistics are used and
/// `stats` (when non-null) moves toward them with the given momentum; in
/// infer mode `stats` must be present and initialized.
template <std::floating_point T>
Var<T> batch_norm(const Var<T>& input, const Var<T>& gamma, const Var<T>& beta,
                  const BatchNormSpec& spec, NormMode mode,
                  std::type_identity_t<RunningStats<T>>* stats = nullptr) {
  const auto& x = input.value();
  detail::check_batch_norm(x, gamma.value(), beta.value(), spec.eps);
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const std::size_t count = n * hw;

  std::vector<double> mean(c), inv_std(c);
  if (mode == NormMode::train) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0, ss = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x.data().data() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(count);
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x.data().data() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      const double var = ss / static_cast<double>(count);
      mean[ch] = mu;
      inv_std[ch] = 1.0 / std::sqrt(var + spec.eps);
      if (stats) {
        if (!stats->initialized) *stats = RunningStats<T>::fresh(c);
        const double unbiased =
            count > 1 ? ss / static_cast<double>(count - 1) : var;
        stats->mean[ch] = static_cast<T>(spec.momentum * stats->mean[ch] +
                                         (1 - spec.momentum) * mu);
        stats->var[ch] = static_cast<T>(spec.momentum * stats->var[ch] +
                                        (1 - spec.momentum) * unbiased);
      }
    }
  } else {
    if (!stats || !stats->initialized) {
      throw StateError("batch_norm: inference mode requires running statistics");
    }
    if (stats->mean.shape() != Shape{c} || stats->var.shape() != Shape{c}) {
      throw DimensionError("batch_norm: running statistics shape mismatch");
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = stats->mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(static_cast<double>(stats->var[ch]) + spec.eps);
    }
  }

  Tensor<T> xhat(x.shape());
  Tensor<T> out(x.shape());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * hw;
      const T gm = gamma.value()[ch], bt = beta.value()[ch];
      for (std::size_t i = 0; i < hw; ++i) {
        const T xh = static_cast<T>((x[off + i] - mean[ch]) * inv_std[ch]);
        xhat[off + i] = xh;
        out[off + i] = gm * xh + bt;
      }
    }
  }

  auto xn = input.node(), gn = gamma.node(), bn = beta.node();
  return make_result<T>(
      std::move(out), {input, gamma, beta},
      [xn, gn, bn, xhat = std::move(xhat), inv_std, mode, n, c, hw,
       count](const Tensor<T>& g) {
        std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              sum_g[ch] += g[off + i];
              sum_gx[ch] += g[off + i] * xhat[off + i];
            }
          }
        if (gn->requires_grad) {
          Tensor<T> gg(Shape{c});
          for (std::size_t ch = 0; ch < c; ++ch) gg[ch] = static_cast<T>(sum_gx[ch]);
          gn->accumulate(gg);
        }
        if (bn->requires_grad) {
          Tensor<T> gb(Shape{c});
          for (std::size_t ch = 0; ch < c; ++ch) gb[ch] = static_cast<T>(sum_g[ch]);
          bn->accumulate(gb);
        }
        if (xn->requires_grad) {
          Tensor<T> gx(xn->value.shape());
          const double m = static_cast<double>(count);
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t off = (b * c + ch) * hw;
              const double k = gn->value[ch] * inv_std[ch];
              for (std::size_t i = 0; i < hw; ++i) {
                if (mode == NormMode::train) {
                  gx[off + i] = static_cast<T>(
                      k * (g[off + i] - sum_g[ch] / m -
                           xhat[off + i] * sum_gx[ch] / m));
                } else {
                  gx[off + i] = static_cast<T>(k * g[off + i]);
                }
              }
            }
          xn->accumulate(gx);
        }
      });
}

}  // namespace ops

template <std::floating_point T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma,
                     const Tensor<T>& beta, const BatchNormSpec& spec,
                     NormMode mode,
                     std::type_identity_t<RunningStats<T>>* stats = nullptr) {
  NoGradGuard guard;
  return ops::batch_norm(Var<T>(input), Var<T>(gamma), Var<T>(beta), spec, mode,
                         stats)
      .value();
}

// ---------------------------------------------------------------------------
// average pooling
// ---------------------------------------------------------------------------

template <std::floating_point T>
Tensor<T> avg_pool2d(const Tensor<T>& input, std::size_t pool,
                     std::size_t stride) {
  if (input.rank() != 4) {
    throw DimensionError("avg_pool2d expects input[N,C,H,W], got " +
                         shape_string(input.shape()));
  }
  if (pool == 0 || stride == 0)
    throw ParameterError("avg_pool2d: pool and stride must be >= 1");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2),
                    w = input.dim(3);
  if (pool > h || pool > w) {
    throw DimensionError("avg_pool2d: pool " + std::to_string(pool) +
                         " exceeds input " + std::to_string(h) + "x" +
                         std::to_string(w));
  }
  const std::size_t oh = (h - pool) / stride + 1, ow = (w - pool) / stride + 1;
  Tensor<T> out(Shape{n, c, oh, ow});
  const double inv = 1.0 / static_cast<double>(pool * pool);
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* xp = input.data().data() + p * h * w;
    T* yp = out.data().data() + p * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = 0;
        for (std::size_t ky = 0; ky < pool; ++ky)
          for (std::size_t kx = 0; kx < pool; ++kx)
            acc += xp[(oy * stride + ky) * w + ox * stride + kx];
        yp[oy * ow + ox] = static_cast<T>(acc * inv);
      }
  }
  return out;
}

namespace ops {

template <std::floating_point T>
Var<T> avg_pool2d(const Var<T>& input, std::size_t pool, std::size_t stride) {
  Tensor<T> out = covidcaps::avg_pool2d(input.value(), pool, stride);
  auto xn = input.node();
  const Shape oshape = out.shape();
  return make_result<T>(
      std::move(out), {input}, [xn, pool, stride, oshape](const Tensor<T>& g) {
        const auto& s = xn->value.shape();
        const std::size_t h = s[2], w = s[3], oh = oshape[2], ow = oshape[3];
        Tensor<T> gx(s);
        const T inv = static_cast<T>(1.0 / static_cast<double>(pool * pool));
        for (std::size_t p = 0; p < s[0] * s[1]; ++p) {
          const T* gp = g.data().data() + p * oh * ow;
          T* dp = gx.data().data() + p * h * w;
          for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const T v = gp[oy * ow + ox] * inv;
              for (std::size_t ky = 0; ky < pool; ++ky)
                for (std::size_t kx = 0; kx < pool; ++kx)
                  dp[(oy * stride + ky) * w + ox * stride + kx] += v;
            }
        }
        xn->accumulate(gx);
      });
}

}  // namespace ops
}  // namespace covidcaps
