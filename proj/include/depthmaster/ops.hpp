// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "depthmaster/autograd.hpp"

namespace depthmaster {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

namespace detail {

template <typename T>
void accumulate(const Var<T>& v, const Tensor<T>& g) {
  if (!v.requires_grad()) return;
  auto& buf = v.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

template <typename T>
T sigmoid(T x) {
  return T{1} / (T{1} + std::exp(-x));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_op<T>(std::move(out), {a, b},
                    [a, b](const Tensor<T>& g) mutable {
                      detail::accumulate(a, g);
                      detail::accumulate(b, g);
                    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= s;
  return make_op<T>(std::move(out), {a}, [a, s](const Tensor<T>& g) mutable {
    if (!a.requires_grad()) return;
    auto& buf = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += s * g[i];
  });
}

/// Weighted sum of scalars; used to assemble composite objectives.
template <typename T>
Var<T> weighted_sum(const std::vector<std::pair<Var<T>, T>>& terms) {
  Tensor<T> out(Shape{1});
  std::vector<Var<T>> inputs;
  for (const auto& [v, w] : terms) {
    out[0] += w * v.value()[0];
    inputs.push_back(v);
  }
  return make_op<T>(std::move(out), inputs,
                    [terms](const Tensor<T>& g) mutable {
                      for (auto& [v, w] : terms) {
                        if (v.requires_grad()) v.grad_buffer()[0] += w * g[0];
                      }
                    });
}

/// x (N,C,H,W) + bias broadcast over N, H, W. `bias` holds C values.
template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& bias) {
  require_rank(x.shape(), 4, "add_channel_bias");
  const std::size_t n = x.shape()[0], c = x.shape()[1],
                    hw = x.shape()[2] * x.shape()[3];
  if (bias.value().size() != c) {
    throw ShapeError("add_channel_bias: bias has " +
                     std::to_string(bias.value().size()) + " values for " +
                     std::to_string(c) + " channels");
  }
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T b = bias.value()[ch];
      T* p = out.data() + (i * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) p[k] += b;
    }
  return make_op<T>(std::move(out), {x, bias},
                    [x, bias, n, c, hw](const Tensor<T>& g) mutable {
                      detail::accumulate(x, g);
                      if (!bias.requires_grad()) return;
                      auto& gb = bias.grad_buffer();
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t ch = 0; ch < c; ++ch) {
                          const T* p = g.data() + (i * c + ch) * hw;
                          T s{0};
                          for (std::size_t k = 0; k < hw; ++k) s += p[k];
                          gb[ch] += s;
                        }
                    });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class Activation { identity, silu, gelu_tanh };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::silu: return "silu";
    case Activation::gelu_tanh: return "gelu_tanh";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "silu") return Activation::silu;
  if (s == "gelu_tanh" || s == "gelu") return Activation::gelu_tanh;
  throw ConfigError("unknown activation '" + s + "'");
}

template <typename T>
Var<T> activate(const Var<T>& x, Activation kind) {
  if (kind == Activation::identity) return x;
  Tensor<T> out = x.value();
  if (kind == Activation::silu) {
    for (auto& v : out.values()) v = v * detail::sigmoid(v);
    return make_op<T>(std::move(out), {x}, [x](const Tensor<T>& g) mutable {
      auto& gx = x.grad_buffer();
      const auto& xv = x.value();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T s = detail::sigmoid(xv[i]);
        gx[i] += g[i] * s * (T{1} + xv[i] * (T{1} - s));
      }
    });
  }
  // tanh-approximated GELU
  const T k0 = T(0.7978845608028654), k1 = T(0.044715);
  for (auto& v : out.values()) {
    v = T(0.5) * v * (T{1} + std::tanh(k0 * (v + k1 * v * v * v)));
  }
  return make_op<T>(std::move(out), {x}, [x, k0, k1](const Tensor<T>& g) mutable {
    auto& gx = x.grad_buffer();
    const auto& xv = x.value();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = xv[i];
      const T u = k0 * (v + k1 * v * v * v);
      const T t = std::tanh(u);
      const T du = k0 * (T{1} + T{3} * k1 * v * v);
      gx[i] += g[i] * (T(0.5) * (T{1} + t) + T(0.5) * v * (T{1} - t * t) * du);
    }
  });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  return activate(x, Activation::silu);
}

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM)
// ---------------------------------------------------------------------------

struct ConvGeometry {
  std::size_t n, c, h, w, out_c, k, stride, pad, oh, ow;
};

namespace detail {

/// Output columns [lo, hi) whose input column oj*stride + kj - pad lies
/// inside [0, w).
inline std::pair<std::size_t, std::size_t> valid_span(std::size_t ow, std::size_t w,
                                                      std::size_t stride, std::size_t kj,
                                                      std::size_t pad) {
  std::size_t lo = 0;
  while (lo < ow && lo * stride + kj < pad) ++lo;
  std::size_t hi = lo;
  while (hi < ow && hi * stride + kj < pad + w) ++hi;
  return {lo, hi};
}

/// cols: (C*k*k) x (N*oh*ow), row-major.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const std::size_t plane = g.oh * g.ow;
  const std::size_t ncols = g.n * plane;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        T* row = cols + ((c * g.k + ki) * g.k + kj) * ncols;
        const auto [lo, hi] = valid_span(g.ow, g.w, g.stride, kj, g.pad);
        for (std::size_t n = 0; n < g.n; ++n) {
          const T* src = x + (n * g.c + c) * g.h * g.w;
          T* dst = row + n * plane;
          for (std::size_t oi = 0; oi < g.oh; ++oi) {
            const long ii = static_cast<long>(oi * g.stride + ki) -
                            static_cast<long>(g.pad);
            T* d = dst + oi * g.ow;
            if (ii < 0 || ii >= static_cast<long>(g.h)) {
              std::fill(d, d + g.ow, T{0});
              continue;
            }
            std::fill(d, d + lo, T{0});
            std::fill(d + hi, d + g.ow, T{0});
            const T* s = src + static_cast<std::size_t>(ii) * g.w + lo * g.stride + kj - g.pad;
            if (g.stride == 1) {
              std::copy(s, s + (hi - lo), d + lo);
            } else {
              for (std::size_t oj = lo; oj < hi; ++oj, s += g.stride) d[oj] = *s;
            }
          }
        }
      }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* dx) {
  const std::size_t plane = g.oh * g.ow;
  const std::size_t ncols = g.n * plane;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const T* row = cols + ((c * g.k + ki) * g.k + kj) * ncols;
        const auto [lo, hi] = valid_span(g.ow, g.w, g.stride, kj, g.pad);
        for (std::size_t n = 0; n < g.n; ++n) {
          T* dst = dx + (n * g.c + c) * g.h * g.w;
          const T* src = row + n * plane;
          for (std::size_t oi = 0; oi < g.oh; ++oi) {
            const long ii = static_cast<long>(oi * g.stride + ki) -
                            static_cast<long>(g.pad);
            if (ii < 0 || ii >= static_cast<long>(g.h)) continue;
            T* d = dst + static_cast<std::size_t>(ii) * g.w + lo * g.stride + kj - g.pad;
            const T* s = src + oi * g.ow;
            for (std::size_t oj = lo; oj < hi; ++oj, d += g.stride) *d += s[oj];
          }
        }
      }
}

}  // namespace detail

/// 2-D convolution. x (N,C,H,W), weight (O,C,k,k), bias (O) or empty.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
              std::size_t stride = 1, std::size_t pad = 0) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(weight.shape(), 4, "conv2d weight");
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  if (ws[1] != xs[1] || ws[2] != ws[3]) {
    throw ShapeError("conv2d: weight " + to_string(ws) +
                     " incompatible with input " + to_string(xs));
  }
  ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], stride, pad, 0, 0};
  if (g.h + 2 * pad < g.k || g.w + 2 * pad < g.k) {
    throw ShapeError("conv2d: kernel larger than padded input");
  }
  g.oh = (g.h + 2 * pad - g.k) / stride + 1;
  g.ow = (g.w + 2 * pad - g.k) / stride + 1;
  const bool has_bias = static_cast<bool>(bias);
  if (has_bias && bias.value().size() != g.out_c) {
    throw ShapeError("conv2d: bias size mismatch");
  }

  const std::size_t kdim = g.c * g.k * g.k;
  const std::size_t plane = g.oh * g.ow;
  const std::size_t ncols = g.n * plane;
  std::vector<T> cols(kdim * ncols);
  detail::im2col(x.value().data(), g, cols.data());

  RowMatrix<T> y(g.out_c, ncols);
  ConstMatrixMap<T> wm(weight.value().data(), g.out_c, kdim);
  ConstMatrixMap<T> cm(cols.data(), kdim, ncols);
  y.noalias() = wm * cm;

  Tensor<T> out(Shape{g.n, g.out_c, g.oh, g.ow});
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.out_c; ++o) {
      const T b = has_bias ? bias.value()[o] : T{0};
      const T* src = y.data() + o * ncols + n * plane;
      T* dst = out.data() + (n * g.out_c + o) * plane;
      for (std::size_t k = 0; k < plane; ++k) dst[k] = src[k] + b;
    }

  std::vector<Var<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_op<T>(
      std::move(out), inputs,
      [x, weight, bias, g, has_bias, kdim, plane, ncols,
       cols = std::move(cols)](const Tensor<T>& gout) mutable {
        RowMatrix<T> dy(g.out_c, ncols);
        for (std::size_t n = 0; n < g.n; ++n)
          for (std::size_t o = 0; o < g.out_c; ++o) {
            const T* src = gout.data() + (n * g.out_c + o) * plane;
            std::copy(src, src + plane, dy.data() + o * ncols + n * plane);
          }
        if (weight.requires_grad()) {
          MatrixMap<T> dw(weight.grad_buffer().data(), g.out_c, kdim);
          ConstMatrixMap<T> cm(cols.data(), kdim, ncols);
          dw.noalias() += dy * cm.transpose();
        }
        if (has_bias && bias.requires_grad()) {
          auto& db = bias.grad_buffer();
          for (std::size_t o = 0; o < g.out_c; ++o) db[o] += dy.row(o).sum();
        }
        if (x.requires_grad()) {
          ConstMatrixMap<T> wm(weight.value().data(), g.out_c, kdim);
          RowMatrix<T> dcols(kdim, ncols);
          dcols.noalias() = wm.transpose() * dy;
          detail::col2im_add(dcols.data(), g, x.grad_buffer().data());
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Group normalization over (C/groups, H, W) per sample, with per-channel
/// affine parameters.
template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  std::size_t groups, T eps = T(1e-5)) {
  require_rank(x.shape(), 4, "group_norm");
  const std::size_t n = x.shape()[0], c = x.shape()[1],
                    hw = x.shape()[2] * x.shape()[3];
  if (groups == 0 || c % groups != 0) {
    throw ConfigError("group_norm: " + std::to_string(c) +
                      " channels not divisible into " + std::to_string(groups) +
                      " groups");
  }
  const std::size_t cg = c / groups;
  const std::size_t len = cg * hw;
  Tensor<T> xhat(x.shape());
  std::vector<T> rstd(n * groups);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t off = (i * c + gi * cg) * hw;
      const T* p = x.value().data() + off;
      double mean = 0.0;
      for (std::size_t k = 0; k < len; ++k) mean += p[k];
      mean /= static_cast<double>(len);
      double var = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double d = p[k] - mean;
        var += d * d;
      }
      var /= static_cast<double>(len);
      const T rs = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      rstd[i * groups + gi] = rs;
      T* xh = xhat.data() + off;
      T* o = out.data() + off;
      for (std::size_t cc = 0; cc < cg; ++cc) {
        const std::size_t ch = gi * cg + cc;
        const T ga = gamma.value()[ch], be = beta.value()[ch];
        for (std::size_t k = 0; k < hw; ++k) {
          const std::size_t idx = cc * hw + k;
          xh[idx] = static_cast<T>((p[idx] - mean)) * rs;
          o[idx] = xh[idx] * ga + be;
        }
      }
    }
  return make_op<T>(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, n, c, hw, groups, cg, len, xhat = std::move(xhat),
       rstd = std::move(rstd)](const Tensor<T>& g) mutable {
        const bool need_x = x.requires_grad();
        T* gx = need_x ? x.grad_buffer().data() : nullptr;
        T* gg = gamma.requires_grad() ? gamma.grad_buffer().data() : nullptr;
        T* gb = beta.requires_grad() ? beta.grad_buffer().data() : nullptr;
        std::vector<T> dxhat(len);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t gi = 0; gi < groups; ++gi) {
            const std::size_t off = (i * c + gi * cg) * hw;
            const T* go = g.data() + off;
            const T* xh = xhat.data() + off;
            T sum_d{0}, sum_dx{0};
            for (std::size_t cc = 0; cc < cg; ++cc) {
              const std::size_t ch = gi * cg + cc;
              const T ga = gamma.value()[ch];
              T s_g{0}, s_gx{0};
              for (std::size_t k = 0; k < hw; ++k) {
                const std::size_t idx = cc * hw + k;
                s_g += go[idx];
                s_gx += go[idx] * xh[idx];
                dxhat[idx] = go[idx] * ga;
                sum_d += dxhat[idx];
                sum_dx += dxhat[idx] * xh[idx];
              }
              if (gg) gg[ch] += s_gx;
              if (gb) gb[ch] += s_g;
            }
            if (!need_x) continue;
            const T rs = rstd[i * groups + gi];
            const T inv = T{1} / static_cast<T>(len);
            T* dx = gx + off;
            for (std::size_t idx = 0; idx < len; ++idx) {
              dx[idx] += rs * (dxhat[idx] - inv * sum_d - xh[idx] * inv * sum_dx);
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  require_rank(a.shape(), 4, "concat_channels");
  require_rank(b.shape(), 4, "concat_channels");
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3]) {
    throw ShapeError("concat_channels: " + to_string(as) + " vs " +
                     to_string(bs));
  }
  const std::size_t n = as[0], ca = as[1], cb = bs[1], hw = as[2] * as[3];
  Tensor<T> out(Shape{n, ca + cb, as[2], as[3]});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.value().data() + i * ca * hw, ca * hw,
                out.data() + i * (ca + cb) * hw);
    std::copy_n(b.value().data() + i * cb * hw, cb * hw,
                out.data() + (i * (ca + cb) + ca) * hw);
  }
  return make_op<T>(std::move(out), {a, b},
                    [a, b, n, ca, cb, hw](const Tensor<T>& g) mutable {
                      for (std::size_t i = 0; i < n; ++i) {
                        const T* src = g.data() + i * (ca + cb) * hw;
                        if (a.requires_grad()) {
                          T* d = a.grad_buffer().data() + i * ca * hw;
                          for (std::size_t k = 0; k < ca * hw; ++k) d[k] += src[k];
                        }
                        if (b.requires_grad()) {
                          T* d = b.grad_buffer().data() + i * cb * hw;
                          for (std::size_t k = 0; k < cb * hw; ++k)
                            d[k] += src[ca * hw + k];
                        }
                      }
                    });
}

/// Channel range [begin, end) of a rank-4 tensor.
template <typename T>
Var<T> slice_channels(const Var<T>& x, std::size_t begin, std::size_t end) {
  require_rank(x.shape(), 4, "slice_channels");
  const std::size_t n = x.shape()[0], c = x.shape()[1],
                    hw = x.shape()[2] * x.shape()[3], k = end - begin;
  if (end > c || begin >= end) throw ShapeError("slice_channels: bad range");
  Tensor<T> out(Shape{n, k, x.shape()[2], x.shape()[3]});
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(x.value().data() + (i * c + begin) * hw, k * hw,
                out.data() + i * k * hw);
  return make_op<T>(std::move(out), {x},
                    [x, n, c, hw, k, begin](const Tensor<T>& g) mutable {
                      T* d = x.grad_buffer().data();
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < k * hw; ++j)
                          d[(i * c + begin) * hw + j] += g[i * k * hw + j];
                    });
}

template <typename T>
Var<T> upsample_nearest2x(const Var<T>& x) {
  require_rank(x.shape(), 4, "upsample_nearest2x");
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2],
                    w = x.shape()[3];
  Tensor<T> out(Shape{n, c, 2 * h, 2 * w});
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* s = x.value().data() + p * h * w;
    T* d = out.data() + p * 4 * h * w;
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < 2 * w; ++j)
        d[i * 2 * w + j] = s[(i / 2) * w + j / 2];
  }
  return make_op<T>(std::move(out), {x},
                    [x, n, c, h, w](const Tensor<T>& g) mutable {
                      T* gx = x.grad_buffer().data();
                      for (std::size_t p = 0; p < n * c; ++p) {
                        const T* s = g.data() + p * 4 * h * w;
                        T* d = gx + p * h * w;
                        for (std::size_t i = 0; i < 2 * h; ++i)
                          for (std::size_t j = 0; j < 2 * w; ++j)
                            d[(i / 2) * w + j / 2] += s[i * 2 * w + j];
                      }
                    });
}

/// Mean over the channel axis: (N,C,H,W) -> (N,1,H,W).
template <typename T>
Var<T> channel_mean(const Var<T>& x) {
  require_rank(x.shape(), 4, "channel_mean");
  const std::size_t n = x.shape()[0], c = x.shape()[1],
                    hw = x.shape()[2] * x.shape()[3];
  Tensor<T> out(Shape{n, 1, x.shape()[2], x.shape()[3]});
  const T inv = T{1} / static_cast<T>(c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t k = 0; k < hw; ++k)
        out[i * hw + k] += x.value()[(i * c + ch) * hw + k] * inv;
  return make_op<T>(std::move(out), {x},
                    [x, n, c, hw, inv](const Tensor<T>& g) mutable {
                      T* gx = x.grad_buffer().data();
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t ch = 0; ch < c; ++ch)
                          for (std::size_t k = 0; k < hw; ++k)
                            gx[(i * c + ch) * hw + k] += g[i * hw + k] * inv;
                    });
}

/// Fully connected layer on rows: x (N,in), weight (out,in), bias (out).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  require_rank(x.shape(), 2, "linear input");
  require_rank(weight.shape(), 2, "linear weight");
  const std::size_t n = x.shape()[0], in = x.shape()[1],
                    out_dim = weight.shape()[0];
  if (weight.shape()[1] != in) throw ShapeError("linear: weight/input mismatch");
  Tensor<T> out(Shape{n, out_dim});
  MatrixMap<T> om(out.data(), n, out_dim);
  ConstMatrixMap<T> xm(x.value().data(), n, in);
  ConstMatrixMap<T> wm(weight.value().data(), out_dim, in);
  om.noalias() = xm * wm.transpose();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < out_dim; ++o) out[i * out_dim + o] += bias.value()[o];
  return make_op<T>(
      std::move(out), {x, weight, bias},
      [x, weight, bias, n, in, out_dim](const Tensor<T>& g) mutable {
        ConstMatrixMap<T> gm(g.data(), n, out_dim);
        if (weight.requires_grad()) {
          MatrixMap<T> dw(weight.grad_buffer().data(), out_dim, in);
          ConstMatrixMap<T> xm(x.value().data(), n, in);
          dw.noalias() += gm.transpose() * xm;
        }
        if (bias.requires_grad()) {
          auto& db = bias.grad_buffer();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t o = 0; o < out_dim; ++o) db[o] += g[i * out_dim + o];
        }
        if (x.requires_grad()) {
          MatrixMap<T> dx(x.grad_buffer().data(), n, in);
          ConstMatrixMap<T> wm(weight.value().data(), out_dim, in);
          dx.noalias() += gm * wm;
        }
      });
}

/// Reinterpret the value under a new shape of equal element count.
template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return make_op<T>(std::move(out), {x}, [x](const Tensor<T>& g) mutable {
    auto& gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Bilinear resampling
// ---------------------------------------------------------------------------

namespace detail {

struct LinearTap {
  std::size_t i0, i1;
  double w0, w1;
};

/// Half-pixel-centre sampling positions; identity when sizes match.
inline std::vector<LinearTap> linear_taps(std::size_t in, std::size_t out) {
  std::vector<LinearTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    const double f = src - static_cast<double>(i0);
    taps[o] = {i0, i1, 1.0 - f, f};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize (N,C,h,w) -> (N,C,oh,ow). Constant maps stay constant.
template <typename T>
Var<T> bilinear_resize(const Var<T>& x, std::size_t oh, std::size_t ow) {
  require_rank(x.shape(), 4, "bilinear_resize");
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2],
                    w = x.shape()[3];
  if (h == oh && w == ow) return x;
  const auto rows = detail::linear_taps(h, oh);
  const auto cols = detail::linear_taps(w, ow);
  Tensor<T> out(Shape{n, c, oh, ow});
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* s = x.value().data() + p * h * w;
    T* d = out.data() + p * oh * ow;
    for (std::size_t i = 0; i < oh; ++i) {
      const auto& r = rows[i];
      for (std::size_t j = 0; j < ow; ++j) {
        const auto& q = cols[j];
        d[i * ow + j] = static_cast<T>(
            r.w0 * (q.w0 * s[r.i0 * w + q.i0] + q.w1 * s[r.i0 * w + q.i1]) +
            r.w1 * (q.w0 * s[r.i1 * w + q.i0] + q.w1 * s[r.i1 * w + q.i1]));
      }
    }
  }
  return make_op<T>(std::move(out), {x},
                    [x, n, c, h, w, oh, ow, rows, cols](const Tensor<T>& g) mutable {
                      T* gx = x.grad_buffer().data();
                      for (std::size_t p = 0; p < n * c; ++p) {
                        const T* s = g.data() + p * oh * ow;
                        T* d = gx + p * h * w;
                        for (std::size_t i = 0; i < oh; ++i) {
                          const auto& r = rows[i];
                          for (std::size_t j = 0; j < ow; ++j) {
                            const auto& q = cols[j];
                            const T v = s[i * ow + j];
                            d[r.i0 * w + q.i0] += static_cast<T>(r.w0 * q.w0) * v;
                            d[r.i0 * w + q.i1] += static_cast<T>(r.w0 * q.w1) * v;
                            d[r.i1 * w + q.i0] += static_cast<T>(r.w1 * q.w0) * v;
                            d[r.i1 * w + q.i1] += static_cast<T>(r.w1 * q.w1) * v;
                          }
                        }
                      }
                    });
}

}  // namespace depthmaster
