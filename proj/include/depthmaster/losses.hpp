// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "depthmaster/autograd.hpp"
#include "depthmaster/raster.hpp"

namespace depthmaster::losses {

/// Offsets (di, dj) of the four gradient directions, in stack order:
/// horizontal, vertical, diagonal, anti-diagonal.
inline constexpr std::array<std::array<int, 2>, 4> kDirections{{{0, 1}, {1, 0}, {1, 1}, {1, -1}}};

/// Elementwise penalty shape for gradient residuals.
///  linear_inside: d*|x| for |x| <= d, x^2/2 + d^2/2 beyond (the default).
///  classical:     x^2/2 for |x| <= d, d*(|x| - d/2) beyond.
enum class HuberForm { linear_inside, classical };

inline std::string to_string(HuberForm f) {
  return f == HuberForm::linear_inside ? "linear_inside" : "classical";
}

inline HuberForm parse_huber_form(const std::string& s) {
  if (s == "linear_inside" || s == "default") return HuberForm::linear_inside;
  if (s == "classical") return HuberForm::classical;
  throw ConfigError("unknown huber form '" + s + "'");
}

struct LossConfig {
  double delta = 0.1;
  double lambda_fa = 1.0;
  double lambda_h = 0.001;
  HuberForm huber = HuberForm::linear_inside;

  void validate() const {
    if (!(delta > 0)) throw ConfigError("loss delta must be > 0");
    if (lambda_fa < 0 || lambda_h < 0) throw ConfigError("loss weights must be >= 0");
  }
};

inline double huber_value(double x, double delta, HuberForm form = HuberForm::linear_inside) {
  const double a = std::abs(x);
  if (form == HuberForm::linear_inside) {
    return a <= delta ? delta * a : 0.5 * x * x + 0.5 * delta * delta;
  }
  return a <= delta ? 0.5 * x * x : delta * (a - 0.5 * delta);
}

/// d huber / dx (subgradient 0 at x = 0 for the linear-inside form).
inline double huber_slope(double x, double delta, HuberForm form = HuberForm::linear_inside) {
  const double a = std::abs(x);
  const double sign = x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0);
  if (form == HuberForm::linear_inside) return a <= delta ? delta * sign : x;
  return a <= delta ? x : delta * sign;
}

// ---------------------------------------------------------------------------
// Value-level losses on plain tensors and rasters
// ---------------------------------------------------------------------------

template <typename T>
double latent_loss(const Tensor<T>& z_gt, const Tensor<T>& z_pred) {
  require_same_shape(z_gt.shape(), z_pred.shape(), "latent_loss");
  if (z_gt.size() == 0) throw DegenerateError("latent_loss: empty tensors");
  double acc = 0;
  for (std::size_t i = 0; i < z_gt.size(); ++i) {
    const double d = static_cast<double>(z_gt[i]) - static_cast<double>(z_pred[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(z_gt.size());
}

inline double pixel_loss(const ScalarMap& gt, const ScalarMap& pred, const ValidityMask& mask) {
  if (!pred.same_size(gt.height(), gt.width()) || !mask.same_size(gt.height(), gt.width())) {
    throw ShapeError("pixel_loss: raster size mismatch");
  }
  double acc = 0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < gt.pixels(); ++k) {
    if (!mask[k]) continue;
    const double d = static_cast<double>(gt[k]) - pred[k];
    acc += d * d;
    ++n;
  }
  if (n == 0) throw DegenerateError("pixel_loss: no valid pixels");
  return acc / static_cast<double>(n);
}

/// H x W x 4 finite differences with per-entry validity.
struct GradientStack {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> data;
  std::vector<std::uint8_t> valid;

  float& at(std::size_t i, std::size_t j, std::size_t k) { return data[(i * width + j) * 4 + k]; }
  float at(std::size_t i, std::size_t j, std::size_t k) const {
    return data[(i * width + j) * 4 + k];
  }
  bool is_valid(std::size_t i, std::size_t j, std::size_t k) const {
    return valid[(i * width + j) * 4 + k] != 0;
  }
};

inline GradientStack directional_gradients(const ScalarMap& map, const ValidityMask& mask) {
  if (!mask.same_size(map.height(), map.width())) {
    throw ShapeError("directional_gradients: mask size mismatch");
  }
  const std::size_t H = map.height(), W = map.width();
  GradientStack g{H, W, std::vector<float>(H * W * 4, 0.0f),
                  std::vector<std::uint8_t>(H * W * 4, 0)};
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      if (!mask(i, j)) continue;
      for (std::size_t k = 0; k < 4; ++k) {
        const long ii = static_cast<long>(i) + kDirections[k][0];
        const long jj = static_cast<long>(j) + kDirections[k][1];
        if (ii < 0 || jj < 0 || ii >= static_cast<long>(H) || jj >= static_cast<long>(W)) continue;
        const auto ui = static_cast<std::size_t>(ii), uj = static_cast<std::size_t>(jj);
        if (!mask(ui, uj)) continue;
        g.at(i, j, k) = map(ui, uj) - map(i, j);
        g.valid[(i * W + j) * 4 + k] = 1;
      }
    }
  return g;
}

/// Mean penalty of (gt - pred) over jointly valid entries.
inline double gradient_huber_loss(const GradientStack& gt, const GradientStack& pred, double delta,
                                  HuberForm form = HuberForm::linear_inside) {
  if (!(delta > 0)) throw ConfigError("gradient_huber_loss: delta must be > 0");
  if (gt.data.size() != pred.data.size() || gt.height != pred.height) {
    throw ShapeError("gradient_huber_loss: stack shape mismatch");
  }
  double acc = 0;
  std::size_t n = 0;
  for (std::size_t e = 0; e < gt.data.size(); ++e) {
    if (!gt.valid[e] || !pred.valid[e]) continue;
    acc += huber_value(static_cast<double>(gt.data[e]) - pred.data[e], delta, form);
    ++n;
  }
  if (n == 0) throw DegenerateError("gradient_huber_loss: no valid entries");
  return acc / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Differentiable losses (batched, NCHW). Per-sample means are averaged over
// the batch so splitting a batch into equal micro-batches is exact.
// ---------------------------------------------------------------------------

/// Mean squared error against a constant target.
template <typename T>
Var<T> mse(const Var<T>& pred, const Tensor<T>& target) {
  require_same_shape(pred.shape(), target.shape(), "mse");
  const std::size_t n = target.size();
  if (n == 0) throw DegenerateError("mse: empty tensors");
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(pred.value()[i]) - target[i];
    acc += d * d;
  }
  Tensor<T> out(Shape{1}, static_cast<T>(acc / static_cast<double>(n)));
  return make_op<T>(std::move(out), {pred}, [pred, target, n](const Tensor<T>& g) mutable {
    auto& buf = pred.grad_buffer();
    const T c = g[0] * T(2) / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) buf[i] += c * (pred.value()[i] - target[i]);
  });
}

/// Masked MSE for (N,1,H,W) maps: mean over valid pixels per sample, then
/// mean over samples. `mask` holds N*H*W flags.
template <typename T>
Var<T> masked_mse(const Var<T>& pred, const Tensor<T>& target, const std::vector<std::uint8_t>& mask) {
  require_same_shape(pred.shape(), target.shape(), "masked_mse");
  require_rank(pred.shape(), 4, "masked_mse");
  const std::size_t N = pred.shape()[0];
  const std::size_t plane = pred.value().size() / N;
  if (mask.size() != N * plane) throw ShapeError("masked_mse: mask size mismatch");
  std::vector<T> weight(N, T{0});
  double acc = 0;
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t count = 0;
    double s = 0;
    for (std::size_t k = 0; k < plane; ++k) {
      const std::size_t i = n * plane + k;
      if (!mask[i]) continue;
      const double d = static_cast<double>(pred.value()[i]) - target[i];
      s += d * d;
      ++count;
    }
    if (count == 0) throw DegenerateError("masked_mse: sample without valid pixels");
    acc += s / static_cast<double>(count);
    weight[n] = T(1) / static_cast<T>(count * N);
  }
  Tensor<T> out(Shape{1}, static_cast<T>(acc / static_cast<double>(N)));
  return make_op<T>(std::move(out), {pred},
                    [pred, target, mask, weight, plane](const Tensor<T>& g) mutable {
                      auto& buf = pred.grad_buffer();
                      for (std::size_t i = 0; i < buf.size(); ++i) {
                        if (!mask[i]) continue;
                        buf[i] += g[0] * T(2) * weight[i / plane] * (pred.value()[i] - target[i]);
                      }
                    });
}

/// (N,1,H,W) -> (N,4,H,W) forward differences in direction order; entries
/// whose neighbour falls outside the image are zero.
template <typename T>
Var<T> directional_gradients(const Var<T>& map) {
  require_rank(map.shape(), 4, "directional_gradients");
  if (map.shape()[1] != 1) throw ShapeError("directional_gradients: expected one channel");
  const std::size_t N = map.shape()[0], H = map.shape()[2], W = map.shape()[3];
  Tensor<T> out(Shape{N, 4, H, W});
  const auto& v = map.value();
  auto neighbour = [H, W](std::size_t i, std::size_t j, std::size_t k, std::size_t& ni,
                          std::size_t& nj) {
    const long ii = static_cast<long>(i) + kDirections[k][0];
    const long jj = static_cast<long>(j) + kDirections[k][1];
    if (ii < 0 || jj < 0 || ii >= static_cast<long>(H) || jj >= static_cast<long>(W)) return false;
    ni = static_cast<std::size_t>(ii);
    nj = static_cast<std::size_t>(jj);
    return true;
  };
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < 4; ++k)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
          std::size_t ni, nj;
          if (neighbour(i, j, k, ni, nj)) out.at(n, k, i, j) = v.at(n, 0, ni, nj) - v.at(n, 0, i, j);
        }
  return make_op<T>(std::move(out), {map}, [map, N, H, W, neighbour](const Tensor<T>& g) mutable {
    auto& buf = map.grad_buffer();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < 4; ++k)
        for (std::size_t i = 0; i < H; ++i)
          for (std::size_t j = 0; j < W; ++j) {
            std::size_t ni, nj;
            if (!neighbour(i, j, k, ni, nj)) continue;
            const T gk = g.at(n, k, i, j);
            buf.at(n, 0, ni, nj) += gk;
            buf.at(n, 0, i, j) -= gk;
          }
  });
}

/// Validity (N*4*H*W flags) of the gradient stack for a per-pixel mask
/// (N*H*W flags): both contributing pixels in bounds and valid.
inline std::vector<std::uint8_t> gradient_validity(const std::vector<std::uint8_t>& mask,
                                                   std::size_t N, std::size_t H, std::size_t W) {
  if (mask.size() != N * H * W) throw ShapeError("gradient_validity: mask size mismatch");
  std::vector<std::uint8_t> out(N * 4 * H * W, 0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < 4; ++k)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
          const long ii = static_cast<long>(i) + kDirections[k][0];
          const long jj = static_cast<long>(j) + kDirections[k][1];
          if (ii < 0 || jj < 0 || ii >= static_cast<long>(H) || jj >= static_cast<long>(W)) continue;
          const std::size_t a = (n * H + i) * W + j;
          const std::size_t b = (n * H + static_cast<std::size_t>(ii)) * W + static_cast<std::size_t>(jj);
          out[((n * 4 + k) * H + i) * W + j] = (mask[a] && mask[b]) ? 1 : 0;
        }
  return out;
}

/// Penalty of (gt - pred) stacks averaged over valid entries per sample,
/// then over samples. Samples with no valid entry contribute zero.
template <typename T>
Var<T> gradient_huber(const Var<T>& pred, const Tensor<T>& gt,
                      const std::vector<std::uint8_t>& validity, double delta,
                      HuberForm form = HuberForm::linear_inside) {
  if (!(delta > 0)) throw ConfigError("gradient_huber: delta must be > 0");
  require_same_shape(pred.shape(), gt.shape(), "gradient_huber");
  const std::size_t N = pred.shape()[0];
  const std::size_t per = pred.value().size() / N;
  if (validity.size() != N * per) throw ShapeError("gradient_huber: validity size mismatch");
  std::vector<T> weight(N, T{0});
  double acc = 0;
  std::size_t nonempty = 0;
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t count = 0;
    double s = 0;
    for (std::size_t k = 0; k < per; ++k) {
      const std::size_t e = n * per + k;
      if (!validity[e]) continue;
      s += huber_value(static_cast<double>(gt[e]) - pred.value()[e], delta, form);
      ++count;
    }
    if (count == 0) continue;
    ++nonempty;
    acc += s / static_cast<double>(count);
    weight[n] = T(1) / static_cast<T>(count * N);
  }
  if (nonempty == 0) throw DegenerateError("gradient_huber: no valid entries in batch");
  Tensor<T> out(Shape{1}, static_cast<T>(acc / static_cast<double>(N)));
  return make_op<T>(std::move(out), {pred},
                    [pred, gt, validity, weight, per, delta, form](const Tensor<T>& g) mutable {
                      auto& buf = pred.grad_buffer();
                      for (std::size_t e = 0; e < buf.size(); ++e) {
                        if (!validity[e]) continue;
                        const double x = static_cast<double>(gt[e]) - pred.value()[e];
                        // d/dpred of f(gt - pred) = -f'(x)
                        buf[e] -= g[0] * weight[e / per] * static_cast<T>(huber_slope(x, delta, form));
                      }
                    });
}

}  // namespace depthmaster::losses
