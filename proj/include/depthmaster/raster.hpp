// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "depthmaster/error.hpp"

namespace depthmaster {

/// Interleaved H x W x C raster. `Tag` keeps RGB, depth and mask distinct
/// types even when their storage matches.
template <typename T, std::size_t C, typename Tag>
class Raster {
 public:
  using value_type = T;
  static constexpr std::size_t channels = C;

  Raster() = default;
  Raster(std::size_t height, std::size_t width, T fill = T{})
      : height_(height), width_(width), data_(height * width * C, fill) {}
  Raster(std::size_t height, std::size_t width, std::vector<T> data)
      : height_(height), width_(width), data_(std::move(data)) {
    if (data_.size() != height * width * C) {
      throw ShapeError("raster payload size mismatch");
    }
  }

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t pixels() const noexcept { return height_ * width_; }
  bool same_size(std::size_t h, std::size_t w) const noexcept {
    return h == height_ && w == width_;
  }

  T& operator()(std::size_t i, std::size_t j, std::size_t c = 0) noexcept {
    return data_[(i * width_ + j) * C + c];
  }
  const T& operator()(std::size_t i, std::size_t j,
                      std::size_t c = 0) const noexcept {
    return data_[(i * width_ + j) * C + c];
  }
  T& operator[](std::size_t k) noexcept { return data_[k]; }
  const T& operator[](std::size_t k) const noexcept { return data_[k]; }

  std::vector<T>& data() noexcept { return data_; }
  const std::vector<T>& data() const noexcept { return data_; }

  friend bool operator==(const Raster& a, const Raster& b) {
    return a.height_ == b.height_ && a.width_ == b.width_ && a.data_ == b.data_;
  }

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<T> data_;
};

struct RgbTag;
struct DepthTag;
struct MaskTag;
struct ScalarTag;

/// Linear RGB in [0, 1].
using RgbImage = Raster<float, 3, RgbTag>;
/// Metric planar depth in meters.
using DepthMap = Raster<float, 1, DepthTag>;
/// 1 where the pixel carries ground truth.
using ValidityMask = Raster<std::uint8_t, 1, MaskTag>;
/// Generic single-channel float raster (targets, normalized maps).
using ScalarMap = Raster<float, 1, ScalarTag>;

inline std::size_t count_valid(const ValidityMask& mask) {
  std::size_t n = 0;
  for (auto v : mask.data()) n += v ? 1 : 0;
  return n;
}

inline ValidityMask full_mask(std::size_t h, std::size_t w) {
  return ValidityMask(h, w, std::uint8_t{1});
}

/// Bilinear resampling with half-pixel centers (float rasters only).
template <typename T, std::size_t C, typename Tag>
Raster<T, C, Tag> resize_bilinear(const Raster<T, C, Tag>& in, std::size_t h, std::size_t w) {
  if (in.height() == 0 || in.width() == 0 || h == 0 || w == 0) {
    throw ShapeError("resize_bilinear: empty raster");
  }
  Raster<T, C, Tag> out(h, w);
  const double sy = static_cast<double>(in.height()) / static_cast<double>(h);
  const double sx = static_cast<double>(in.width()) / static_cast<double>(w);
  auto coord = [](double p, std::size_t n, std::size_t& i0, std::size_t& i1, double& f) {
    p = p < 0 ? 0 : p;
    i0 = std::min(static_cast<std::size_t>(p), n - 1);
    i1 = std::min(i0 + 1, n - 1);
    f = p - static_cast<double>(i0);
  };
  for (std::size_t i = 0; i < h; ++i) {
    std::size_t y0, y1;
    double fy;
    coord((static_cast<double>(i) + 0.5) * sy - 0.5, in.height(), y0, y1, fy);
    for (std::size_t j = 0; j < w; ++j) {
      std::size_t x0, x1;
      double fx;
      coord((static_cast<double>(j) + 0.5) * sx - 0.5, in.width(), x0, x1, fx);
      for (std::size_t c = 0; c < C; ++c) {
        const double top = in(y0, x0, c) * (1 - fx) + in(y0, x1, c) * fx;
        const double bot = in(y1, x0, c) * (1 - fx) + in(y1, x1, c) * fx;
        out(i, j, c) = static_cast<T>(top * (1 - fy) + bot * fy);
      }
    }
  }
  return out;
}

}  // namespace depthmaster
