// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <unsupported/Eigen/FFT>

#include <complex>
#include <cstddef>
#include <vector>

#include "depthmaster/autograd.hpp"

namespace depthmaster {

/// Row-major h x w complex grid.
template <typename T>
using ComplexGrid = std::vector<std::complex<T>>;

/// In-place 2-D DFT. Forward is unnormalized (X[k] = sum x[n] e^{-i..});
/// inverse carries the 1/(h*w) factor, so inverse(forward(x)) == x and
/// sum |X|^2 == h*w * sum |x|^2.
template <typename T>
void fft2(ComplexGrid<T>& grid, std::size_t h, std::size_t w, bool inverse) {
  Eigen::FFT<T> fft;
  fft.SetFlag(Eigen::FFT<T>::Unscaled);
  std::vector<std::complex<T>> in, out;

  // a length-1 transform is the identity (and kissfft faults on it)
  in.resize(w);
  for (std::size_t i = 0; i < h && w > 1; ++i) {
    std::copy_n(grid.begin() + static_cast<long>(i * w), w, in.begin());
    if (inverse) fft.inv(out, in); else fft.fwd(out, in);
    std::copy_n(out.begin(), w, grid.begin() + static_cast<long>(i * w));
  }
  in.resize(h);
  for (std::size_t j = 0; j < w && h > 1; ++j) {
    for (std::size_t i = 0; i < h; ++i) in[i] = grid[i * w + j];
    if (inverse) fft.inv(out, in); else fft.fwd(out, in);
    for (std::size_t i = 0; i < h; ++i) grid[i * w + j] = out[i];
  }
  if (inverse) {
    const T inv = T{1} / static_cast<T>(h * w);
    for (auto& v : grid) v *= inv;
  }
}

namespace detail {

/// Per (n, c) plane: real input -> complex spectrum split into planes.
template <typename T>
void forward_planes(const T* x, std::size_t n, std::size_t c, std::size_t h,
                    std::size_t w, T* re_im /* (n, 2c, h, w) */) {
  const std::size_t hw = h * w;
  ComplexGrid<T> grid(hw);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* src = x + (i * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) grid[k] = {src[k], T{0}};
      fft2(grid, h, w, false);
      T* re = re_im + (i * 2 * c + ch) * hw;
      T* im = re_im + (i * 2 * c + c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) {
        re[k] = grid[k].real();
        im[k] = grid[k].imag();
      }
    }
}

/// Per (n, c) plane: complex planes -> real part of the inverse transform.
template <typename T>
void inverse_planes_real(const T* re_im, std::size_t n, std::size_t c,
                         std::size_t h, std::size_t w, T* out) {
  const std::size_t hw = h * w;
  ComplexGrid<T> grid(hw);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* re = re_im + (i * 2 * c + ch) * hw;
      const T* im = re_im + (i * 2 * c + c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) grid[k] = {re[k], im[k]};
      fft2(grid, h, w, true);
      T* dst = out + (i * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) dst[k] = grid[k].real();
    }
}

}  // namespace detail

/// Real (N,C,h,w) -> stacked spectrum (N,2C,h,w): channels [0,C) hold the
/// real parts, [C,2C) the imaginary parts.
template <typename T>
Var<T> spectrum(const Var<T>& x) {
  require_rank(x.shape(), 4, "spectrum");
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2],
                    w = x.shape()[3];
  if (!x.value().all_finite()) {
    throw NumericalError("spectrum: non-finite input");
  }
  Tensor<T> out(Shape{n, 2 * c, h, w});
  detail::forward_planes(x.value().data(), n, c, h, w, out.data());
  return make_op<T>(std::move(out), {x},
                    [x, n, c, h, w](const Tensor<T>& g) mutable {
                      // Adjoint of the unnormalized DFT: Re(sum_k G e^{+i..})
                      const std::size_t hw = h * w;
                      Tensor<T> tmp(x.shape());
                      detail::inverse_planes_real(g.data(), n, c, h, w, tmp.data());
                      auto& gx = x.grad_buffer();
                      const T s = static_cast<T>(hw);
                      for (std::size_t k = 0; k < tmp.size(); ++k) gx[k] += s * tmp[k];
                    });
}

/// Stacked spectrum (N,2C,h,w) -> real part of its inverse transform (N,C,h,w).
template <typename T>
Var<T> inverse_spectrum_real(const Var<T>& s) {
  require_rank(s.shape(), 4, "inverse_spectrum_real");
  if (s.shape()[1] % 2 != 0) {
    throw ShapeError("inverse_spectrum_real: odd channel count");
  }
  const std::size_t n = s.shape()[0], c = s.shape()[1] / 2, h = s.shape()[2],
                    w = s.shape()[3];
  Tensor<T> out(Shape{n, c, h, w});
  detail::inverse_planes_real(s.value().data(), n, c, h, w, out.data());
  return make_op<T>(std::move(out), {s},
                    [s, n, c, h, w](const Tensor<T>& g) mutable {
                      const std::size_t hw = h * w;
                      Tensor<T> tmp(s.shape());
                      detail::forward_planes(g.data(), n, c, h, w, tmp.data());
                      auto& gs = s.grad_buffer();
                      const T inv = T{1} / static_cast<T>(hw);
                      for (std::size_t k = 0; k < tmp.size(); ++k) gs[k] += inv * tmp[k];
                    });
}

}  // namespace depthmaster
