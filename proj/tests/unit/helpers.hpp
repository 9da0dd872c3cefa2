// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include <unistd.h>

#include "depthmaster.hpp"
#include "depthmaster/gradcheck.hpp"

namespace dm_test {

using namespace depthmaster;

template <typename T = double>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(u(rng));
  return t;
}

inline double rel_diff(double a, double b) {
  const double s = std::max({std::abs(a), std::abs(b), 1e-12});
  return std::abs(a - b) / s;
}

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("dm_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::filesystem::path path_;
};

inline void write_text_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p, std::ios::trunc) << text;
}

/// Sum of elementwise products with a fixed random tensor: a scalar probe
/// whose gradient is the probe tensor itself.
template <typename T>
Var<T> probe(const Var<T>& x, const Tensor<T>& w) {
  Var<T> prod = make_op<T>(
      [&] {
        Tensor<T> out(Shape{1});
        for (std::size_t i = 0; i < w.size(); ++i) out[0] += x.value()[i] * w[i];
        return out;
      }(),
      {x}, [x, w](const Tensor<T>& g) mutable {
        auto& gx = x.grad_buffer();
        for (std::size_t i = 0; i < w.size(); ++i) gx[i] += g[0] * w[i];
      });
  return prod;
}

}  // namespace dm_test
