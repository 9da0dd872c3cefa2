// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "depthmaster/error.hpp"

namespace depthmaster {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

/// Dense row-major tensor. Rank-4 tensors use NCHW order throughout.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != element_count(shape_)) {
      throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h,
              std::size_t w) const noexcept {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape shape) const& {
    if (element_count(shape) != size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " +
                       to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }
  Tensor reshaped(Shape shape) && {
    if (element_count(shape) != size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " +
                       to_string(shape));
    }
    return Tensor(std::move(shape), std::move(data_));
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

inline void require_same_shape(const Shape& a, const Shape& b,
                               const std::string& what) {
  if (a != b) {
    throw ShapeError(what + ": shape mismatch " + to_string(a) + " vs " +
                     to_string(b));
  }
}

inline void require_rank(const Shape& s, std::size_t rank,
                         const std::string& what) {
  if (s.size() != rank) {
    throw ShapeError(what + ": expected rank " + std::to_string(rank) +
                     ", got " + to_string(s));
  }
}

/// Slice samples [begin, end) along the leading axis.
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& t, std::size_t begin, std::size_t end) {
  Shape s = t.shape();
  const std::size_t stride = t.size() / s[0];
  s[0] = end - begin;
  std::vector<T> out(t.data() + begin * stride, t.data() + end * stride);
  return Tensor<T>(std::move(s), std::move(out));
}

/// Stack equally-shaped tensors along a new (or existing leading) batch axis.
/// Inputs of shape (1, ...) are concatenated; other shapes get a new axis.
template <typename T>
Tensor<T> stack_batch(const std::vector<Tensor<T>>& items) {
  if (items.empty()) throw ShapeError("stack_batch: no items");
  Shape s = items.front().shape();
  const bool leading_one = !s.empty() && s[0] == 1;
  std::vector<T> out;
  out.reserve(items.front().size() * items.size());
  for (const auto& it : items) {
    require_same_shape(it.shape(), items.front().shape(), "stack_batch");
    out.insert(out.end(), it.values().begin(), it.values().end());
  }
  if (leading_one) {
    s[0] = items.size();
  } else {
    s.insert(s.begin(), items.size());
  }
  return Tensor<T>(std::move(s), std::move(out));
}

}  // namespace depthmaster
