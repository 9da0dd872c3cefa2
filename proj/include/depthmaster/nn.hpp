// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "depthmaster/ops.hpp"
#include "depthmaster/random.hpp"

namespace depthmaster {


template <typename T>
using NamedParameters = std::vector<std::pair<std::string, Var<T>>>;

/// 64-bit FNV-1a, used for frozen-weight and config fingerprints.
class Fnv1a {
 public:
  void update(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ULL;
    }
  }
  void update(const std::string& s) { update(s.data(), s.size()); }
  std::uint64_t digest() const { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

template <typename T>
std::uint64_t parameter_hash(const NamedParameters<T>& params) {
  Fnv1a h;
  for (const auto& [name, v] : params) {
    h.update(name);
    for (T x : v.value().values()) {
      const auto f = static_cast<float>(x);
      h.update(&f, sizeof f);
    }
  }
  return h.digest();
}

template <typename T>
std::size_t parameter_count(const NamedParameters<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.second.value().size();
  return n;
}

template <typename T>
void zero_grads(NamedParameters<T>& params) {
  for (auto& p : params) p.second.zero_grad();
}

template <typename T>
void set_trainable(NamedParameters<T>& params, bool on) {
  for (auto& p : params) {
    p.second.set_requires_grad(on);
    if (!on) p.second.zero_grad();
  }
}

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
struct Conv2d {
  Var<T> weight;
  Var<T> bias;
  std::size_t stride = 1;
  std::size_t pad = 0;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t k, std::size_t stride_,
         std::size_t pad_, Rng& rng, double gain = 1.0)
      : weight(Var<T>::parameter(normal_tensor<T>(
            {out, in, k, k}, gain / std::sqrt(static_cast<double>(in * k * k)),
            rng))),
        bias(Var<T>::parameter(Tensor<T>({out}))),
        stride(stride_),
        pad(pad_) {}

  std::size_t in_channels() const { return weight.shape()[1]; }
  std::size_t out_channels() const { return weight.shape()[0]; }

  Var<T> operator()(const Var<T>& x) const {
    return conv2d(x, weight, bias, stride, pad);
  }
  void collect(NamedParameters<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

template <typename T>
struct GroupNorm {
  Var<T> gamma;
  Var<T> beta;
  std::size_t groups = 1;

  GroupNorm() = default;
  GroupNorm(std::size_t channels, std::size_t groups_)
      : gamma(Var<T>::parameter(Tensor<T>({channels}, T{1}))),
        beta(Var<T>::parameter(Tensor<T>({channels}))),
        groups(groups_) {
    if (groups == 0 || channels % groups != 0) {
      throw ConfigError("GroupNorm: " + std::to_string(channels) +
                        " channels not divisible by " + std::to_string(groups));
    }
  }

  Var<T> operator()(const Var<T>& x) const {
    return group_norm(x, gamma, beta, groups);
  }
  void collect(NamedParameters<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
};

template <typename T>
struct Linear {
  Var<T> weight;
  Var<T> bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, double gain = 1.0)
      : weight(Var<T>::parameter(normal_tensor<T>(
            {out, in}, gain / std::sqrt(static_cast<double>(in)), rng))),
        bias(Var<T>::parameter(Tensor<T>({out}))) {}

  Var<T> operator()(const Var<T>& x) const { return linear(x, weight, bias); }
  void collect(NamedParameters<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

/// Largest group count <= `preferred` that divides `channels`.
inline std::size_t fit_groups(std::size_t channels, std::size_t preferred) {
  std::size_t g = std::min(channels, preferred);
  while (g > 1 && channels % g != 0) --g;
  return std::max<std::size_t>(g, 1);
}

/// Copy parameter values by name; every destination name must exist in src.
template <typename T, typename U>
void copy_parameters(const NamedParameters<U>& src, NamedParameters<T>& dst) {
  for (auto& [name, v] : dst) {
    auto it = std::find_if(src.begin(), src.end(),
                           [&](const auto& p) { return p.first == name; });
    if (it == src.end()) throw IntegrityError("missing parameter '" + name + "'");
    require_same_shape(it->second.shape(), v.shape(), "copy_parameters " + name);
    v.value() = it->second.value().template cast<T>();
  }
}

}  // namespace depthmaster
