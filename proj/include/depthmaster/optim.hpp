// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "depthmaster/nn.hpp"

namespace depthmaster {

struct AdamWConfig {
  double lr = 3e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay. Moments are kept per named parameter
/// in the order given at construction.
template <typename T>
class AdamW {
 public:
  AdamW() = default;
  AdamW(NamedParameters<T> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    if (!(cfg_.lr > 0)) throw ConfigError("AdamW: lr must be > 0");
    for (const auto& p : params_) {
      m_.emplace_back(p.second.shape());
      v_.emplace_back(p.second.shape());
    }
  }

  /// Apply one update from the accumulated gradients, then clear them.
  /// Parameters without a gradient buffer are treated as zero-gradient.
  void step() {
    ++t_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& var = params_[i].second;
      if (!var.requires_grad()) continue;
      auto& w = var.value();
      const bool has = var.has_grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double g = has ? static_cast<double>(var.grad()[k]) : 0.0;
        const double mk = b1 * m[k] + (1.0 - b1) * g;
        const double vk = b2 * v[k] + (1.0 - b2) * g * g;
        m[k] = static_cast<T>(mk);
        v[k] = static_cast<T>(vk);
        double wk = static_cast<double>(w[k]);
        wk -= cfg_.lr * cfg_.weight_decay * wk;
        wk -= cfg_.lr * (mk / c1) / (std::sqrt(vk / c2) + cfg_.eps);
        w[k] = static_cast<T>(wk);
      }
      var.zero_grad();
    }
  }

  void zero_grad() { zero_grads(params_); }

  std::uint64_t steps() const { return t_; }
  void set_steps(std::uint64_t t) { t_ = t; }
  const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  const NamedParameters<T>& parameters() const { return params_; }

  /// Moment tensors named "m.<param>" and "v.<param>".
  NamedParameters<T> state() const {
    NamedParameters<T> out;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      out.emplace_back("m." + params_[i].first, Var<T>::constant(m_[i]));
      out.emplace_back("v." + params_[i].first, Var<T>::constant(v_[i]));
    }
    return out;
  }

  void load_state(const NamedParameters<T>& state, std::uint64_t steps) {
    NamedParameters<T> dst = this->state();
    copy_parameters(state, dst);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i] = dst[2 * i].second.value();
      v_[i] = dst[2 * i + 1].second.value();
    }
    t_ = steps;
  }

 private:
  NamedParameters<T> params_;
  AdamWConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace depthmaster
