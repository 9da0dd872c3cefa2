// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "depthmaster/autograd.hpp"
#include "depthmaster/nn.hpp"
#include "depthmaster/random.hpp"

namespace depthmaster {

struct GradCheckEntry {
  std::string parameter;
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

struct GradCheckResult {
  std::vector<GradCheckEntry> entries;
  std::size_t passed = 0;

  double pass_fraction() const {
    return entries.empty() ? 0.0 : static_cast<double>(passed) / static_cast<double>(entries.size());
  }
  double worst() const {
    double w = 0;
    for (const auto& e : entries) w = std::max(w, e.rel_error);
    return w;
  }
};

struct GradCheckConfig {
  double step = 1e-5;
  double tolerance = 1e-3;
  /// Entries where both gradients are below this are compared absolutely.
  double abs_floor = 1e-7;
  std::size_t samples_per_parameter = 8;
  std::uint64_t seed = 1;
};

/// Central finite differences on sampled entries of every parameter
/// against the reverse-mode gradient of `loss()`.
inline GradCheckResult gradient_check(const NamedParameters<double>& params,
                                      const std::function<Var<double>()>& loss,
                                      const GradCheckConfig& cfg = {}) {
  for (const auto& [name, v] : params) {
    auto p = v;
    p.zero_grad();
  }
  backward(loss());
  std::vector<Tensor<double>> analytic;
  for (const auto& [name, v] : params) {
    analytic.push_back(v.has_grad() ? v.grad() : Tensor<double>(v.shape()));
  }
  Rng rng(cfg.seed);
  GradCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto var = params[p].second;
    const std::size_t n = var.value().size();
    std::vector<std::size_t> picks(n);
    for (std::size_t i = 0; i < n; ++i) picks[i] = i;
    std::shuffle(picks.begin(), picks.end(), rng);
    picks.resize(std::min(n, cfg.samples_per_parameter));
    for (std::size_t idx : picks) {
      double& x = var.value()[idx];
      const double saved = x;
      x = saved + cfg.step;
      const double up = loss().value()[0];
      x = saved - cfg.step;
      const double down = loss().value()[0];
      x = saved;
      const double numeric = (up - down) / (2 * cfg.step);
      const double a = analytic[p][idx];
      const double scale = std::max(std::abs(a), std::abs(numeric));
      const double err = scale < cfg.abs_floor ? 0.0 : std::abs(a - numeric) / scale;
      result.entries.push_back({params[p].first, idx, a, numeric, err});
      if (err <= cfg.tolerance) ++result.passed;
    }
  }
  for (const auto& [name, v] : params) {
    auto q = v;
    q.zero_grad();
  }
  return result;
}

}  // namespace depthmaster
