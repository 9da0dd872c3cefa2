// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "depthmaster/raster.hpp"

namespace depthmaster::preprocess {

enum class TargetMode { depth, disparity, sqrt_disparity };

inline std::string to_string(TargetMode m) {
  switch (m) {
    case TargetMode::depth: return "depth";
    case TargetMode::disparity: return "disparity";
    case TargetMode::sqrt_disparity: return "sqrt_disparity";
  }
  return "?";
}

inline TargetMode parse_target_mode(const std::string& s) {
  if (s == "depth") return TargetMode::depth;
  if (s == "disparity") return TargetMode::disparity;
  if (s == "sqrt_disparity" || s == "sqrt_disp") return TargetMode::sqrt_disparity;
  throw ConfigError("unknown target mode '" + s + "'");
}

/// Affine normalization state: `lo` maps to -1 and `hi` to +1.
struct NormParams {
  double lo = 0.0;
  double hi = 1.0;
  double p_lo = 2.0;
  double p_hi = 98.0;
  TargetMode mode = TargetMode::sqrt_disparity;

  bool valid() const { return std::isfinite(lo) && std::isfinite(hi) && hi > lo; }
};

inline double forward_value(double d, TargetMode mode) {
  switch (mode) {
    case TargetMode::depth: return d;
    case TargetMode::disparity: return 1.0 / d;
    case TargetMode::sqrt_disparity: return 1.0 / std::sqrt(d);
  }
  return d;
}

inline double inverse_value(double t, TargetMode mode) {
  switch (mode) {
    case TargetMode::depth: return t;
    case TargetMode::disparity: return 1.0 / t;
    case TargetMode::sqrt_disparity: return 1.0 / (t * t);
  }
  return t;
}

/// depth -> D, 1/D or 1/sqrt(D) on valid pixels; invalid pixels are copied.
inline ScalarMap depth_to_target(const DepthMap& depth, const ValidityMask& mask,
                                 TargetMode mode) {
  if (!mask.same_size(depth.height(), depth.width())) {
    throw ShapeError("depth_to_target: mask/depth size mismatch");
  }
  ScalarMap out(depth.height(), depth.width());
  for (std::size_t k = 0; k < depth.pixels(); ++k) {
    const float d = depth[k];
    if (!mask[k]) {
      out[k] = d;
      continue;
    }
    if (!(d > 0.0f)) {
      throw DomainError("depth_to_target: non-positive depth " + std::to_string(d) +
                        " at valid pixel " + std::to_string(k));
    }
    out[k] = static_cast<float>(forward_value(d, mode));
  }
  return out;
}

/// Linear-interpolated percentile of an ascending-sorted sample
/// (position p/100 * (n-1)).
inline double percentile_sorted(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw DegenerateError("percentile of empty set");
  const double pos = std::clamp(p, 0.0, 100.0) / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto i0 = static_cast<std::size_t>(std::floor(pos));
  const std::size_t i1 = std::min(i0 + 1, sorted.size() - 1);
  const double f = pos - static_cast<double>(i0);
  return sorted[i0] + f * (sorted[i1] - sorted[i0]);
}

inline float apply_norm(double v, const NormParams& p) {
  const double n = 2.0 * (v - p.lo) / (p.hi - p.lo) - 1.0;
  return static_cast<float>(std::clamp(n, -1.0, 1.0));
}

struct Normalized {
  ScalarMap values;
  NormParams params;
};

/// Affine map sending the p_lo / p_hi percentiles of valid values to -1 / +1,
/// clamped to [-1, 1]. Non-finite invalid pixels become 0.
inline Normalized normalize_percentile(const ScalarMap& target, const ValidityMask& mask,
                                       double p_lo = 2.0, double p_hi = 98.0,
                                       TargetMode mode = TargetMode::sqrt_disparity) {
  if (!(p_lo < p_hi)) throw ConfigError("normalize_percentile: p_lo must be < p_hi");
  std::vector<double> valid;
  valid.reserve(target.pixels());
  for (std::size_t k = 0; k < target.pixels(); ++k) {
    if (mask[k]) valid.push_back(target[k]);
  }
  std::sort(valid.begin(), valid.end());
  if (valid.size() < 2 || valid.front() == valid.back()) {
    throw DegenerateError("normalize_percentile: fewer than 2 distinct valid values");
  }
  NormParams params{percentile_sorted(valid, p_lo), percentile_sorted(valid, p_hi), p_lo,
                    p_hi, mode};
  if (!(params.hi > params.lo)) {
    throw DegenerateError("normalize_percentile: degenerate range (hi == lo)");
  }
  Normalized out{ScalarMap(target.height(), target.width()), params};
  for (std::size_t k = 0; k < target.pixels(); ++k) {
    const float v = target[k];
    out.values[k] = (mask[k] || std::isfinite(v)) ? apply_norm(v, params) : 0.0f;
  }
  return out;
}

/// Exact affine inverse of the normalization for values that were not clamped.
inline ScalarMap denormalize(const ScalarMap& normalized, const NormParams& p) {
  if (!p.valid()) throw ConfigError("denormalize: invalid NormParams");
  ScalarMap out(normalized.height(), normalized.width());
  for (std::size_t k = 0; k < normalized.pixels(); ++k) {
    out[k] = static_cast<float>(p.lo + (static_cast<double>(normalized[k]) + 1.0) * 0.5 *
                                           (p.hi - p.lo));
  }
  return out;
}

/// Inverse of depth_to_target. Non-positive targets in inverse modes are a
/// domain error.
inline DepthMap target_to_depth(const ScalarMap& target, TargetMode mode) {
  DepthMap out(target.height(), target.width());
  for (std::size_t k = 0; k < target.pixels(); ++k) {
    const double t = target[k];
    if (mode != TargetMode::depth && !(t > 0.0)) {
      throw DomainError("target_to_depth: non-positive target " + std::to_string(t) +
                        " at pixel " + std::to_string(k));
    }
    out[k] = static_cast<float>(inverse_value(t, mode));
  }
  return out;
}

/// Same as target_to_depth but clears `mask` at pixels the inverse cannot
/// represent instead of throwing. Those pixels get depth 0.
inline DepthMap target_to_depth(const ScalarMap& target, TargetMode mode,
                                ValidityMask& mask) {
  DepthMap out(target.height(), target.width());
  for (std::size_t k = 0; k < target.pixels(); ++k) {
    const double t = target[k];
    if (mode != TargetMode::depth && !(t > 0.0)) {
      mask[k] = 0;
      out[k] = 0.0f;
      continue;
    }
    out[k] = static_cast<float>(inverse_value(t, mode));
  }
  return out;
}

/// Network output in normalized units -> depth. Values are clamped to the
/// normalized range first, so inverse modes never see non-positive targets.
inline DepthMap prediction_to_depth(const ScalarMap& normalized, const NormParams& p) {
  ScalarMap clamped = normalized;
  for (auto& v : clamped.data()) v = std::isfinite(v) ? std::clamp(v, -1.0f, 1.0f) : 0.0f;
  if (p.mode != TargetMode::depth && !(p.lo > 0)) {
    throw DomainError("prediction_to_depth: non-positive lower target bound");
  }
  return target_to_depth(denormalize(clamped, p), p.mode);
}

struct Histogram {
  double lo = -1.0;
  double hi = 1.0;
  std::vector<double> mass;

  double entropy() const {
    double h = 0;
    for (double m : mass) {
      if (m > 0) h -= m * std::log(m);
    }
    return h;
  }
};

/// Normalized histogram of per-sample normalized targets over valid pixels.
template <typename SampleRange>
Histogram target_histogram(const SampleRange& samples, TargetMode mode, std::size_t bins,
                           double p_lo = 2.0, double p_hi = 98.0) {
  if (bins == 0) throw ConfigError("target_histogram: zero bins");
  Histogram hist{-1.0, 1.0, std::vector<double>(bins, 0.0)};
  double total = 0;
  std::size_t n_samples = 0;
  for (const auto& s : samples) {
    ++n_samples;
    const ScalarMap target = depth_to_target(s.depth, s.mask, mode);
    ScalarMap values;
    const std::size_t valid = count_valid(s.mask);
    if (valid == 0) continue;
    try {
      values = normalize_percentile(target, s.mask, p_lo, p_hi, mode).values;
    } catch (const DegenerateError&) {
      // A single valid value (or a constant map) lands in the central bin.
      values = ScalarMap(target.height(), target.width(), 0.0f);
    }
    for (std::size_t k = 0; k < values.pixels(); ++k) {
      if (!s.mask[k]) continue;
      auto b = static_cast<std::size_t>((values[k] + 1.0) / 2.0 * static_cast<double>(bins));
      b = std::min(b, bins - 1);
      hist.mass[b] += 1.0;
      total += 1.0;
    }
  }
  if (n_samples == 0) throw ConfigError("target_histogram: empty dataset");
  if (total > 0) {
    for (double& m : hist.mass) m /= total;
  }
  return hist;
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_norm_params(const std::filesystem::path& path, const NormParams& p) {
  std::ofstream out(path, std::ios::trunc);
  out << "lo=" << format_double(p.lo) << '\n'
      << "hi=" << format_double(p.hi) << '\n'
      << "p_lo=" << format_double(p.p_lo) << '\n'
      << "p_hi=" << format_double(p.p_hi) << '\n'
      << "mode=" << to_string(p.mode) << '\n';
  if (!out) throw Error(path.string() + ": write failed");
}

inline NormParams read_norm_params(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string() + ": cannot open");
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  NormParams p;
  try {
    p.lo = std::stod(kv.at("lo"));
    p.hi = std::stod(kv.at("hi"));
    p.p_lo = std::stod(kv.at("p_lo"));
    p.p_hi = std::stod(kv.at("p_hi"));
    p.mode = parse_target_mode(kv.at("mode"));
  } catch (const std::exception&) {
    throw ParseError(path.string() + ": missing or malformed field");
  }
  return p;
}

}  // namespace depthmaster::preprocess
