// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "depthmaster/raster.hpp"

namespace depthmaster::metrics {

inline constexpr double kAlignedDepthFloor = 1e-3;
inline constexpr double kDelta1Threshold = 1.25;

enum class AlignmentMode { depth, disparity };

inline std::string to_string(AlignmentMode m) {
  return m == AlignmentMode::depth ? "depth" : "disparity";
}

inline AlignmentMode parse_alignment_mode(const std::string& s) {
  if (s == "depth") return AlignmentMode::depth;
  if (s == "disparity") return AlignmentMode::disparity;
  throw ConfigError("unknown alignment mode '" + s + "'");
}

struct Alignment {
  double scale = 1.0;
  double shift = 0.0;
  DepthMap aligned;
};

inline void check_sizes(const DepthMap& a, const DepthMap& b, const ValidityMask& m,
                        const char* what) {
  if (!b.same_size(a.height(), a.width()) || !m.same_size(a.height(), a.width())) {
    throw ShapeError(std::string(what) + ": raster size mismatch");
  }
}

/// Closed-form least squares for (s, t) minimizing sum (s*x + t - y)^2 over
/// the mask.
inline std::pair<double, double> fit_scale_shift(const std::vector<double>& x,
                                                 const std::vector<double>& y) {
  if (x.size() < 2) throw DegenerateError("affine_align: fewer than 2 valid pixels");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    mx += x[k];
    my += y[k];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    sxx += (x[k] - mx) * (x[k] - mx);
    sxy += (x[k] - mx) * (y[k] - my);
  }
  if (!(sxx > 1e-12 * std::max(1.0, mx * mx) * n)) {
    throw DegenerateError("affine_align: prediction has zero variance over valid pixels");
  }
  const double s = sxy / sxx;
  return {s, my - s * mx};
}

/// Scale/shift alignment of `pred` to `gt` over valid pixels. In disparity
/// mode the fit runs on reciprocals and the result is mapped back to depth.
/// Aligned values are floored at 1e-3 m so ratios stay defined.
inline Alignment affine_align(const DepthMap& pred, const DepthMap& gt, const ValidityMask& mask,
                              AlignmentMode mode = AlignmentMode::depth) {
  check_sizes(pred, gt, mask, "affine_align");
  std::vector<double> x, y;
  for (std::size_t k = 0; k < pred.pixels(); ++k) {
    if (!mask[k]) continue;
    if (mode == AlignmentMode::depth) {
      x.push_back(pred[k]);
      y.push_back(gt[k]);
    } else if (pred[k] > 0 && gt[k] > 0) {
      x.push_back(1.0 / pred[k]);
      y.push_back(1.0 / gt[k]);
    }
  }
  const auto [s, t] = fit_scale_shift(x, y);
  Alignment a{s, t, DepthMap(pred.height(), pred.width())};
  for (std::size_t k = 0; k < pred.pixels(); ++k) {
    double v;
    if (mode == AlignmentMode::depth) {
      v = s * pred[k] + t;
    } else {
      const double disp = pred[k] > 0 ? s / pred[k] + t : 0.0;
      v = disp > 0 ? 1.0 / disp : kAlignedDepthFloor;
    }
    a.aligned[k] = static_cast<float>(std::max(v, kAlignedDepthFloor));
  }
  return a;
}

/// Mean of |gt - aligned| / gt over valid pixels, in percent.
inline double abs_rel(const DepthMap& aligned, const DepthMap& gt, const ValidityMask& mask) {
  check_sizes(aligned, gt, mask, "abs_rel");
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < gt.pixels(); ++k) {
    if (!mask[k]) continue;
    if (!(gt[k] > 0)) throw DomainError("abs_rel: non-positive ground truth at valid pixel");
    sum += std::abs(static_cast<double>(gt[k]) - aligned[k]) / gt[k];
    ++n;
  }
  if (n == 0) throw DegenerateError("abs_rel: empty mask");
  return 100.0 * sum / static_cast<double>(n);
}

/// Percentage of valid pixels with max(aligned/gt, gt/aligned) < 1.25.
/// Non-positive aligned values count as failures.
inline double delta1(const DepthMap& aligned, const DepthMap& gt, const ValidityMask& mask) {
  check_sizes(aligned, gt, mask, "delta1");
  std::size_t hit = 0, n = 0;
  for (std::size_t k = 0; k < gt.pixels(); ++k) {
    if (!mask[k]) continue;
    if (!(gt[k] > 0)) throw DomainError("delta1: non-positive ground truth at valid pixel");
    ++n;
    const double a = aligned[k], g = gt[k];
    if (!(a > 0)) continue;
    if (std::max(a / g, g / a) < kDelta1Threshold) ++hit;
  }
  if (n == 0) throw DegenerateError("delta1: empty mask");
  return 100.0 * static_cast<double>(hit) / static_cast<double>(n);
}

struct EdgeF1Config {
  std::vector<double> thresholds{0.05, 0.1, 0.15, 0.2, 0.25};
  int radius = 1;
};

/// Boolean edge map of min-max normalized inverse depth at one threshold.
inline std::vector<std::uint8_t> edge_map(const DepthMap& depth, const ValidityMask& mask,
                                          double threshold) {
  const std::size_t H = depth.height(), W = depth.width();
  std::vector<double> inv(depth.pixels(), 0.0);
  std::vector<std::uint8_t> ok(depth.pixels(), 0);
  double lo = INFINITY, hi = -INFINITY;
  for (std::size_t k = 0; k < depth.pixels(); ++k) {
    if (!std::isfinite(depth[k])) throw NumericalError("edge_f1: non-finite depth");
    if (!mask[k] || !(depth[k] > 0)) continue;
    ok[k] = 1;
    inv[k] = 1.0 / depth[k];
    lo = std::min(lo, inv[k]);
    hi = std::max(hi, inv[k]);
  }
  const double range = hi > lo ? hi - lo : 0.0;
  for (std::size_t k = 0; k < inv.size(); ++k) {
    inv[k] = (ok[k] && range > 0) ? (inv[k] - lo) / range : 0.0;
  }
  std::vector<std::uint8_t> edges(depth.pixels(), 0);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const std::size_t k = i * W + j;
      if (!ok[k]) continue;
      double gx = 0, gy = 0;
      if (j + 1 < W && ok[k + 1]) gx = inv[k + 1] - inv[k];
      if (i + 1 < H && ok[k + W]) gy = inv[k + W] - inv[k];
      edges[k] = std::sqrt(gx * gx + gy * gy) > threshold ? 1 : 0;
    }
  return edges;
}

/// Fraction of `from` edges with a `to` edge within Chebyshev distance r.
inline std::pair<std::size_t, std::size_t> matched_edges(const std::vector<std::uint8_t>& from,
                                                         const std::vector<std::uint8_t>& to,
                                                         std::size_t H, std::size_t W, int r) {
  std::size_t total = 0, matched = 0;
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      if (!from[i * W + j]) continue;
      ++total;
      bool found = false;
      for (int di = -r; di <= r && !found; ++di)
        for (int dj = -r; dj <= r && !found; ++dj) {
          const long ii = static_cast<long>(i) + di, jj = static_cast<long>(j) + dj;
          if (ii < 0 || jj < 0 || ii >= static_cast<long>(H) || jj >= static_cast<long>(W)) continue;
          found = to[static_cast<std::size_t>(ii) * W + static_cast<std::size_t>(jj)] != 0;
        }
      matched += found ? 1 : 0;
    }
  return {matched, total};
}

/// Boundary F1 averaged over a threshold sweep. Both maps empty at a
/// threshold scores 1 for that threshold; exactly one empty scores 0.
inline double edge_f1(const DepthMap& pred, const DepthMap& gt, const ValidityMask& mask,
                      const EdgeF1Config& cfg = {}) {
  check_sizes(pred, gt, mask, "edge_f1");
  if (cfg.thresholds.empty()) throw ConfigError("edge_f1: no thresholds");
  const std::size_t H = gt.height(), W = gt.width();
  double acc = 0;
  for (double thr : cfg.thresholds) {
    const auto pe = edge_map(pred, mask, thr);
    const auto ge = edge_map(gt, mask, thr);
    const auto [pm, pt] = matched_edges(pe, ge, H, W, cfg.radius);
    const auto [gm, gt_total] = matched_edges(ge, pe, H, W, cfg.radius);
    double f1;
    if (pt == 0 && gt_total == 0) {
      f1 = 1.0;
    } else if (pt == 0 || gt_total == 0) {
      f1 = 0.0;
    } else {
      const double p = static_cast<double>(pm) / static_cast<double>(pt);
      const double r = static_cast<double>(gm) / static_cast<double>(gt_total);
      f1 = (p + r) > 0 ? 2 * p * r / (p + r) : 0.0;
    }
    acc += f1;
  }
  return acc / static_cast<double>(cfg.thresholds.size());
}

inline double edge_f1(const DepthMap& pred, const DepthMap& gt, const EdgeF1Config& cfg = {}) {
  return edge_f1(pred, gt, full_mask(gt.height(), gt.width()), cfg);
}

struct SampleMetrics {
  std::string id;
  double abs_rel = 0;
  double delta1 = 0;
  double edge_f1 = 0;
  double scale = 1;
  double shift = 0;
};

struct EvalConfig {
  AlignmentMode alignment = AlignmentMode::depth;
  EdgeF1Config edges;
};

/// Align then score one prediction. Throws DegenerateError for a constant
/// prediction; callers that aggregate exclude and note such samples.
inline SampleMetrics evaluate_sample(const DepthMap& pred, const DepthMap& gt,
                                     const ValidityMask& mask, const EvalConfig& cfg = {},
                                     std::string id = {}) {
  const Alignment a = affine_align(pred, gt, mask, cfg.alignment);
  SampleMetrics m;
  m.id = std::move(id);
  m.abs_rel = abs_rel(a.aligned, gt, mask);
  m.delta1 = delta1(a.aligned, gt, mask);
  m.edge_f1 = edge_f1(a.aligned, gt, mask, cfg.edges);
  m.scale = a.scale;
  m.shift = a.shift;
  return m;
}

struct MetricsReport {
  std::string dataset;
  std::size_t n_samples = 0;
  double abs_rel = 0;
  double delta1 = 0;
  double edge_f1 = 0;
  std::string config_hash;
  AlignmentMode alignment_mode = AlignmentMode::depth;
  EdgeF1Config edges;
  std::vector<SampleMetrics> samples;
  std::vector<std::string> notes;
};

/// Per-sample metrics averaged over samples (order independent).
inline MetricsReport aggregate(std::string dataset, const std::vector<SampleMetrics>& samples,
                               const EvalConfig& cfg, std::string config_hash = {}) {
  MetricsReport r;
  r.dataset = std::move(dataset);
  r.n_samples = samples.size();
  r.alignment_mode = cfg.alignment;
  r.edges = cfg.edges;
  r.config_hash = std::move(config_hash);
  r.samples = samples;
  for (const auto& s : samples) {
    r.abs_rel += s.abs_rel;
    r.delta1 += s.delta1;
    r.edge_f1 += s.edge_f1;
  }
  if (!samples.empty()) {
    const auto n = static_cast<double>(samples.size());
    r.abs_rel /= n;
    r.delta1 /= n;
    r.edge_f1 /= n;
  }
  return r;
}

inline nlohmann::json to_json(const MetricsReport& r, bool per_sample = true) {
  nlohmann::json j;
  j["dataset"] = r.dataset;
  j["n_samples"] = r.n_samples;
  j["abs_rel"] = r.abs_rel;
  j["delta1"] = r.delta1;
  j["edge_f1"] = r.edge_f1;
  j["config_hash"] = r.config_hash;
  j["alignment_mode"] = to_string(r.alignment_mode);
  j["edge_f1_config"] = {{"thresholds", r.edges.thresholds}, {"radius", r.edges.radius}};
  j["notes"] = r.notes;
  if (per_sample) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& s : r.samples) {
      arr.push_back({{"id", s.id},
                     {"abs_rel", s.abs_rel},
                     {"delta1", s.delta1},
                     {"edge_f1", s.edge_f1},
                     {"scale", s.scale},
                     {"shift", s.shift}});
    }
    j["samples"] = arr;
  }
  return j;
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.dataset = j.at("dataset").get<std::string>();
  r.n_samples = j.at("n_samples").get<std::size_t>();
  r.abs_rel = j.at("abs_rel").get<double>();
  r.delta1 = j.at("delta1").get<double>();
  r.edge_f1 = j.at("edge_f1").get<double>();
  r.config_hash = j.value("config_hash", "");
  r.alignment_mode = parse_alignment_mode(j.value("alignment_mode", "depth"));
  if (j.contains("samples")) {
    for (const auto& s : j["samples"]) {
      r.samples.push_back({s.value("id", ""), s.at("abs_rel").get<double>(),
                           s.at("delta1").get<double>(), s.at("edge_f1").get<double>(),
                           s.value("scale", 1.0), s.value("shift", 0.0)});
    }
  }
  return r;
}

}  // namespace depthmaster::metrics
