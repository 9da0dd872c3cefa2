// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "depthmaster/ablation.hpp"
#include "depthmaster/preprocess.hpp"
#include "depthmaster/raster.hpp"

namespace depthmaster::plot {

// ---------------------------------------------------------------------------
// PNG preview
// ---------------------------------------------------------------------------

/// Piecewise-linear approximation of a perceptual blue-to-yellow colormap.
inline std::array<std::uint8_t, 3> colormap(double t) {
  static constexpr double stops[][3] = {{0.267, 0.005, 0.329}, {0.229, 0.322, 0.546},
                                        {0.128, 0.567, 0.551}, {0.369, 0.789, 0.383},
                                        {0.993, 0.906, 0.144}};
  if (!std::isfinite(t)) return {0, 0, 0};
  t = std::clamp(t, 0.0, 1.0) * 4.0;
  const int i = std::min(3, static_cast<int>(t));
  const double f = t - i;
  std::array<std::uint8_t, 3> out{};
  for (int c = 0; c < 3; ++c) {
    const double v = stops[i][c] * (1 - f) + stops[i + 1][c] * f;
    out[c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return out;
}

namespace png_detail {

inline void put32(std::string& s, std::uint32_t v) {
  for (int k = 3; k >= 0; --k) s.push_back(static_cast<char>((v >> (8 * k)) & 0xFF));
}

inline void chunk(std::string& out, const char* type, const std::string& data) {
  put32(out, static_cast<std::uint32_t>(data.size()));
  std::string body(type, 4);
  body += data;
  out += body;
  put32(out, static_cast<std::uint32_t>(
                 crc32(0, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
}

}  // namespace png_detail

/// 8-bit RGB PNG, rows top to bottom.
inline std::string encode_png(std::size_t width, std::size_t height,
                              const std::vector<std::uint8_t>& rgb) {
  if (rgb.size() != width * height * 3) throw ShapeError("encode_png: buffer size mismatch");
  std::string raw;
  raw.reserve(height * (width * 3 + 1));
  for (std::size_t i = 0; i < height; ++i) {
    raw.push_back('\0');
    raw.append(reinterpret_cast<const char*>(rgb.data() + i * width * 3), width * 3);
  }
  uLongf len = compressBound(static_cast<uLong>(raw.size()));
  std::string z(len, '\0');
  if (compress2(reinterpret_cast<Bytef*>(z.data()), &len,
                reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()),
                Z_BEST_COMPRESSION) != Z_OK) {
    throw Error("encode_png: compression failed");
  }
  z.resize(len);
  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  png_detail::put32(ihdr, static_cast<std::uint32_t>(width));
  png_detail::put32(ihdr, static_cast<std::uint32_t>(height));
  ihdr += std::string("\x08\x02\x00\x00\x00", 5);
  png_detail::chunk(out, "IHDR", ihdr);
  png_detail::chunk(out, "IDAT", z);
  png_detail::chunk(out, "IEND", "");
  return out;
}

/// Color-mapped inverse depth (near = bright); invalid pixels are black.
inline std::string depth_preview_png(const DepthMap& depth) {
  const std::size_t H = depth.height(), W = depth.width();
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const double d = depth(i, j);
      if (d > 0 && std::isfinite(d)) {
        lo = std::min(lo, 1.0 / d);
        hi = std::max(hi, 1.0 / d);
      }
    }
  std::vector<std::uint8_t> rgb(H * W * 3, 0);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const double d = depth(i, j);
      if (!(d > 0 && std::isfinite(d))) continue;
      const double t = hi > lo ? (1.0 / d - lo) / (hi - lo) : 0.5;
      const auto c = colormap(t);
      std::copy(c.begin(), c.end(), rgb.begin() + static_cast<std::ptrdiff_t>((i * W + j) * 3));
    }
  return encode_png(W, H, rgb);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw Error(path.string() + ": write failed");
}

// ---------------------------------------------------------------------------
// SVG figures
// ---------------------------------------------------------------------------

namespace svg_detail {

inline const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string header(int w, int h) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) +
         "\" height=\"" + std::to_string(h) + "\" viewBox=\"0 0 " + std::to_string(w) + " " +
         std::to_string(h) + "\" font-family=\"sans-serif\" font-size=\"12\">\n" +
         "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

inline std::string text(double x, double y, const std::string& s, const char* anchor = "start",
                        int size = 12) {
  return "<text x=\"" + num(x) + "\" y=\"" + num(y) + "\" text-anchor=\"" + anchor +
         "\" font-size=\"" + std::to_string(size) + "\">" + escape(s) + "</text>\n";
}

/// Axes frame with labelled ticks; returns markup.
inline std::string axes(double x0, double y0, double w, double h, double xlo, double xhi,
                        double ylo, double yhi, const std::string& xlabel,
                        const std::string& ylabel) {
  std::string s = "<rect x=\"" + num(x0) + "\" y=\"" + num(y0) + "\" width=\"" + num(w) +
                  "\" height=\"" + num(h) + "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double fx = x0 + w * k / 4.0, fy = y0 + h - h * k / 4.0;
    s += text(fx, y0 + h + 15, num(xlo + (xhi - xlo) * k / 4.0), "middle", 10);
    s += text(x0 - 5, fy + 4, num(ylo + (yhi - ylo) * k / 4.0), "end", 10);
  }
  s += text(x0 + w / 2, y0 + h + 32, xlabel, "middle");
  s += "<text transform=\"translate(" + num(x0 - 45) + "," + num(y0 + h / 2) +
       ") rotate(-90)\" text-anchor=\"middle\">" + escape(ylabel) + "</text>\n";
  return s;
}

}  // namespace svg_detail

struct Series {
  std::string label;
  std::vector<double> x, y;
};

inline std::string line_chart(const std::string& title, const std::vector<Series>& series,
                              const std::string& xlabel, const std::string& ylabel,
                              bool step_style = false) {
  using namespace svg_detail;
  if (series.empty()) throw ConfigError("line_chart: no series");
  double xlo = std::numeric_limits<double>::infinity(), xhi = -xlo, ylo = xlo, yhi = -xlo;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size() || s.x.empty()) throw ConfigError("line_chart: bad series " + s.label);
    for (double v : s.x) xlo = std::min(xlo, v), xhi = std::max(xhi, v);
    for (double v : s.y) ylo = std::min(ylo, v), yhi = std::max(yhi, v);
  }
  if (xhi <= xlo) xhi = xlo + 1;
  if (yhi <= ylo) yhi = ylo + 1;
  ylo = std::min(ylo, 0.0);
  const double X0 = 70, Y0 = 40, W = 520, H = 300;
  std::string s = header(680, 400) + text(X0 + W / 2, 22, title, "middle", 14) +
                  axes(X0, Y0, W, H, xlo, xhi, ylo, yhi, xlabel, ylabel);
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& se = series[k];
    const char* color = kPalette[k % 5];
    std::string pts;
    auto px = [&](double v) { return X0 + W * (v - xlo) / (xhi - xlo); };
    auto py = [&](double v) { return Y0 + H - H * (v - ylo) / (yhi - ylo); };
    for (std::size_t i = 0; i < se.x.size(); ++i) {
      if (step_style && i > 0) pts += num(px(se.x[i])) + "," + num(py(se.y[i - 1])) + " ";
      pts += num(px(se.x[i])) + "," + num(py(se.y[i])) + " ";
    }
    s += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
         "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
    s += "<rect x=\"" + num(X0 + W + 10) + "\" y=\"" + num(Y0 + 18 * k) +
         "\" width=\"12\" height=\"12\" fill=\"" + color + "\"/>\n";
    s += text(X0 + W + 26, Y0 + 18 * k + 10, se.label);
  }
  return s + "</svg>\n";
}

/// Overlaid normalized target distributions, one per preprocessing mode.
inline std::string histogram_chart(const std::vector<std::pair<std::string, preprocess::Histogram>>& h,
                                   const std::string& title) {
  std::vector<Series> series;
  for (const auto& [label, hist] : h) {
    Series s{label + " (H=" + svg_detail::num(hist.entropy()) + ")", {}, {}};
    const double width = (hist.hi - hist.lo) / static_cast<double>(hist.mass.size());
    for (std::size_t b = 0; b < hist.mass.size(); ++b) {
      s.x.push_back(hist.lo + width * (static_cast<double>(b) + 0.5));
      s.y.push_back(hist.mass[b]);
    }
    series.push_back(std::move(s));
  }
  return line_chart(title, series, "normalized target", "fraction of pixels", true);
}

/// Training losses from a run.log CSV.
inline std::vector<Series> read_loss_curves(const std::filesystem::path& run_log) {
  std::ifstream in(run_log);
  if (!in) throw ConfigError(run_log.string() + ": cannot open");
  std::string line;
  if (!std::getline(in, line) || line != training::kRunLogHeader) {
    throw ParseError(run_log.string() + ": not a run.log file");
  }
  const char* names[] = {"loss_total", "loss_latent", "loss_fa", "loss_pixel", "loss_h"};
  std::vector<Series> all(5);
  for (int k = 0; k < 5; ++k) all[k].label = names[k];
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string field;
    std::vector<double> v;
    while (std::getline(row, field, ',')) v.push_back(std::stod(field));
    if (v.size() != 6) throw ParseError(run_log.string() + ": malformed row '" + line + "'");
    for (int k = 0; k < 5; ++k) {
      all[k].x.push_back(v[0]);
      all[k].y.push_back(v[k + 1]);
    }
  }
  std::vector<Series> out;
  for (auto& s : all) {
    const bool active = std::any_of(s.y.begin(), s.y.end(), [](double y) { return y != 0.0; });
    if (!s.x.empty() && active) out.push_back(std::move(s));
  }
  if (out.empty()) throw DegenerateError(run_log.string() + ": no loss rows");
  return out;
}

inline std::string loss_curve_chart(const std::filesystem::path& run_log) {
  return line_chart("training loss", read_loss_curves(run_log), "step", "loss");
}

/// An ablation table rendered as an SVG grid.
inline std::string table_chart(const training::AblationTable& t) {
  using namespace svg_detail;
  if (t.rows.empty()) throw DegenerateError("ablation table '" + t.suite + "' has no rows");
  std::vector<double> widths;
  for (std::size_t c = 0; c < t.columns.size(); ++c) {
    std::size_t n = t.columns[c].size();
    for (const auto& r : t.rows) n = std::max(n, c < r.size() ? r[c].size() : 0);
    widths.push_back(16.0 + 7.5 * static_cast<double>(n));
  }
  double total = 20;
  for (double w : widths) total += w;
  const double row_h = 24;
  const int H = static_cast<int>(60 + row_h * static_cast<double>(t.rows.size() + 1));
  std::string s = header(static_cast<int>(total), H) +
                  text(10, 22, "ablation: " + t.suite, "start", 14);
  auto draw_row = [&](const std::vector<std::string>& cells, double y, bool bold) {
    double x = 10;
    for (std::size_t c = 0; c < widths.size(); ++c) {
      const std::string v = c < cells.size() ? cells[c] : "";
      s += "<text x=\"" + num(x + 8) + "\" y=\"" + num(y + 16) + "\"" +
           (bold ? " font-weight=\"bold\"" : "") + ">" + escape(v) + "</text>\n";
      x += widths[c];
    }
    s += "<line x1=\"10\" x2=\"" + num(total - 10) + "\" y1=\"" + num(y + row_h) + "\" y2=\"" +
         num(y + row_h) + "\" stroke=\"#888\"/>\n";
  };
  draw_row(t.columns, 36, true);
  for (std::size_t r = 0; r < t.rows.size(); ++r) draw_row(t.rows[r], 36 + row_h * (r + 1), false);
  return s + "</svg>\n";
}

}  // namespace depthmaster::plot
