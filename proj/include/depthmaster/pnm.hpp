// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "depthmaster/raster.hpp"

namespace depthmaster::pnm {

namespace fs = std::filesystem;

inline std::vector<char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path.string() + ": cannot open");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const fs::path& path, const std::string& header,
                       const void* payload, std::size_t bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(path.string() + ": cannot open for writing");
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(static_cast<const char*>(payload), static_cast<std::streamsize>(bytes));
  if (!out) throw Error(path.string() + ": write failed");
}

/// Whitespace-separated header tokens with '#' comments, as used by the
/// Netpbm family. `pos` ends on the byte after the single whitespace that
/// terminates the last token.
class HeaderReader {
 public:
  HeaderReader(const std::vector<char>& bytes, std::string file)
      : bytes_(bytes), file_(std::move(file)) {}

  std::string token() {
    skip_space_and_comments();
    std::string t;
    while (pos_ < bytes_.size() && !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
      t.push_back(bytes_[pos_++]);
    }
    if (t.empty()) throw ParseError(file_ + ": truncated header");
    return t;
  }
  long integer() {
    const std::string t = token();
    try {
      std::size_t used = 0;
      const long v = std::stol(t, &used);
      if (used != t.size() || v <= 0) throw std::invalid_argument(t);
      return v;
    } catch (const std::exception&) {
      throw ParseError(file_ + ": bad header field '" + t + "'");
    }
  }
  double real() {
    const std::string t = token();
    try {
      std::size_t used = 0;
      const double v = std::stod(t, &used);
      if (used != t.size()) throw std::invalid_argument(t);
      return v;
    } catch (const std::exception&) {
      throw ParseError(file_ + ": bad header field '" + t + "'");
    }
  }
  /// Consume the single whitespace byte separating header from payload.
  std::size_t payload_offset() {
    if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
      throw ParseError(file_ + ": missing header terminator");
    }
    return pos_ + 1;
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const char c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  const std::vector<char>& bytes_;
  std::string file_;
  std::size_t pos_ = 0;
};

inline std::uint32_t byteswap32(std::uint32_t v) {
  return ((v & 0xFF) << 24) | ((v & 0xFF00) << 8) | ((v >> 8) & 0xFF00) | (v >> 24);
}

/// Bytes of a single-channel little-endian PFM. Rows are stored bottom-to-top
/// as the format prescribes.
inline std::string encode_pfm(const DepthMap& depth) {
  std::ostringstream header;
  header << "Pf\n" << depth.width() << ' ' << depth.height() << "\n-1.0\n";
  std::string out = header.str();
  const std::size_t row_bytes = depth.width() * sizeof(float);
  const std::size_t start = out.size();
  out.resize(start + depth.height() * row_bytes);
  for (std::size_t r = 0; r < depth.height(); ++r) {
    const std::size_t src_row = depth.height() - 1 - r;
    for (std::size_t j = 0; j < depth.width(); ++j) {
      std::uint32_t bits = std::bit_cast<std::uint32_t>(depth(src_row, j));
      if constexpr (std::endian::native == std::endian::big) bits = byteswap32(bits);
      std::memcpy(out.data() + start + r * row_bytes + j * 4, &bits, 4);
    }
  }
  return out;
}

inline DepthMap decode_pfm(const std::vector<char>& bytes, const std::string& file) {
  HeaderReader hr(bytes, file);
  const std::string magic = hr.token();
  if (magic == "PF") {
    throw ParseError(file + ": 3-channel PFM ('PF') where a single-channel depth map ('Pf') is required");
  }
  if (magic != "Pf") throw ParseError(file + ": not a PFM file (magic '" + magic + "')");
  const auto w = static_cast<std::size_t>(hr.integer());
  const auto h = static_cast<std::size_t>(hr.integer());
  const double scale = hr.real();
  if (scale == 0.0) throw ParseError(file + ": zero scale field");
  const bool little = scale < 0.0;
  const std::size_t off = hr.payload_offset();
  const std::size_t need = w * h * 4;
  if (bytes.size() - off < need) {
    throw ParseError(file + ": truncated payload (" + std::to_string(bytes.size() - off) +
                     " of " + std::to_string(need) + " bytes)");
  }
  DepthMap depth(h, w);
  const bool swap = little != (std::endian::native == std::endian::little);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t j = 0; j < w; ++j) {
      std::uint32_t bits;
      std::memcpy(&bits, bytes.data() + off + (r * w + j) * 4, 4);
      if (swap) bits = byteswap32(bits);
      depth(h - 1 - r, j) = std::bit_cast<float>(bits);
    }
  return depth;
}

inline void write_pfm(const fs::path& path, const DepthMap& depth) {
  const std::string bytes = encode_pfm(depth);
  write_file(path, bytes, nullptr, 0);
}

inline DepthMap read_pfm(const fs::path& path) {
  return decode_pfm(read_file(path), path.string());
}

inline std::uint8_t quantize8(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

/// Binary 8-bit PPM (P6).
inline void write_ppm(const fs::path& path, const RgbImage& rgb) {
  std::ostringstream header;
  header << "P6\n" << rgb.width() << ' ' << rgb.height() << "\n255\n";
  std::vector<std::uint8_t> payload(rgb.data().size());
  for (std::size_t k = 0; k < payload.size(); ++k) payload[k] = quantize8(rgb[k]);
  write_file(path, header.str(), payload.data(), payload.size());
}

/// Reads 8-bit or 16-bit (big-endian) binary PPM.
inline RgbImage read_ppm(const fs::path& path) {
  const auto bytes = read_file(path);
  const std::string file = path.string();
  HeaderReader hr(bytes, file);
  if (hr.token() != "P6") throw ParseError(file + ": not a binary PPM (P6)");
  const auto w = static_cast<std::size_t>(hr.integer());
  const auto h = static_cast<std::size_t>(hr.integer());
  const long maxval = hr.integer();
  if (maxval > 65535) throw ParseError(file + ": maxval out of range");
  const std::size_t off = hr.payload_offset();
  const std::size_t bps = maxval > 255 ? 2 : 1;
  const std::size_t need = w * h * 3 * bps;
  if (bytes.size() - off < need) throw ParseError(file + ": truncated payload");
  RgbImage rgb(h, w);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + off);
  for (std::size_t k = 0; k < w * h * 3; ++k) {
    const unsigned v = bps == 1 ? p[k] : (static_cast<unsigned>(p[2 * k]) << 8) | p[2 * k + 1];
    rgb[k] = static_cast<float>(v) / static_cast<float>(maxval);
  }
  return rgb;
}

/// Binary 8-bit PGM (P5); mask stored as 0 / 255.
inline void write_pgm(const fs::path& path, const ValidityMask& mask) {
  std::ostringstream header;
  header << "P5\n" << mask.width() << ' ' << mask.height() << "\n255\n";
  std::vector<std::uint8_t> payload(mask.data().size());
  for (std::size_t k = 0; k < payload.size(); ++k) payload[k] = mask[k] ? 255 : 0;
  write_file(path, header.str(), payload.data(), payload.size());
}

inline ValidityMask read_pgm(const fs::path& path) {
  const auto bytes = read_file(path);
  const std::string file = path.string();
  HeaderReader hr(bytes, file);
  if (hr.token() != "P5") throw ParseError(file + ": not a binary PGM (P5)");
  const auto w = static_cast<std::size_t>(hr.integer());
  const auto h = static_cast<std::size_t>(hr.integer());
  const long maxval = hr.integer();
  if (maxval > 255) throw ParseError(file + ": 16-bit masks are not supported");
  const std::size_t off = hr.payload_offset();
  if (bytes.size() - off < w * h) throw ParseError(file + ": truncated payload");
  ValidityMask mask(h, w);
  for (std::size_t k = 0; k < w * h; ++k) mask[k] = bytes[off + k] != 0 ? 1 : 0;
  return mask;
}

}  // namespace depthmaster::pnm
