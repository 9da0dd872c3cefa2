// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "depthmaster/nn.hpp"

namespace depthmaster {

/// Versioned little-endian binary container:
///
///   magic "DMCKPT01"
///   u32 format_version, u32 f, u32 C_l, u64 param_count
///   u32 meta_count, then (string key, string value) pairs
///   u32 tensor_count, then (string name, u32 rank, u64 dims[rank],
///                           f32 data[prod(dims)]) records
///
/// Strings are u32 length + bytes. Tensors are stored in float32.
struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;
  static constexpr char kMagic[9] = "DMCKPT01";

  std::uint32_t format_version = kFormatVersion;
  std::uint32_t factor = 4;
  std::uint32_t latent_channels = 4;
  std::uint64_t param_count = 0;
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  bool has(const std::string& name) const { return find(name) != nullptr; }

  const Tensor<float>* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }

  const Tensor<float>& tensor(const std::string& name) const {
    const auto* t = find(name);
    if (!t) throw IntegrityError("checkpoint: missing tensor '" + name + "'");
    return *t;
  }

  const std::string& get(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw IntegrityError("checkpoint: missing metadata '" + key + "'");
    return it->second;
  }

  std::string get_or(const std::string& key, const std::string& fallback) const {
    auto it = meta.find(key);
    return it == meta.end() ? fallback : it->second;
  }

  void put(const std::string& name, Tensor<float> t) {
    for (auto& [n, existing] : tensors) {
      if (n == name) {
        existing = std::move(t);
        return;
      }
    }
    tensors.emplace_back(name, std::move(t));
  }

  template <typename T>
  void store(const std::string& prefix, const NamedParameters<T>& params) {
    for (const auto& [name, v] : params) put(prefix + name, v.value().template cast<float>());
  }

  /// Load every parameter of `params` from tensors named prefix + name.
  template <typename T>
  void restore(const std::string& prefix, NamedParameters<T>& params) const {
    for (auto& [name, v] : params) {
      const auto& t = tensor(prefix + name);
      require_same_shape(t.shape(), v.shape(), "checkpoint tensor " + prefix + name);
      v.value() = t.template cast<T>();
    }
  }

  std::vector<char> encode() const;
  static Checkpoint decode(const std::vector<char>& bytes, const std::string& origin);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

namespace ckpt_detail {

class Writer {
 public:
  template <typename U>
  void pod(U v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf.insert(buf.end(), p, p + sizeof v);
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    buf.insert(buf.end(), s.begin(), s.end());
  }
  std::vector<char> buf;
};

class Reader {
 public:
  Reader(const std::vector<char>& b, std::string origin) : buf_(b), origin_(std::move(origin)) {}
  template <typename U>
  U pod() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, buf_.data() + pos_, sizeof v);
    pos_ += sizeof v;
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void raw(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, buf_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == buf_.size(); }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw ParseError(origin_ + ": truncated checkpoint");
  }
  const std::vector<char>& buf_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace ckpt_detail

inline std::vector<char> Checkpoint::encode() const {
  ckpt_detail::Writer w;
  w.buf.insert(w.buf.end(), kMagic, kMagic + 8);
  w.pod(format_version);
  w.pod(factor);
  w.pod(latent_channels);
  w.pod(param_count);
  w.pod(static_cast<std::uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    w.str(k);
    w.str(v);
  }
  w.pod(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.str(name);
    w.pod(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.pod(static_cast<std::uint64_t>(d));
    const auto* p = reinterpret_cast<const char*>(t.data());
    w.buf.insert(w.buf.end(), p, p + t.size() * sizeof(float));
  }
  return std::move(w.buf);
}

inline Checkpoint Checkpoint::decode(const std::vector<char>& bytes, const std::string& origin) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw ParseError(origin + ": not a checkpoint (bad magic)");
  }
  std::vector<char> body(bytes.begin() + 8, bytes.end());
  ckpt_detail::Reader r(body, origin);
  Checkpoint c;
  c.format_version = r.pod<std::uint32_t>();
  if (c.format_version != kFormatVersion) {
    throw ParseError(origin + ": unsupported checkpoint version " +
                     std::to_string(c.format_version));
  }
  c.factor = r.pod<std::uint32_t>();
  c.latent_channels = r.pod<std::uint32_t>();
  c.param_count = r.pod<std::uint64_t>();
  const auto n_meta = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.str();
    c.meta[k] = r.str();
  }
  const auto n_tensors = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = r.str();
    const auto rank = r.pod<std::uint32_t>();
    if (rank > 8) throw ParseError(origin + ": implausible tensor rank for '" + name + "'");
    Shape shape(rank);
    std::size_t count = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(r.pod<std::uint64_t>());
      if (d != 0 && count > r.remaining() / d) throw ParseError(origin + ": truncated checkpoint");
      count *= d;
    }
    if (count * sizeof(float) > r.remaining()) throw ParseError(origin + ": truncated checkpoint");
    Tensor<float> t(shape);
    r.raw(t.data(), t.size() * sizeof(float));
    c.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) throw ParseError(origin + ": trailing bytes after checkpoint");
  return c;
}

inline void Checkpoint::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto bytes = encode();
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(tmp + ": write failed");
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(path.string() + ": cannot open checkpoint");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode(bytes, path.string());
}

}  // namespace depthmaster
