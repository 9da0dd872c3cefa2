// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "depthmaster/dataio.hpp"
#include "depthmaster/denoiser.hpp"
#include "depthmaster/nn.hpp"

namespace depthmaster::alignment {

using dataio::Sample;

/// N tokens of dimension D laid out on an n_h x n_w grid (row-major).
struct TokenFeatures {
  Tensor<float> data;  // (N, D)
  std::size_t patch_size = 8;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;

  std::size_t tokens() const { return data.dim(0); }
  std::size_t dim() const { return data.dim(1); }

  void validate() const {
    if (data.rank() != 2 || tokens() == 0 || dim() == 0) {
      throw ShapeError("TokenFeatures: expected non-empty (N, D), got " + to_string(data.shape()));
    }
    if (grid_h * grid_w != tokens()) {
      throw ShapeError("TokenFeatures: grid " + std::to_string(grid_h) + "x" +
                       std::to_string(grid_w) + " does not hold " + std::to_string(tokens()) +
                       " tokens");
    }
    if (!data.all_finite()) throw NumericalError("TokenFeatures: non-finite values");
  }
};

/// (N, D) tokens -> (1, D, n_h, n_w) map.
template <typename T>
Tensor<T> tokens_to_map(const TokenFeatures& f) {
  Tensor<T> out(Shape{1, f.dim(), f.grid_h, f.grid_w});
  for (std::size_t n = 0; n < f.tokens(); ++n)
    for (std::size_t d = 0; d < f.dim(); ++d)
      out[d * f.tokens() + n] = static_cast<T>(f.data[n * f.dim() + d]);
  return out;
}

/// Sample `b` of a (B, D, n_h, n_w) map -> (N, D) tokens.
template <typename T>
TokenFeatures map_to_tokens(const Tensor<T>& m, std::size_t b = 0, std::size_t patch = 8) {
  const std::size_t D = m.dim(1), h = m.dim(2), w = m.dim(3), N = h * w;
  TokenFeatures f{Tensor<float>(Shape{N, D}), patch, h, w};
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t d = 0; d < D; ++d)
      f.data[n * D + d] = static_cast<float>(m[(b * D + d) * N + n]);
  return f;
}

/// Mirror the token grid left-right (matches a horizontally flipped image).
inline TokenFeatures mirrored(const TokenFeatures& f) {
  TokenFeatures out = f;
  const std::size_t D = f.dim();
  for (std::size_t i = 0; i < f.grid_h; ++i)
    for (std::size_t j = 0; j < f.grid_w; ++j) {
      const std::size_t src = i * f.grid_w + (f.grid_w - 1 - j);
      std::copy_n(f.data.data() + src * D, D, out.data.data() + (i * f.grid_w + j) * D);
    }
  return out;
}

// ---------------------------------------------------------------------------
// External encoders
// ---------------------------------------------------------------------------

class ExternalEncoder {
 public:
  virtual ~ExternalEncoder() = default;
  /// Tokens for a (possibly flipped) sample.
  virtual TokenFeatures features(const Sample& s, bool flipped = false) const = 0;
  virtual std::size_t dim() const = 0;
  virtual std::size_t patch_size() const = 0;
  virtual std::string name() const = 0;
  /// Fingerprint of the frozen state.
  virtual std::uint64_t hash() const = 0;
};

struct PatchEncoderConfig {
  std::size_t patch = 8;
  std::size_t dim = 48;
  std::size_t hidden = 32;
  std::uint64_t seed = 0x5EED;
};

/// Frozen random convolutional patch encoder: non-overlapping patch
/// embedding, GELU, 3x3 context mixing over the token grid, GELU, 1x1
/// projection to D.
class PatchEncoder : public ExternalEncoder {
 public:
  explicit PatchEncoder(PatchEncoderConfig cfg = {}) : cfg_(cfg) {
    if (cfg_.patch == 0 || cfg_.dim == 0 || cfg_.hidden == 0) {
      throw ConfigError("PatchEncoder: sizes must be positive");
    }
    Rng rng(mix_seed(cfg_.seed, 0xE7C));
    embed_ = Conv2d<float>(3, cfg_.hidden, cfg_.patch, cfg_.patch, 0, rng);
    context_ = Conv2d<float>(cfg_.hidden, cfg_.hidden, 3, 1, 1, rng);
    head_ = Conv2d<float>(cfg_.hidden, cfg_.dim, 1, 1, 0, rng);
    auto p = parameters();
    set_trainable(p, false);
  }

  TokenFeatures features(const Sample& s, bool flipped = false) const override {
    const RgbImage& rgb = s.rgb;
    if (rgb.height() % cfg_.patch || rgb.width() % cfg_.patch) {
      throw ShapeError("PatchEncoder: image " + std::to_string(rgb.height()) + "x" +
                       std::to_string(rgb.width()) + " not divisible by patch " +
                       std::to_string(cfg_.patch));
    }
    const std::size_t H = rgb.height(), W = rgb.width();
    Tensor<float> x(Shape{1, 3, H, W});
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
          x.at(0, c, i, j) = 2.0f * rgb(i, flipped ? W - 1 - j : j, c) - 1.0f;
    Var<float> h = activate(embed_(Var<float>::constant(x)), Activation::gelu_tanh);
    h = activate(context_(h), Activation::gelu_tanh);
    h = head_(h);
    return map_to_tokens(h.value(), 0, cfg_.patch);
  }

  std::size_t dim() const override { return cfg_.dim; }
  std::size_t patch_size() const override { return cfg_.patch; }
  std::string name() const override { return "patch_encoder"; }
  std::uint64_t hash() const override { return parameter_hash(parameters()); }

  NamedParameters<float> parameters() const {
    NamedParameters<float> p;
    embed_.collect(p, "embed");
    context_.collect(p, "context");
    head_.collect(p, "head");
    return p;
  }

 private:
  PatchEncoderConfig cfg_;
  Conv2d<float> embed_, context_, head_;
};

// Feature file: u32 id_len, id bytes, u32 N, u32 D, f32 payload (N x D,
// row-major), little-endian.

inline void write_feature_file(const std::filesystem::path& path, const std::string& id,
                               const Tensor<float>& tokens) {
  if (tokens.rank() != 2) throw ShapeError("write_feature_file: expected (N, D)");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  const auto put = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  put(static_cast<std::uint32_t>(id.size()));
  out.write(id.data(), static_cast<std::streamsize>(id.size()));
  put(static_cast<std::uint32_t>(tokens.dim(0)));
  put(static_cast<std::uint32_t>(tokens.dim(1)));
  out.write(reinterpret_cast<const char*>(tokens.data()),
            static_cast<std::streamsize>(tokens.size() * sizeof(float)));
  if (!out) throw Error(path.string() + ": write failed");
}

struct FeatureRecord {
  std::string id;
  Tensor<float> tokens;
};

inline FeatureRecord read_feature_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path.string() + ": cannot open feature file");
  const auto get = [&]() {
    std::uint32_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), 4)) {
      throw ParseError(path.string() + ": truncated feature header");
    }
    return v;
  };
  const std::uint32_t len = get();
  if (len > 4096) throw ParseError(path.string() + ": implausible id length");
  std::string id(len, '\0');
  if (!in.read(id.data(), len)) throw ParseError(path.string() + ": truncated id");
  const std::uint32_t N = get(), D = get();
  if (N == 0 || D == 0) throw ParseError(path.string() + ": empty feature payload");
  Tensor<float> t(Shape{N, D});
  if (!in.read(reinterpret_cast<char*>(t.data()),
               static_cast<std::streamsize>(t.size() * sizeof(float)))) {
    throw ParseError(path.string() + ": truncated payload");
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw ParseError(path.string() + ": trailing bytes");
  }
  return {std::move(id), std::move(t)};
}

struct FeatureIndexEntry {
  std::string id;
  std::filesystem::path path;
  std::size_t tokens = 0;
  std::size_t dim = 0;
};

/// Validate every `*.feat` file under `dir` and index it by sample id. All
/// files must share (N, D); when expected values are non-zero they must
/// match too.
inline std::vector<FeatureIndexEntry> index_feature_dir(const std::filesystem::path& dir,
                                                        std::size_t expected_tokens = 0,
                                                        std::size_t expected_dim = 0) {
  if (!std::filesystem::is_directory(dir)) throw ConfigError(dir.string() + ": not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".feat") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<FeatureIndexEntry> index;
  std::map<std::string, std::filesystem::path> seen;
  for (const auto& f : files) {
    auto rec = read_feature_file(f);
    const std::size_t N = rec.tokens.dim(0), D = rec.tokens.dim(1);
    if (expected_tokens == 0) expected_tokens = N;
    if (expected_dim == 0) expected_dim = D;
    if (N != expected_tokens || D != expected_dim) {
      throw ShapeError(f.string() + ": shape (" + std::to_string(N) + ", " + std::to_string(D) +
                       ") does not match expected (" + std::to_string(expected_tokens) + ", " +
                       std::to_string(expected_dim) + ")");
    }
    if (!rec.tokens.all_finite()) throw NumericalError(f.string() + ": non-finite features");
    if (!seen.emplace(rec.id, f).second) {
      throw ConfigError(f.string() + ": duplicate sample id '" + rec.id + "'");
    }
    index.push_back({rec.id, f, N, D});
  }
  return index;
}

/// Precomputed tokens read from `<dir>/<sample id>.feat`, cached in memory.
class FileEncoder : public ExternalEncoder {
 public:
  FileEncoder(std::filesystem::path dir, std::size_t tokens, std::size_t dim, std::size_t patch)
      : dir_(std::move(dir)), tokens_(tokens), dim_(dim), patch_(patch) {}

  TokenFeatures features(const Sample& s, bool flipped = false) const override {
    auto it = cache_->find(s.id);
    if (it == cache_->end()) {
      const auto path = dir_ / (s.id + ".feat");
      if (!std::filesystem::exists(path)) {
        throw ConfigError("missing feature file " + path.string());
      }
      auto rec = read_feature_file(path);
      if (rec.tokens.dim(0) != tokens_ || rec.tokens.dim(1) != dim_) {
        throw ShapeError(path.string() + ": feature shape does not match configured (" +
                         std::to_string(tokens_) + ", " + std::to_string(dim_) + ")");
      }
      it = cache_->emplace(s.id, std::move(rec.tokens)).first;
    }
    const std::size_t gh = s.rgb.height() / patch_, gw = s.rgb.width() / patch_;
    TokenFeatures f{it->second, patch_, gh, gw};
    f.validate();
    return flipped ? mirrored(f) : f;
  }

  std::size_t dim() const override { return dim_; }
  std::size_t patch_size() const override { return patch_; }
  std::string name() const override { return "file:" + dir_.string(); }
  std::uint64_t hash() const override {
    Fnv1a h;
    h.update(dir_.string());
    return h.digest();
  }

 private:
  std::filesystem::path dir_;
  std::size_t tokens_, dim_, patch_;
  std::shared_ptr<std::map<std::string, Tensor<float>>> cache_ =
      std::make_shared<std::map<std::string, Tensor<float>>>();
};

// ---------------------------------------------------------------------------
// Projector and loss
// ---------------------------------------------------------------------------

/// Bilinear resampling of a U-Net feature map to the token grid, then a
/// per-token two-layer perceptron C -> hidden -> D (1x1 convolutions).
template <typename T>
class Projector {
 public:
  Projector() = default;
  Projector(std::size_t in_channels, std::size_t dim, std::size_t hidden, std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0x9E0));
    fc1_ = Conv2d<T>(in_channels, hidden, 1, 1, 0, rng);
    fc2_ = Conv2d<T>(hidden, dim, 1, 1, 0, rng);
  }

  std::size_t in_channels() const { return fc1_.in_channels(); }
  std::size_t dim() const { return fc2_.out_channels(); }

  /// (B, C, h, w) -> (B, D, grid_h, grid_w).
  Var<T> operator()(const Var<T>& features, std::size_t grid_h, std::size_t grid_w) const {
    require_rank(features.shape(), 4, "project");
    if (features.shape()[1] != in_channels()) {
      throw ShapeError("project: feature " + to_string(features.shape()) +
                       " does not match projector input " + std::to_string(in_channels()));
    }
    return fc2_(silu(fc1_(bilinear_resize(features, grid_h, grid_w))));
  }

  NamedParameters<T> parameters() const {
    NamedParameters<T> p;
    fc1_.collect(p, "fc1");
    fc2_.collect(p, "fc2");
    return p;
  }

  template <typename U>
  Projector<U> cast() const {
    Projector<U> out(in_channels(), dim(), fc1_.out_channels(), 0);
    auto dst = out.parameters();
    copy_parameters(parameters(), dst);
    return out;
  }

 private:
  Conv2d<T> fc1_, fc2_;
};

/// Log-softmax of a vector of logits scaled by 1/temperature.
inline std::vector<double> log_softmax(const std::vector<double>& x, double temperature) {
  double m = -INFINITY;
  for (double v : x) m = std::max(m, v / temperature);
  double s = 0;
  for (double v : x) s += std::exp(v / temperature - m);
  const double lse = m + std::log(s);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / temperature - lse;
  return out;
}

/// Mean over tokens of KL(softmax(external) || softmax(projected)).
inline double feature_alignment_loss(const TokenFeatures& external, const TokenFeatures& projected,
                                     double temperature = 1.0) {
  require_same_shape(external.data.shape(), projected.data.shape(), "feature_alignment_loss");
  if (!(temperature > 0)) throw ConfigError("feature_alignment_loss: temperature must be > 0");
  if (!external.data.all_finite() || !projected.data.all_finite()) {
    throw NumericalError("feature_alignment_loss: non-finite features");
  }
  const std::size_t N = external.tokens(), D = external.dim();
  double acc = 0;
  std::vector<double> a(D), b(D);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t d = 0; d < D; ++d) {
      a[d] = external.data[n * D + d];
      b[d] = projected.data[n * D + d];
    }
    const auto lp = log_softmax(a, temperature), lq = log_softmax(b, temperature);
    double kl = 0;
    for (std::size_t d = 0; d < D; ++d) kl += std::exp(lp[d]) * (lp[d] - lq[d]);
    acc += std::max(kl, 0.0);
  }
  return acc / static_cast<double>(N);
}

/// Differentiable form over (B, D, h, w) maps: softmax along D per token,
/// KL(target || prediction), averaged over all B*h*w tokens.
template <typename T>
Var<T> feature_alignment_loss(const Var<T>& projected, const Tensor<T>& target,
                              double temperature = 1.0) {
  require_same_shape(projected.shape(), target.shape(), "feature_alignment_loss");
  require_rank(target.shape(), 4, "feature_alignment_loss");
  if (!(temperature > 0)) throw ConfigError("feature_alignment_loss: temperature must be > 0");
  if (!projected.value().all_finite() || !target.all_finite()) {
    throw NumericalError("feature_alignment_loss: non-finite features");
  }
  const std::size_t B = target.dim(0), D = target.dim(1), P = target.dim(2) * target.dim(3);
  const std::size_t tokens = B * P;
  Tensor<T> diff(target.shape());  // q - p, reused by the backward pass
  std::vector<double> a(D), b(D);
  double acc = 0;
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t k = 0; k < P; ++k) {
      for (std::size_t d = 0; d < D; ++d) {
        a[d] = target[(n * D + d) * P + k];
        b[d] = projected.value()[(n * D + d) * P + k];
      }
      const auto lp = log_softmax(a, temperature), lq = log_softmax(b, temperature);
      double kl = 0;
      for (std::size_t d = 0; d < D; ++d) {
        const double p = std::exp(lp[d]);
        kl += p * (lp[d] - lq[d]);
        diff[(n * D + d) * P + k] = static_cast<T>(std::exp(lq[d]) - p);
      }
      acc += std::max(kl, 0.0);
    }
  Tensor<T> out(Shape{1}, static_cast<T>(acc / static_cast<double>(tokens)));
  const T c = static_cast<T>(1.0 / (temperature * static_cast<double>(tokens)));
  return make_op<T>(std::move(out), {projected},
                    [projected, diff = std::move(diff), c](const Tensor<T>& g) {
                      auto& buf = projected.grad_buffer();
                      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[0] * c * diff[i];
                    });
}

}  // namespace depthmaster::alignment
