// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "depthmaster/checkpoint.hpp"
#include "depthmaster/dataio.hpp"
#include "depthmaster/losses.hpp"
#include "depthmaster/metrics.hpp"
#include "depthmaster/nn.hpp"
#include "depthmaster/optim.hpp"
#include "depthmaster/preprocess.hpp"

namespace depthmaster {

using dataio::Sample;

struct CodecConfig {
  std::size_t factor = 4;
  std::size_t latent_channels = 4;
  std::size_t width_full = 16;  // channels at input resolution
  std::size_t width_down = 32;  // channels at every reduced resolution
  std::size_t groups = 8;
  std::uint64_t seed = 7;

  std::size_t stages() const {
    std::size_t s = 0;
    for (std::size_t f = factor; f > 1; f /= 2) ++s;
    return s;
  }
  void validate() const {
    if (factor < 2 || (factor & (factor - 1)) != 0) {
      throw ConfigError("codec factor must be a power of two >= 2");
    }
    if (latent_channels == 0 || width_full == 0 || width_down == 0) {
      throw ConfigError("codec widths must be positive");
    }
  }
};

/// Convolutional autoencoder mapping 3-channel rasters in [-1, 1] to
/// latents of shape (C_l, H/f, W/f) and back.
///
/// Copies share parameters. Use `clone()` or `cast()` for an independent
/// parameter set.
template <typename T>
class LatentCodec {
 public:
  explicit LatentCodec(CodecConfig cfg = {}) : cfg_(cfg), warnings_(std::make_shared<std::atomic<std::size_t>>(0)) {
    cfg_.validate();
    Rng rng(mix_seed(cfg_.seed, 0xC0DEC));
    const std::size_t S = cfg_.stages();
    auto width = [&](std::size_t level) { return level == 0 ? cfg_.width_full : cfg_.width_down; };
    auto gn = [&](std::size_t c) { return GroupNorm<T>(c, fit_groups(c, cfg_.groups)); };

    enc_in_ = Conv2d<T>(3, width(0), 3, 1, 1, rng);
    for (std::size_t s = 0; s < S; ++s) {
      const std::size_t a = width(s), b = width(s + 1);
      enc_.push_back({gn(a), Conv2d<T>(a, b, 3, 2, 1, rng), gn(b), Conv2d<T>(b, b, 3, 1, 1, rng)});
    }
    enc_norm_ = gn(width(S));
    enc_out_ = Conv2d<T>(width(S), cfg_.latent_channels, 3, 1, 1, rng);

    dec_in_ = Conv2d<T>(cfg_.latent_channels, width(S), 3, 1, 1, rng);
    for (std::size_t s = 0; s < S; ++s) {
      const std::size_t a = width(S - s), b = width(S - s - 1);
      dec_.push_back({gn(a), Conv2d<T>(a, a, 3, 1, 1, rng), gn(a), Conv2d<T>(a, b, 3, 1, 1, rng)});
    }
    dec_norm_ = gn(width(0));
    dec_out_ = Conv2d<T>(width(0), 3, 3, 1, 1, rng);
  }

  const CodecConfig& config() const { return cfg_; }
  std::size_t factor() const { return cfg_.factor; }
  std::size_t latent_channels() const { return cfg_.latent_channels; }

  /// x (N,3,H,W) -> z (N,C_l,H/f,W/f).
  Var<T> encode(const Var<T>& x) const {
    require_rank(x.shape(), 4, "encode");
    const auto& s = x.shape();
    if (s[1] != 3) throw ShapeError("encode: expected 3 channels, got " + to_string(s));
    if (s[2] % cfg_.factor || s[3] % cfg_.factor) {
      throw ShapeError("encode: spatial size " + to_string(s) + " not divisible by factor " +
                       std::to_string(cfg_.factor));
    }
    for (T v : x.value().values()) {
      if (!(std::abs(static_cast<double>(v)) <= 1.0 + 1e-3)) {
        warnings_->fetch_add(1, std::memory_order_relaxed);
        break;
      }
    }
    Var<T> h = enc_in_(x);
    for (const auto& st : enc_) {
      h = st.conv_a(silu(st.norm_a(h)));
      h = add(h, st.conv_b(silu(st.norm_b(h))));
    }
    return enc_out_(silu(enc_norm_(h)));
  }

  /// z (N,C_l,h,w) -> x (N,3,h*f,w*f).
  Var<T> decode(const Var<T>& z) const {
    require_rank(z.shape(), 4, "decode");
    if (z.shape()[1] != cfg_.latent_channels) {
      throw ShapeError("decode: latent " + to_string(z.shape()) + " does not match C_l=" +
                       std::to_string(cfg_.latent_channels));
    }
    Var<T> h = dec_in_(z);
    for (const auto& st : dec_) {
      h = add(h, st.conv_a(silu(st.norm_a(h))));
      h = upsample_nearest2x(h);
      h = st.conv_b(silu(st.norm_b(h)));
    }
    return dec_out_(silu(dec_norm_(h)));
  }

  Tensor<T> encode(const Tensor<T>& x) const { return encode(Var<T>::constant(x)).value(); }
  Tensor<T> decode(const Tensor<T>& z) const { return decode(Var<T>::constant(z)).value(); }

  /// Number of encode calls whose input left [-1, 1] by more than 1e-3.
  std::size_t range_warnings() const { return warnings_->load(); }

  NamedParameters<T> encoder_parameters() const {
    NamedParameters<T> p;
    enc_in_.collect(p, "enc.in");
    for (std::size_t s = 0; s < enc_.size(); ++s) enc_[s].collect(p, "enc.stage" + std::to_string(s));
    enc_norm_.collect(p, "enc.norm");
    enc_out_.collect(p, "enc.out");
    return p;
  }

  NamedParameters<T> decoder_parameters() const {
    NamedParameters<T> p;
    dec_in_.collect(p, "dec.in");
    for (std::size_t s = 0; s < dec_.size(); ++s) dec_[s].collect(p, "dec.stage" + std::to_string(s));
    dec_norm_.collect(p, "dec.norm");
    dec_out_.collect(p, "dec.out");
    return p;
  }

  NamedParameters<T> parameters() const {
    auto p = encoder_parameters();
    auto d = decoder_parameters();
    p.insert(p.end(), d.begin(), d.end());
    return p;
  }

  std::uint64_t hash() const { return parameter_hash(parameters()); }
  std::uint64_t decoder_hash() const { return parameter_hash(decoder_parameters()); }

  void freeze() {
    auto p = parameters();
    set_trainable(p, false);
  }
  void unfreeze() {
    auto p = parameters();
    set_trainable(p, true);
  }

  template <typename U>
  LatentCodec<U> cast() const {
    LatentCodec<U> out(cfg_);
    auto dst = out.parameters();
    copy_parameters(parameters(), dst);
    return out;
  }
  LatentCodec clone() const { return cast<T>(); }

  void store(Checkpoint& ck, const std::string& prefix = "codec.") const {
    ck.factor = static_cast<std::uint32_t>(cfg_.factor);
    ck.latent_channels = static_cast<std::uint32_t>(cfg_.latent_channels);
    ck.meta[prefix + "width_full"] = std::to_string(cfg_.width_full);
    ck.meta[prefix + "width_down"] = std::to_string(cfg_.width_down);
    ck.meta[prefix + "groups"] = std::to_string(cfg_.groups);
    ck.meta[prefix + "seed"] = std::to_string(cfg_.seed);
    ck.meta[prefix + "hash"] = hex64(hash());
    ck.store(prefix, parameters());
  }

  static LatentCodec restore(const Checkpoint& ck, const std::string& prefix = "codec.") {
    CodecConfig cfg;
    cfg.factor = ck.factor;
    cfg.latent_channels = ck.latent_channels;
    try {
      cfg.width_full = std::stoul(ck.get(prefix + "width_full"));
      cfg.width_down = std::stoul(ck.get(prefix + "width_down"));
      cfg.groups = std::stoul(ck.get(prefix + "groups"));
      cfg.seed = std::stoull(ck.get(prefix + "seed"));
    } catch (const std::invalid_argument&) {
      throw IntegrityError("checkpoint: malformed codec metadata");
    }
    LatentCodec codec(cfg);
    auto p = codec.parameters();
    ck.restore(prefix, p);
    const std::string expected = ck.get_or(prefix + "hash", "");
    if (!expected.empty() && expected != hex64(codec.hash())) {
      throw IntegrityError("checkpoint: codec hash mismatch (stored " + expected + ", loaded " +
                           hex64(codec.hash()) + ")");
    }
    return codec;
  }

 private:
  struct Stage {
    GroupNorm<T> norm_a;
    Conv2d<T> conv_a;
    GroupNorm<T> norm_b;
    Conv2d<T> conv_b;
    void collect(NamedParameters<T>& p, const std::string& prefix) const {
      norm_a.collect(p, prefix + ".norm_a");
      conv_a.collect(p, prefix + ".conv_a");
      norm_b.collect(p, prefix + ".norm_b");
      conv_b.collect(p, prefix + ".conv_b");
    }
  };

  CodecConfig cfg_;
  Conv2d<T> enc_in_, enc_out_, dec_in_, dec_out_;
  GroupNorm<T> enc_norm_, dec_norm_;
  std::vector<Stage> enc_, dec_;
  std::shared_ptr<std::atomic<std::size_t>> warnings_;
};

namespace codec {

/// RGB in [0,1] -> (1,3,H,W) in [-1,1].
template <typename T>
Tensor<T> rgb_input(const RgbImage& rgb) {
  const std::size_t H = rgb.height(), W = rgb.width();
  Tensor<T> out(Shape{1, 3, H, W});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) out.at(0, c, i, j) = static_cast<T>(2.0f * rgb(i, j, c) - 1.0f);
  return out;
}

/// Single-channel map in [-1,1] -> (1,3,H,W) with the value replicated.
template <typename T>
Tensor<T> map_input(const ScalarMap& map) {
  const std::size_t H = map.height(), W = map.width();
  Tensor<T> out(Shape{1, 3, H, W});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) out.at(0, c, i, j) = static_cast<T>(map(i, j));
  return out;
}

/// (N,1,H,W) map -> (N,1,H,W) tensor helpers.
template <typename T>
Tensor<T> map_tensor(const ScalarMap& map) {
  Tensor<T> out(Shape{1, 1, map.height(), map.width()});
  for (std::size_t k = 0; k < map.pixels(); ++k) out[k] = static_cast<T>(map[k]);
  return out;
}

/// Channel `n` of a batched (N,C,H,W) tensor, averaged over channels.
template <typename T>
ScalarMap averaged_map(const Tensor<T>& x, std::size_t n = 0) {
  const std::size_t C = x.dim(1), H = x.dim(2), W = x.dim(3);
  ScalarMap out(H, W);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < C; ++c) s += x.at(n, c, i, j);
      out(i, j) = static_cast<float>(s / static_cast<double>(C));
    }
  return out;
}

/// Normalized target of a sample in the given mode.
inline preprocess::Normalized normalized_target(const Sample& s, preprocess::TargetMode mode,
                                                double p_lo = 2.0, double p_hi = 98.0) {
  return preprocess::normalize_percentile(preprocess::depth_to_target(s.depth, s.mask, mode),
                                          s.mask, p_lo, p_hi, mode);
}

}  // namespace codec

struct CodecTrainConfig {
  std::size_t iterations = 2000;
  std::size_t batch = 8;
  double lr = 2e-3;
  /// Cosine decay from lr to lr * final_lr_fraction over the run.
  double final_lr_fraction = 0.05;
  double weight_decay = 0.0;
  double rgb_fraction = 0.5;
  double flip_probability = 0.5;
  std::uint64_t seed = 11;
  std::size_t log_every = 50;
};

struct CodecTrainResult {
  std::vector<std::pair<std::size_t, double>> curve;  // (iteration, loss)
};

/// Reconstruction training on a mix of RGB images and channel-replicated
/// normalized depth targets (target mode drawn uniformly per item). The
/// codec is frozen on return.
template <typename T>
CodecTrainResult train_codec(LatentCodec<T>& codec, const std::vector<Sample>& samples,
                             const CodecTrainConfig& cfg,
                             const std::function<void(std::size_t, double)>& on_log = {}) {
  if (samples.empty()) throw ConfigError("train_codec: empty dataset");
  if (cfg.batch == 0) throw ConfigError("train_codec: batch must be > 0");
  codec.unfreeze();
  AdamW<T> opt(codec.parameters(), {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  CodecTrainResult result;
  const preprocess::TargetMode modes[3] = {preprocess::TargetMode::depth,
                                           preprocess::TargetMode::disparity,
                                           preprocess::TargetMode::sqrt_disparity};
  for (std::size_t it = 0; it <= cfg.iterations; ++it) {
    const double progress = cfg.iterations ? static_cast<double>(it) / static_cast<double>(cfg.iterations) : 1.0;
    opt.set_lr(cfg.lr * (cfg.final_lr_fraction +
                         (1.0 - cfg.final_lr_fraction) * 0.5 * (1.0 + std::cos(M_PI * progress))));
    Rng rng(mix_seed(cfg.seed, it));
    std::vector<Tensor<T>> items;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const std::size_t idx = std::uniform_int_distribution<std::size_t>(0, samples.size() - 1)(rng);
      const Sample s = dataio::augment_hflip(samples[idx], cfg.flip_probability, rng);
      if (std::bernoulli_distribution(cfg.rgb_fraction)(rng)) {
        items.push_back(codec::rgb_input<T>(s.rgb));
      } else {
        const auto mode = modes[std::uniform_int_distribution<int>(0, 2)(rng)];
        items.push_back(codec::map_input<T>(codec::normalized_target(s, mode).values));
      }
    }
    const Tensor<T> x = stack_batch(items);
    Var<T> recon = codec.decode(codec.encode(Var<T>::constant(x)));
    Var<T> loss = losses::mse(recon, x);
    const double value = static_cast<double>(loss.value()[0]);
    if (!std::isfinite(value)) {
      throw NumericalError("train_codec: non-finite loss at iteration " + std::to_string(it));
    }
    if (it % cfg.log_every == 0 || it == cfg.iterations) {
      result.curve.emplace_back(it, value);
      if (on_log) on_log(it, value);
    }
    if (it == cfg.iterations) break;  // final entry is evaluation only
    backward(loss);
    opt.step();
  }
  codec.freeze();
  return result;
}

/// Depth reconstruction through the codec: normalize the ground truth,
/// encode/decode it, average channels, invert with the sample's own
/// normalization and score against the ground truth.
template <typename T>
metrics::MetricsReport reconstruction_eval(const LatentCodec<T>& codec,
                                           const std::vector<Sample>& samples,
                                           preprocess::TargetMode mode, const std::string& dataset,
                                           const metrics::EvalConfig& eval = {}) {
  std::vector<metrics::SampleMetrics> rows;
  std::vector<std::string> notes;
  for (const auto& s : samples) {
    const auto norm = codec::normalized_target(s, mode);
    const Tensor<T> recon = codec.decode(codec.encode(codec::map_input<T>(norm.values)));
    const DepthMap pred = preprocess::prediction_to_depth(codec::averaged_map(recon), norm.params);
    try {
      rows.push_back(metrics::evaluate_sample(pred, s.depth, s.mask, eval, s.id));
    } catch (const DegenerateError& e) {
      notes.push_back(s.id + ": excluded (" + e.what() + ")");
    }
  }
  auto report = metrics::aggregate(dataset, rows, eval, hex64(codec.hash()));
  report.notes = std::move(notes);
  return report;
}

}  // namespace depthmaster
