// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cctype>
#include <cmath>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "depthmaster/checkpoint.hpp"
#include "depthmaster/nn.hpp"
#include "depthmaster/spectral.hpp"

namespace depthmaster {

/// Feature tap points of the U-Net: after the first and second down blocks
/// and after the mid block.
enum class TapLocation { D1, D2, Mid };

inline std::string to_string(TapLocation t) {
  switch (t) {
    case TapLocation::D1: return "D1";
    case TapLocation::D2: return "D2";
    case TapLocation::Mid: return "Mid";
  }
  return "?";
}

inline TapLocation parse_tap_location(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (s == "d1") return TapLocation::D1;
  if (s == "d2") return TapLocation::D2;
  if (s == "mid") return TapLocation::Mid;
  throw ConfigError("unknown tap location '" + s + "' (expected D1, D2 or Mid)");
}

/// Spectral modulation of a feature map plus a learned fusion with the
/// spatial path. Shapes are preserved.
template <typename T>
class FrequencyEnhancer {
 public:
  FrequencyEnhancer() = default;
  FrequencyEnhancer(std::size_t channels, Activation activation, Rng& rng)
      : channels_(channels),
        activation_(activation),
        modulator_(2 * channels, 2 * channels, 1, 1, 0, rng),
        fusion_(2 * channels, channels, 1, 1, 0, rng) {
    set_identity_fusion();
  }

  std::size_t channels() const { return channels_; }
  Activation activation() const { return activation_; }
  void set_activation(Activation a) { activation_ = a; }

  /// Fusion passes the spatial half through and ignores the frequency half.
  void set_identity_fusion() {
    auto& w = fusion_.weight.value();
    w.fill(T{0});
    for (std::size_t c = 0; c < channels_; ++c) w.at(c, c, 0, 0) = T{1};
    fusion_.bias.value().fill(T{0});
  }

  /// Modulator that leaves the spectrum unchanged (with identity activation
  /// the frequency pass is then an FFT round trip).
  void set_identity_modulator() {
    auto& w = modulator_.weight.value();
    w.fill(T{0});
    for (std::size_t c = 0; c < 2 * channels_; ++c) w.at(c, c, 0, 0) = T{1};
    modulator_.bias.value().fill(T{0});
  }

  /// iFFT(act(conv(FFT(x)))), real part.
  Var<T> frequency_pass(const Var<T>& x) const {
    require_rank(x.shape(), 4, "frequency_pass");
    if (x.shape()[1] != channels_) throw ShapeError("frequency_pass: channel mismatch");
    return inverse_spectrum_real(activate(modulator_(spectrum(x)), activation_));
  }

  Var<T> fuse(const Var<T>& spatial, const Var<T>& frequency) const {
    require_same_shape(spatial.shape(), frequency.shape(), "fuse");
    return fusion_(concat_channels(spatial, frequency));
  }

  Var<T> operator()(const Var<T>& x) const { return fuse(x, frequency_pass(x)); }

  void collect(NamedParameters<T>& p, const std::string& prefix) const {
    modulator_.collect(p, prefix + ".modulator");
    fusion_.collect(p, prefix + ".fusion");
  }

  const Conv2d<T>& modulator() const { return modulator_; }
  const Conv2d<T>& fusion() const { return fusion_; }

 private:
  std::size_t channels_ = 0;
  Activation activation_ = Activation::silu;
  Conv2d<T> modulator_;
  Conv2d<T> fusion_;
};

struct UNetConfig {
  std::size_t latent_channels = 4;
  std::array<std::size_t, 3> widths{32, 64, 128};
  std::size_t groups = 8;
  std::uint64_t seed = 1;
  double timestep = 1.0;

  std::string describe() const {
    std::ostringstream os;
    os << "latent_channels=" << latent_channels << " widths=" << widths[0] << ',' << widths[1]
       << ',' << widths[2] << " groups=" << groups << " seed=" << seed;
    return os.str();
  }
};

/// Sinusoidal embedding of a scalar timestep, shape (1, dim).
template <typename T>
Tensor<T> timestep_embedding(double t, std::size_t dim) {
  Tensor<T> out(Shape{1, dim});
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    out[i] = static_cast<T>(std::sin(t * freq));
    out[half + i] = static_cast<T>(std::cos(t * freq));
  }
  return out;
}

template <typename T>
struct ResBlock {
  GroupNorm<T> norm1;
  Conv2d<T> conv1;
  Linear<T> time_proj;
  GroupNorm<T> norm2;
  Conv2d<T> conv2;
  std::optional<Conv2d<T>> skip;

  ResBlock() = default;
  ResBlock(std::size_t in, std::size_t out, std::size_t time_dim, std::size_t groups, Rng& rng)
      : norm1(in, fit_groups(in, groups)),
        conv1(in, out, 3, 1, 1, rng),
        time_proj(time_dim, out, rng),
        norm2(out, fit_groups(out, groups)),
        conv2(out, out, 3, 1, 1, rng) {
    if (in != out) skip.emplace(in, out, 1, 1, 0, rng);
  }

  Var<T> operator()(const Var<T>& x, const Var<T>& temb) const {
    Var<T> h = conv1(silu(norm1(x)));
    const Var<T> tb = time_proj(silu(temb));
    h = add_channel_bias(h, reshape(tb, Shape{tb.value().size()}));
    h = conv2(silu(norm2(h)));
    return add(skip ? (*skip)(x) : x, h);
  }

  void collect(NamedParameters<T>& p, const std::string& prefix) const {
    norm1.collect(p, prefix + ".norm1");
    conv1.collect(p, prefix + ".conv1");
    time_proj.collect(p, prefix + ".time_proj");
    norm2.collect(p, prefix + ".norm2");
    conv2.collect(p, prefix + ".conv2");
    if (skip) skip->collect(p, prefix + ".skip");
  }
};

/// Activations of one forward pass.
template <typename T>
struct UNetOutput {
  Var<T> latent;
  Var<T> d1;
  Var<T> d2;
  Var<T> mid;

  const Var<T>& tap(TapLocation loc) const {
    switch (loc) {
      case TapLocation::D1: return d1;
      case TapLocation::D2: return d2;
      case TapLocation::Mid: return mid;
    }
    throw ConfigError("unknown tap location");
  }
};

/// Three-level U-Net with skip connections, conditioned on a constant
/// timestep. Maps an image latent to a depth latent of the same shape.
///
/// Copies share parameters.
template <typename T>
class UNet {
 public:
  explicit UNet(UNetConfig cfg = {}) : cfg_(cfg) {
    const auto [w0, w1, w2] = cfg_.widths;
    if (!cfg_.latent_channels || !w0 || !w1 || !w2) throw ConfigError("UNet: zero width");
    Rng rng(mix_seed(cfg_.seed, 0x0E7));
    const std::size_t g = cfg_.groups;
    time_dim_ = 2 * w0;
    time1_ = Linear<T>(w0, time_dim_, rng);
    time2_ = Linear<T>(time_dim_, time_dim_, rng);
    conv_in_ = Conv2d<T>(cfg_.latent_channels, w0, 3, 1, 1, rng);
    down1_ = ResBlock<T>(w0, w0, time_dim_, g, rng);
    down_sample1_ = Conv2d<T>(w0, w0, 3, 2, 1, rng);
    down2_ = ResBlock<T>(w0, w1, time_dim_, g, rng);
    down_sample2_ = Conv2d<T>(w1, w1, 3, 2, 1, rng);
    down3_ = ResBlock<T>(w1, w2, time_dim_, g, rng);
    mid_ = ResBlock<T>(w2, w2, time_dim_, g, rng);
    up3_ = ResBlock<T>(2 * w2, w2, time_dim_, g, rng);
    up2_ = ResBlock<T>(w2 + w1, w1, time_dim_, g, rng);
    up1_ = ResBlock<T>(w1 + w0, w0, time_dim_, g, rng);
    norm_out_ = GroupNorm<T>(w0, fit_groups(w0, g));
    conv_out_ = Conv2d<T>(w0, cfg_.latent_channels, 3, 1, 1, rng);
  }

  const UNetConfig& config() const { return cfg_; }

  /// Attach a frequency enhancer at the mid block with identity fusion, so
  /// the model function is unchanged until the enhancer trains.
  void enable_enhancer(Activation activation = Activation::silu, std::uint64_t seed = 0) {
    Rng rng(mix_seed(cfg_.seed ^ seed, 0xFE));
    enhancer_ = std::make_shared<FrequencyEnhancer<T>>(cfg_.widths[2], activation, rng);
  }
  void disable_enhancer() { enhancer_.reset(); }
  bool enhancer_enabled() const { return static_cast<bool>(enhancer_); }
  FrequencyEnhancer<T>* enhancer() const { return enhancer_.get(); }

  UNetOutput<T> forward(const Var<T>& z) const {
    require_rank(z.shape(), 4, "UNet input");
    const auto& s = z.shape();
    if (s[1] != cfg_.latent_channels) {
      throw ShapeError("UNet: latent " + to_string(s) + " does not match " +
                       std::to_string(cfg_.latent_channels) + " channels");
    }
    if (s[2] % 4 || s[3] % 4) throw ShapeError("UNet: latent size must be divisible by 4");
    const Var<T> temb = time2_(silu(time1_(Var<T>::constant(
        timestep_embedding<T>(cfg_.timestep, cfg_.widths[0])))));

    UNetOutput<T> out;
    Var<T> h = conv_in_(z);
    out.d1 = down1_(h, temb);
    h = down_sample1_(out.d1);
    out.d2 = down2_(h, temb);
    h = down_sample2_(out.d2);
    const Var<T> s3 = down3_(h, temb);
    out.mid = mid_(s3, temb);
    h = enhancer_ ? (*enhancer_)(out.mid) : out.mid;
    h = up3_(concat_channels(h, s3), temb);
    h = upsample_nearest2x(h);
    h = up2_(concat_channels(h, out.d2), temb);
    h = upsample_nearest2x(h);
    h = up1_(concat_channels(h, out.d1), temb);
    out.latent = conv_out_(silu(norm_out_(h)));
    return out;
  }

  Var<T> predict_latent(const Var<T>& z) const { return forward(z).latent; }
  Tensor<T> predict_latent(const Tensor<T>& z) const {
    return predict_latent(Var<T>::constant(z)).value();
  }

  Var<T> tap_features(const Var<T>& z, TapLocation loc) const { return forward(z).tap(loc); }

  /// z_0 = z, z_{i+1} = f(z_i); returns z_k.
  Tensor<T> infer_iterative(const Tensor<T>& z, std::size_t k) const {
    if (k < 1) throw ConfigError("infer_iterative: k must be >= 1");
    Tensor<T> cur = z;
    for (std::size_t i = 0; i < k; ++i) cur = predict_latent(cur);
    return cur;
  }

  /// Channel count and spatial divisor of a tap.
  std::pair<std::size_t, std::size_t> tap_geometry(TapLocation loc) const {
    switch (loc) {
      case TapLocation::D1: return {cfg_.widths[0], 1};
      case TapLocation::D2: return {cfg_.widths[1], 2};
      case TapLocation::Mid: return {cfg_.widths[2], 4};
    }
    throw ConfigError("unknown tap location");
  }

  NamedParameters<T> backbone_parameters() const {
    NamedParameters<T> p;
    time1_.collect(p, "time1");
    time2_.collect(p, "time2");
    conv_in_.collect(p, "conv_in");
    down1_.collect(p, "down1");
    down_sample1_.collect(p, "down_sample1");
    down2_.collect(p, "down2");
    down_sample2_.collect(p, "down_sample2");
    down3_.collect(p, "down3");
    mid_.collect(p, "mid");
    up3_.collect(p, "up3");
    up2_.collect(p, "up2");
    up1_.collect(p, "up1");
    norm_out_.collect(p, "norm_out");
    conv_out_.collect(p, "conv_out");
    return p;
  }

  NamedParameters<T> enhancer_parameters() const {
    NamedParameters<T> p;
    if (enhancer_) enhancer_->collect(p, "fe");
    return p;
  }

  NamedParameters<T> parameters() const {
    auto p = backbone_parameters();
    auto e = enhancer_parameters();
    p.insert(p.end(), e.begin(), e.end());
    return p;
  }

  template <typename U>
  UNet<U> cast() const {
    UNet<U> out(cfg_);
    if (enhancer_) out.enable_enhancer(enhancer_->activation());
    auto dst = out.parameters();
    copy_parameters(parameters(), dst);
    return out;
  }
  UNet clone() const { return cast<T>(); }

  void store(Checkpoint& ck, const std::string& prefix = "unet.") const {
    ck.meta[prefix + "levels"] = "3";
    ck.meta[prefix + "latent_channels"] = std::to_string(cfg_.latent_channels);
    ck.meta[prefix + "widths"] = std::to_string(cfg_.widths[0]) + "," +
                                 std::to_string(cfg_.widths[1]) + "," +
                                 std::to_string(cfg_.widths[2]);
    ck.meta[prefix + "groups"] = std::to_string(cfg_.groups);
    ck.meta[prefix + "seed"] = std::to_string(cfg_.seed);
    ck.meta[prefix + "enhancer_enabled"] = enhancer_ ? "1" : "0";
    if (enhancer_) ck.meta[prefix + "enhancer_activation"] = to_string(enhancer_->activation());
    ck.store(prefix, parameters());
  }

  static UNet restore(const Checkpoint& ck, const std::string& prefix = "unet.") {
    UNetConfig cfg;
    try {
      cfg.latent_channels = std::stoul(ck.get(prefix + "latent_channels"));
      const std::string w = ck.get(prefix + "widths");
      std::istringstream is(w);
      std::string part;
      for (std::size_t i = 0; i < 3; ++i) {
        if (!std::getline(is, part, ',')) throw IntegrityError("checkpoint: malformed widths");
        cfg.widths[i] = std::stoul(part);
      }
      cfg.groups = std::stoul(ck.get(prefix + "groups"));
      cfg.seed = std::stoull(ck.get(prefix + "seed"));
    } catch (const std::invalid_argument&) {
      throw IntegrityError("checkpoint: malformed U-Net metadata");
    }
    UNet model(cfg);
    if (ck.get_or(prefix + "enhancer_enabled", "0") == "1") {
      model.enable_enhancer(parse_activation(ck.get(prefix + "enhancer_activation")));
    }
    auto p = model.parameters();
    ck.restore(prefix, p);
    return model;
  }

 private:
  UNetConfig cfg_;
  std::size_t time_dim_ = 0;
  Linear<T> time1_, time2_;
  Conv2d<T> conv_in_, down_sample1_, down_sample2_, conv_out_;
  ResBlock<T> down1_, down2_, down3_, mid_, up3_, up2_, up1_;
  GroupNorm<T> norm_out_;
  std::shared_ptr<FrequencyEnhancer<T>> enhancer_;
};

}  // namespace depthmaster
