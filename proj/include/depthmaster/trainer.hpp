// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "depthmaster/checkpoint.hpp"
#include "depthmaster/config.hpp"
#include "depthmaster/dataio.hpp"
#include "depthmaster/denoiser.hpp"
#include "depthmaster/feature_alignment.hpp"
#include "depthmaster/latent_codec.hpp"
#include "depthmaster/losses.hpp"
#include "depthmaster/metrics.hpp"
#include "depthmaster/optim.hpp"
#include "depthmaster/preprocess.hpp"

namespace depthmaster::training {

using dataio::Sample;
using preprocess::TargetMode;

/// Which terms enter the training objective.
struct Objectives {
  bool latent = true;
  bool fa = true;
  bool pixel = false;
  bool huber = false;
  bool enhancer = false;

  bool needs_decoder() const { return pixel || huber; }
  friend bool operator==(const Objectives&, const Objectives&) = default;
};

struct TrainConfig {
  int stage = 1;
  double lr = 3e-5;
  std::size_t iterations = 4000;
  std::size_t micro_batch = 8;
  std::size_t accum_steps = 4;
  double lambda_fa = 1.0;
  double lambda_h = 0.001;
  double delta = 0.1;
  losses::HuberForm huber_form = losses::HuberForm::linear_inside;
  TapLocation alignment_location = TapLocation::Mid;
  TargetMode target_mode = TargetMode::sqrt_disparity;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 500;
  std::size_t eval_every = 500;
  std::size_t log_every = 10;
  double weight_decay = 0.01;
  double flip_probability = 0.5;
  double fa_temperature = 1.0;
  Activation enhancer_activation = Activation::silu;
  double p_lo = 2.0;
  double p_hi = 98.0;
  Objectives objectives;
  std::array<std::size_t, 3> unet_widths{32, 64, 128};
  std::uint64_t model_seed = 1;
  std::size_t projector_hidden = 96;

  std::size_t effective_batch() const { return micro_batch * accum_steps; }

  /// Defaults for a curriculum stage: stage 1 trains the latent objective
  /// with feature alignment; stage 2 trains the pixel and gradient terms
  /// with the frequency enhancer at a 10x smaller learning rate.
  static TrainConfig for_stage(int stage) {
    TrainConfig c;
    c.stage = stage;
    if (stage == 2) {
      c.lr = 3e-6;
      c.iterations = 2000;
      c.objectives = {false, false, true, true, true};
    } else if (stage != 1) {
      throw ConfigError("stage must be 1 or 2");
    }
    return c;
  }

  void validate() const {
    if (stage != 1 && stage != 2) throw ConfigError("stage must be 1 or 2");
    if (!(lr > 0)) throw ConfigError("lr must be > 0");
    if (micro_batch == 0 || accum_steps == 0) throw ConfigError("batch sizes must be > 0");
    if (!(delta > 0)) throw ConfigError("delta must be > 0");
    if (lambda_fa < 0 || lambda_h < 0) throw ConfigError("loss weights must be >= 0");
    if (flip_probability < 0 || flip_probability > 1) throw ConfigError("flip_probability outside [0, 1]");
    if (!(fa_temperature > 0)) throw ConfigError("fa_temperature must be > 0");
    if (!(p_lo < p_hi)) throw ConfigError("p_lo must be < p_hi");
    const auto& o = objectives;
    if (!o.latent && !o.fa && !o.pixel && !o.huber) throw ConfigError("empty objective");
  }

  static const std::set<std::string>& keys() {
    static const std::set<std::string> k{
        "stage",        "lr",           "iterations",         "micro_batch",
        "accum_steps",  "lambda_fa",    "lambda_h",           "delta",
        "huber_form",   "alignment_location", "target_mode",  "seed",
        "checkpoint_every", "eval_every", "log_every",        "weight_decay",
        "flip_probability", "fa_temperature", "enhancer_activation", "p_lo",
        "p_hi",         "loss_latent",  "loss_fa",            "loss_pixel",
        "loss_h",       "enhancer",     "unet_widths",        "model_seed",
        "projector_hidden"};
    return k;
  }

  KeyValueConfig to_kv() const {
    using config_detail::format;
    KeyValueConfig kv;
    kv.set("stage", std::to_string(stage));
    kv.set("lr", format(lr));
    kv.set("iterations", std::to_string(iterations));
    kv.set("micro_batch", std::to_string(micro_batch));
    kv.set("accum_steps", std::to_string(accum_steps));
    kv.set("lambda_fa", format(lambda_fa));
    kv.set("lambda_h", format(lambda_h));
    kv.set("delta", format(delta));
    kv.set("huber_form", losses::to_string(huber_form));
    kv.set("alignment_location", objectives.fa ? to_string(alignment_location) : "none");
    kv.set("target_mode", preprocess::to_string(target_mode));
    kv.set("seed", std::to_string(seed));
    kv.set("checkpoint_every", std::to_string(checkpoint_every));
    kv.set("eval_every", std::to_string(eval_every));
    kv.set("log_every", std::to_string(log_every));
    kv.set("weight_decay", format(weight_decay));
    kv.set("flip_probability", format(flip_probability));
    kv.set("fa_temperature", format(fa_temperature));
    kv.set("enhancer_activation", to_string(enhancer_activation));
    kv.set("p_lo", format(p_lo));
    kv.set("p_hi", format(p_hi));
    kv.set("loss_latent", objectives.latent ? "1" : "0");
    kv.set("loss_fa", objectives.fa ? "1" : "0");
    kv.set("loss_pixel", objectives.pixel ? "1" : "0");
    kv.set("loss_h", objectives.huber ? "1" : "0");
    kv.set("enhancer", objectives.enhancer ? "1" : "0");
    kv.set("unet_widths", std::to_string(unet_widths[0]) + "," + std::to_string(unet_widths[1]) +
                              "," + std::to_string(unet_widths[2]));
    kv.set("model_seed", std::to_string(model_seed));
    kv.set("projector_hidden", std::to_string(projector_hidden));
    return kv;
  }

  /// Resolve a configuration: stage defaults, then `kv` on top. A `stage`
  /// key in kv selects the defaults.
  static TrainConfig from_kv(const KeyValueConfig& kv, const std::string& origin = "config") {
    using namespace config_detail;
    kv.require_known(keys(), origin);
    const int stage = kv.has("stage") ? static_cast<int>(to_uint("stage", kv.get("stage"))) : 1;
    TrainConfig c = for_stage(stage);
    auto num = [&](const char* k, double& dst) {
      if (kv.has(k)) dst = to_double(k, kv.get(k));
    };
    auto uint = [&](const char* k, std::size_t& dst) {
      if (kv.has(k)) dst = static_cast<std::size_t>(to_uint(k, kv.get(k)));
    };
    auto flag = [&](const char* k, bool& dst) {
      if (kv.has(k)) dst = to_bool(k, kv.get(k));
    };
    num("lr", c.lr);
    uint("iterations", c.iterations);
    uint("micro_batch", c.micro_batch);
    uint("accum_steps", c.accum_steps);
    num("lambda_fa", c.lambda_fa);
    num("lambda_h", c.lambda_h);
    num("delta", c.delta);
    if (kv.has("huber_form")) c.huber_form = losses::parse_huber_form(kv.get("huber_form"));
    if (kv.has("target_mode")) c.target_mode = preprocess::parse_target_mode(kv.get("target_mode"));
    if (kv.has("seed")) c.seed = to_uint("seed", kv.get("seed"));
    uint("checkpoint_every", c.checkpoint_every);
    uint("eval_every", c.eval_every);
    uint("log_every", c.log_every);
    num("weight_decay", c.weight_decay);
    num("flip_probability", c.flip_probability);
    num("fa_temperature", c.fa_temperature);
    if (kv.has("enhancer_activation")) {
      c.enhancer_activation = parse_activation(kv.get("enhancer_activation"));
    }
    num("p_lo", c.p_lo);
    num("p_hi", c.p_hi);
    flag("loss_latent", c.objectives.latent);
    flag("loss_fa", c.objectives.fa);
    flag("loss_pixel", c.objectives.pixel);
    flag("loss_h", c.objectives.huber);
    flag("enhancer", c.objectives.enhancer);
    // "none" switches alignment off whatever loss_fa says
    if (kv.has("alignment_location")) {
      const std::string loc = kv.get("alignment_location");
      if (loc == "none") {
        c.objectives.fa = false;
      } else {
        c.alignment_location = parse_tap_location(loc);
      }
    }
    if (kv.has("unet_widths")) {
      std::istringstream is(kv.get("unet_widths"));
      std::string part;
      for (std::size_t i = 0; i < 3; ++i) {
        if (!std::getline(is, part, ',')) throw ConfigError("unet_widths: expected three values");
        c.unet_widths[i] = static_cast<std::size_t>(to_uint("unet_widths", part));
      }
    }
    if (kv.has("model_seed")) c.model_seed = to_uint("model_seed", kv.get("model_seed"));
    uint("projector_hidden", c.projector_hidden);
    c.validate();
    return c;
  }

  std::string hash() const { return to_kv().hash(); }

  UNetConfig unet_config(std::size_t latent_channels) const {
    UNetConfig u;
    u.latent_channels = latent_channels;
    u.widths = unet_widths;
    u.seed = model_seed;
    return u;
  }
};

// ---------------------------------------------------------------------------
// Data pipeline
// ---------------------------------------------------------------------------

/// Everything the loss needs for one (sample, flip) pair. The codec and
/// external encoder are frozen, so these are computed once.
template <typename T>
struct CachedItem {
  Tensor<T> z_rgb;     // (1, C_l, h, w)
  Tensor<T> z_gt;      // (1, C_l, h, w)
  Tensor<T> target;    // (1, 1, H, W) normalized target
  std::vector<std::uint8_t> mask;
  Tensor<T> features;  // (1, D, n_h, n_w) or empty
  preprocess::NormParams norm;
};

template <typename T>
class ItemCache {
 public:
  ItemCache(const LatentCodec<T>& codec, std::shared_ptr<const alignment::ExternalEncoder> encoder,
            TargetMode mode, double p_lo, double p_hi)
      : codec_(codec), encoder_(std::move(encoder)), mode_(mode), p_lo_(p_lo), p_hi_(p_hi) {}

  const CachedItem<T>& get(const Sample& base, std::size_t source, std::size_t index, bool flip,
                           bool need_features) {
    const auto key = std::make_tuple(source, index, flip);
    auto it = items_.find(key);
    if (it == items_.end()) it = items_.emplace(key, build(base, flip)).first;
    if (need_features && it->second.features.empty()) {
      if (!encoder_) throw ConfigError("feature alignment requested without an external encoder");
      it->second.features =
          alignment::tokens_to_map<T>(encoder_->features(base, flip));
    }
    return it->second;
  }

  std::size_t size() const { return items_.size(); }

 private:
  CachedItem<T> build(const Sample& base, bool flip) const {
    const Sample s = flip ? dataio::flip_horizontal(base) : base;
    CachedItem<T> item;
    item.z_rgb = codec_.encode(codec::rgb_input<T>(s.rgb));
    const auto norm = codec::normalized_target(s, mode_, p_lo_, p_hi_);
    item.z_gt = codec_.encode(codec::map_input<T>(norm.values));
    item.target = codec::map_tensor<T>(norm.values);
    item.mask = s.mask.data();
    item.norm = norm.params;
    return item;
  }

  LatentCodec<T> codec_;
  std::shared_ptr<const alignment::ExternalEncoder> encoder_;
  TargetMode mode_;
  double p_lo_, p_hi_;
  std::map<std::tuple<std::size_t, std::size_t, bool>, CachedItem<T>> items_;
};

template <typename T>
struct Batch {
  Tensor<T> z_rgb, z_gt, target, features, grad_gt;
  std::vector<std::uint8_t> mask, grad_valid;
};

struct StepLosses {
  double total = 0;
  double latent = 0;
  double fa = 0;
  double pixel = 0;
  double h = 0;
};

/// Dataset-average normalization bounds, stored with checkpoints for
/// inference on images without ground truth.
inline preprocess::NormParams mean_norm_params(const dataio::Mixture& data, TargetMode mode,
                                               double p_lo, double p_hi, std::size_t draws = 128) {
  double lo = 0, hi = 0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < draws; ++k) {
    const auto d = data.draw_at(k);
    const Sample s = data.source(d.source).at(d.index);
    try {
      const auto norm = codec::normalized_target(s, mode, p_lo, p_hi);
      lo += norm.params.lo;
      hi += norm.params.hi;
      ++n;
    } catch (const DegenerateError&) {
    }
  }
  if (n == 0) throw DegenerateError("mean_norm_params: no usable samples");
  return {lo / static_cast<double>(n), hi / static_cast<double>(n), p_lo, p_hi, mode};
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

/// One training run of the U-Net (and projector when feature alignment is
/// on) against a frozen codec and frozen external encoder.
///
/// Item k of the run is `data.draw_at(k)`, flipped according to a
/// counter-based draw, so the sample stream is a pure function of the step
/// and resuming from a checkpoint replays the uninterrupted run exactly.
template <typename T>
class Trainer {
 public:
  Trainer(TrainConfig cfg, LatentCodec<T> codec,
          std::shared_ptr<const alignment::ExternalEncoder> encoder,
          std::shared_ptr<const dataio::Mixture> data, std::optional<UNet<T>> model = std::nullopt)
      : cfg_(std::move(cfg)),
        codec_(std::move(codec)),
        encoder_(std::move(encoder)),
        data_(std::move(data)),
        model_(model ? std::move(*model) : UNet<T>(cfg_.unet_config(codec_.latent_channels()))),
        cache_(codec_, encoder_, cfg_.target_mode, cfg_.p_lo, cfg_.p_hi) {
    cfg_.validate();
    if (!data_) throw ConfigError("Trainer: no training data");
    codec_.freeze();
    codec_hash_ = codec_.hash();
    if (cfg_.objectives.fa) {
      if (!encoder_) throw ConfigError("Trainer: feature alignment needs an external encoder");
      encoder_hash_ = encoder_->hash();
      const auto [channels, div] = model_.tap_geometry(cfg_.alignment_location);
      (void)div;
      projector_.emplace(channels, encoder_->dim(), cfg_.projector_hidden,
                         mix_seed(cfg_.model_seed, 0x9A));
    }
    if (cfg_.objectives.enhancer && !model_.enhancer_enabled()) {
      model_.enable_enhancer(cfg_.enhancer_activation);
    } else if (!cfg_.objectives.enhancer && model_.enhancer_enabled()) {
      throw ConfigError("Trainer: model carries an enhancer but the objective disables it");
    }
    auto params = trainable_parameters();
    set_trainable(params, true);
    optimizer_ = AdamW<T>(params, {cfg_.lr, 0.9, 0.999, 1e-8, cfg_.weight_decay});
  }

  const TrainConfig& config() const { return cfg_; }
  const UNet<T>& model() const { return model_; }
  const LatentCodec<T>& codec() const { return codec_; }
  const std::optional<alignment::Projector<T>>& projector() const { return projector_; }
  std::size_t iteration() const { return iteration_; }
  const StepLosses& last_losses() const { return last_; }

  NamedParameters<T> trainable_parameters() const {
    NamedParameters<T> p = model_.parameters();
    if (projector_) {
      for (auto& [name, v] : projector_->parameters()) p.emplace_back("projector." + name, v);
    }
    return p;
  }

  /// Sample index and flip of stream item k.
  std::pair<dataio::Draw, bool> item(std::uint64_t k) const {
    const auto d = data_->draw_at(k);
    Rng rng(mix_seed(cfg_.seed ^ 0xF11F, k));
    const bool flip = cfg_.flip_probability >= 1.0 ||
                      (cfg_.flip_probability > 0.0 &&
                       std::bernoulli_distribution(cfg_.flip_probability)(rng));
    return {d, flip};
  }

  Batch<T> batch(std::uint64_t first, std::size_t count) {
    std::vector<Tensor<T>> zr, zg, tg, ft;
    Batch<T> b;
    for (std::size_t j = 0; j < count; ++j) {
      const auto [d, flip] = item(first + j);
      const Sample s = data_->source(d.source).at(d.index);
      const auto& it = cache_.get(s, d.source, d.index, flip, cfg_.objectives.fa);
      zr.push_back(it.z_rgb);
      zg.push_back(it.z_gt);
      tg.push_back(it.target);
      if (cfg_.objectives.fa) ft.push_back(it.features);
      b.mask.insert(b.mask.end(), it.mask.begin(), it.mask.end());
    }
    b.z_rgb = stack_batch(zr);
    b.z_gt = stack_batch(zg);
    b.target = stack_batch(tg);
    if (!ft.empty()) b.features = stack_batch(ft);
    if (cfg_.objectives.huber) {
      b.grad_gt = losses::directional_gradients(Var<T>::constant(b.target)).value();
      b.grad_valid = losses::gradient_validity(b.mask, count, b.target.dim(2), b.target.dim(3));
    }
    return b;
  }

  /// Weighted training objective of one micro-batch, with its terms
  /// reported in `l`. No backward pass.
  Var<T> objective(const Batch<T>& b, StepLosses& l) const {
    const auto out = model_.forward(Var<T>::constant(b.z_rgb));
    std::vector<std::pair<Var<T>, T>> terms;
    const auto& o = cfg_.objectives;
    if (o.latent) {
      auto v = losses::mse(out.latent, b.z_gt);
      l.latent = static_cast<double>(v.value()[0]);
      terms.emplace_back(v, T{1});
    }
    if (o.fa) {
      const auto proj = (*projector_)(out.tap(cfg_.alignment_location), b.features.dim(2),
                                      b.features.dim(3));
      auto v = alignment::feature_alignment_loss(proj, b.features, cfg_.fa_temperature);
      l.fa = static_cast<double>(v.value()[0]);
      terms.emplace_back(v, static_cast<T>(cfg_.lambda_fa));
    }
    if (o.needs_decoder()) {
      const auto pred = channel_mean(codec_.decode(out.latent));
      if (o.pixel) {
        auto v = losses::masked_mse(pred, b.target, b.mask);
        l.pixel = static_cast<double>(v.value()[0]);
        terms.emplace_back(v, T{1});
      }
      if (o.huber) {
        auto v = losses::gradient_huber(losses::directional_gradients(pred), b.grad_gt,
                                        b.grad_valid, cfg_.delta, cfg_.huber_form);
        l.h = static_cast<double>(v.value()[0]);
        terms.emplace_back(v, static_cast<T>(cfg_.lambda_h));
      }
    }
    auto total = weighted_sum(terms);
    l.total = static_cast<double>(total.value()[0]);
    return total;
  }

  /// Forward + backward of one micro-batch; gradients are scaled by
  /// `weight` and accumulate into the parameters.
  StepLosses accumulate(const Batch<T>& b, T weight) {
    StepLosses l;
    const auto total = objective(b, l);
    if (!std::isfinite(l.total)) {
      throw NumericalError("non-finite loss at iteration " + std::to_string(iteration_));
    }
    backward(total, weight);
    return l;
  }

  /// One optimizer step over accum_steps micro-batches.
  const StepLosses& step() {
    const std::uint64_t base = static_cast<std::uint64_t>(iteration_) * cfg_.effective_batch();
    StepLosses avg;
    const T w = T{1} / static_cast<T>(cfg_.accum_steps);
    for (std::size_t m = 0; m < cfg_.accum_steps; ++m) {
      const auto l = accumulate(batch(base + m * cfg_.micro_batch, cfg_.micro_batch), w);
      avg.total += l.total;
      avg.latent += l.latent;
      avg.fa += l.fa;
      avg.pixel += l.pixel;
      avg.h += l.h;
    }
    const double n = static_cast<double>(cfg_.accum_steps);
    avg.total /= n;
    avg.latent /= n;
    avg.fa /= n;
    avg.pixel /= n;
    avg.h /= n;
    optimizer_.step();
    ++iteration_;
    last_ = avg;
    return last_;
  }

  /// Codec and external encoder must not change during training.
  void verify_frozen() const {
    if (codec_.hash() != codec_hash_) throw IntegrityError("codec parameters changed during training");
    if (cfg_.objectives.fa && encoder_->hash() != encoder_hash_) {
      throw IntegrityError("external encoder changed during training");
    }
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    codec_.store(ck);
    model_.store(ck);
    if (projector_) ck.store("projector.", projector_->parameters());
    ck.store("opt.", optimizer_.state());
    ck.param_count = parameter_count(model_.parameters());
    ck.meta["kind"] = "denoiser";
    ck.meta["iteration"] = std::to_string(iteration_);
    ck.meta["optimizer_steps"] = std::to_string(optimizer_.steps());
    ck.meta["data_position"] = std::to_string(iteration_ * cfg_.effective_batch());
    ck.meta["codec_hash"] = hex64(codec_hash_);
    ck.meta["encoder"] = encoder_ ? encoder_->name() : "none";
    ck.meta["encoder_hash"] = hex64(encoder_hash_);
    ck.meta["config_hash"] = cfg_.hash();
    ck.meta["target_mode"] = preprocess::to_string(cfg_.target_mode);
    const auto kv = cfg_.to_kv();
    for (const auto& [k, v] : kv.values()) ck.meta["config." + k] = v;
    if (norm_) {
      ck.meta["norm.lo"] = preprocess::format_double(norm_->lo);
      ck.meta["norm.hi"] = preprocess::format_double(norm_->hi);
      ck.meta["norm.p_lo"] = preprocess::format_double(norm_->p_lo);
      ck.meta["norm.p_hi"] = preprocess::format_double(norm_->p_hi);
    }
    return ck;
  }

  /// Restore model, projector, optimizer and stream position from a
  /// checkpoint written by a run with the same configuration.
  void resume(const Checkpoint& ck) {
    if (ck.get("config_hash") != cfg_.hash()) {
      throw IntegrityError("resume: checkpoint config differs from the current config");
    }
    if (ck.get("codec_hash") != hex64(codec_hash_)) {
      throw IntegrityError("resume: checkpoint was trained against a different codec");
    }
    auto mp = model_.parameters();
    ck.restore("unet.", mp);
    if (projector_) {
      auto pp = projector_->parameters();
      ck.restore("projector.", pp);
    }
    NamedParameters<T> state;
    for (const auto& [name, t] : ck.tensors) {
      if (name.rfind("opt.", 0) == 0) state.emplace_back(name.substr(4), Var<T>::constant(t.template cast<T>()));
    }
    optimizer_.load_state(state, std::stoull(ck.get("optimizer_steps")));
    iteration_ = std::stoul(ck.get("iteration"));
  }

  void set_norm_params(preprocess::NormParams p) { norm_ = p; }
  const std::optional<preprocess::NormParams>& norm_params() const { return norm_; }
  std::size_t cached_items() const { return cache_.size(); }

 private:
  TrainConfig cfg_;
  LatentCodec<T> codec_;
  std::shared_ptr<const alignment::ExternalEncoder> encoder_;
  std::shared_ptr<const dataio::Mixture> data_;
  UNet<T> model_;
  std::optional<alignment::Projector<T>> projector_;
  AdamW<T> optimizer_;
  ItemCache<T> cache_;
  std::uint64_t codec_hash_ = 0;
  std::uint64_t encoder_hash_ = 0;
  std::size_t iteration_ = 0;
  StepLosses last_;
  std::optional<preprocess::NormParams> norm_;
};

/// Build a training configuration from a checkpoint's embedded config.
inline TrainConfig config_from_checkpoint(const Checkpoint& ck) {
  KeyValueConfig kv;
  for (const auto& [k, v] : ck.meta) {
    if (k.rfind("config.", 0) == 0) kv.set(k.substr(7), v);
  }
  return TrainConfig::from_kv(kv, "checkpoint");
}

inline preprocess::NormParams norm_from_checkpoint(const Checkpoint& ck) {
  preprocess::NormParams p;
  p.lo = std::stod(ck.get("norm.lo"));
  p.hi = std::stod(ck.get("norm.hi"));
  p.p_lo = std::stod(ck.get_or("norm.p_lo", "2"));
  p.p_hi = std::stod(ck.get_or("norm.p_hi", "98"));
  p.mode = preprocess::parse_target_mode(ck.get("target_mode"));
  return p;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Predicted normalized maps for a list of samples (batched, k passes).
template <typename T>
std::vector<ScalarMap> predict_maps(const UNet<T>& model, const LatentCodec<T>& codec,
                                    const std::vector<RgbImage>& images, std::size_t passes = 1,
                                    std::size_t chunk = 16) {
  std::vector<ScalarMap> out;
  for (std::size_t b = 0; b < images.size(); b += chunk) {
    std::vector<Tensor<T>> xs;
    for (std::size_t i = b; i < std::min(images.size(), b + chunk); ++i) {
      xs.push_back(codec::rgb_input<T>(images[i]));
    }
    const Tensor<T> z = model.infer_iterative(codec.encode(stack_batch(xs)), passes);
    const Tensor<T> x = codec.decode(z);
    for (std::size_t i = 0; i < xs.size(); ++i) out.push_back(codec::averaged_map(x, i));
  }
  return out;
}

/// Predict, map back to depth with each sample's own normalization bounds,
/// align and score.
template <typename T>
metrics::MetricsReport evaluate(const UNet<T>& model, const LatentCodec<T>& codec,
                                const std::vector<Sample>& samples, TargetMode mode,
                                const std::string& dataset, const metrics::EvalConfig& eval = {},
                                std::size_t passes = 1, const std::string& config_hash = {},
                                double p_lo = 2.0, double p_hi = 98.0) {
  if (samples.empty()) throw ConfigError("evaluate: no samples");
  std::vector<RgbImage> images;
  for (const auto& s : samples) images.push_back(s.rgb);
  const auto maps = predict_maps(model, codec, images, passes);
  std::vector<metrics::SampleMetrics> rows;
  std::vector<std::string> notes;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    try {
      const auto norm = codec::normalized_target(s, mode, p_lo, p_hi);
      const DepthMap pred = preprocess::prediction_to_depth(maps[i], norm.params);
      rows.push_back(metrics::evaluate_sample(pred, s.depth, s.mask, eval, s.id));
    } catch (const DegenerateError& e) {
      notes.push_back(s.id + ": excluded (" + e.what() + ")");
    }
  }
  auto report = metrics::aggregate(dataset, rows, eval, config_hash);
  report.notes = std::move(notes);
  return report;
}

// ---------------------------------------------------------------------------
// Run driver: logging, checkpoints, best-by-validation
// ---------------------------------------------------------------------------

struct RunOptions {
  std::filesystem::path out_dir;
  std::vector<Sample> validation;  // empty: no best-by-validation tracking
  std::string validation_name = "val";
  bool resume = false;
  bool verbose = false;
};

struct RunResult {
  std::size_t iterations = 0;
  std::optional<double> best_abs_rel;
  std::size_t best_iteration = 0;
  std::filesystem::path last_checkpoint;
  std::filesystem::path best_checkpoint;
};

inline constexpr const char* kRunLogHeader = "step,loss_total,loss_latent,loss_fa,loss_pixel,loss_h";

/// Keep only run.log rows with step <= `upto` (used when resuming).
inline void truncate_run_log(const std::filesystem::path& path, std::size_t upto) {
  std::ifstream in(path);
  std::vector<std::string> keep{kRunLogHeader};
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    if (std::stoul(line.substr(0, comma)) <= upto) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

/// Train to cfg.iterations, writing run.log, config.resolved, periodic
/// checkpoints (ckpt_<step>.ckpt, last.ckpt) and best.ckpt under out_dir.
template <typename T>
RunResult run_training(Trainer<T>& trainer, const RunOptions& opt) {
  namespace fs = std::filesystem;
  const auto& cfg = trainer.config();
  fs::create_directories(opt.out_dir);
  cfg.to_kv().write(opt.out_dir / "config.resolved");
  const fs::path log_path = opt.out_dir / "run.log";
  const fs::path last_path = opt.out_dir / "last.ckpt";
  const fs::path best_path = opt.out_dir / "best.ckpt";
  RunResult result;
  if (opt.resume && fs::exists(last_path)) {
    trainer.resume(Checkpoint::load(last_path));
    truncate_run_log(log_path, trainer.iteration());
    if (fs::exists(opt.out_dir / "best.txt")) {
      std::ifstream b(opt.out_dir / "best.txt");
      double v;
      std::size_t it;
      if (b >> v >> it) {
        result.best_abs_rel = v;
        result.best_iteration = it;
      }
    }
  } else {
    std::ofstream(log_path, std::ios::trunc) << kRunLogHeader << '\n';
  }
  std::ofstream log(log_path, std::ios::app);
  log.precision(9);
  const auto t0 = std::chrono::steady_clock::now();

  auto validate_and_keep_best = [&](const Checkpoint& ck) {
    if (opt.validation.empty()) return;
    const auto r = evaluate(trainer.model(), trainer.codec(), opt.validation, cfg.target_mode,
                            opt.validation_name, {}, 1, cfg.hash(), cfg.p_lo, cfg.p_hi);
    if (!result.best_abs_rel || r.abs_rel < *result.best_abs_rel) {
      result.best_abs_rel = r.abs_rel;
      result.best_iteration = trainer.iteration();
      ck.save(best_path);
      std::ofstream(opt.out_dir / "best.txt", std::ios::trunc)
          << preprocess::format_double(r.abs_rel) << ' ' << trainer.iteration() << '\n';
    }
  };

  auto save = [&](bool final_step) {
    trainer.verify_frozen();
    const Checkpoint ck = trainer.checkpoint();
    if (cfg.checkpoint_every && trainer.iteration() % cfg.checkpoint_every == 0) {
      ck.save(opt.out_dir / ("ckpt_" + std::to_string(trainer.iteration()) + ".ckpt"));
    }
    ck.save(last_path);
    if (final_step || (cfg.eval_every && trainer.iteration() % cfg.eval_every == 0)) {
      validate_and_keep_best(ck);
    }
  };

  while (trainer.iteration() < cfg.iterations) {
    StepLosses l;
    try {
      l = trainer.step();
    } catch (const NumericalError& e) {
      throw NumericalError(std::string(e.what()) + "; last good checkpoint: " +
                           (fs::exists(last_path) ? last_path.string() : std::string("none")));
    }
    const std::size_t it = trainer.iteration();
    if (it % std::max<std::size_t>(cfg.log_every, 1) == 0 || it == cfg.iterations || it == 1) {
      log << it << ',' << l.total << ',' << l.latent << ',' << l.fa << ',' << l.pixel << ','
          << l.h << '\n';
      log.flush();
      if (opt.verbose) {
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::fprintf(stderr, "[stage %d] step %zu/%zu loss %.6f (%.1fs)\n", cfg.stage, it,
                     cfg.iterations, l.total, s);
      }
    }
    const bool final_step = it == cfg.iterations;
    if (final_step || (cfg.checkpoint_every && it % cfg.checkpoint_every == 0) ||
        (cfg.eval_every && it % cfg.eval_every == 0)) {
      save(final_step);
    }
  }
  result.iterations = trainer.iteration();
  result.last_checkpoint = last_path;
  if (fs::exists(best_path)) result.best_checkpoint = best_path;
  return result;
}

}  // namespace depthmaster::training
