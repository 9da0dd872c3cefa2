// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one PASS/FAIL line per criterion, exit status 0 only
// when every selected criterion passes. Criteria 7 and 8 share the
// desk-scale training run; 9 trains its own outdoor models.

#include <chrono>
#include <complex>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "depthmaster.hpp"
#include "depthmaster/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace depthmaster;
using dataio::DomainTag;
using preprocess::TargetMode;

namespace {

struct Budget {
  std::size_t codec_iterations = 2000;
  std::size_t stage1_iterations = 4000;
  std::size_t stage2_iterations = 500;
  std::size_t detail_iterations = 300;
  std::size_t detail_stage2_iterations = 300;
  std::size_t vote_iterations = 600;
  std::size_t train_samples = 512;
  std::size_t val_samples = 64;
};

struct Outcome {
  bool pass = false;
  std::string detail;
};

double rel_err(double got, double want) {
  return std::abs(got - want) / std::max({std::abs(got), std::abs(want), 1e-300});
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

ScalarMap random_map(std::size_t h, std::size_t w, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  ScalarMap m(h, w);
  for (auto& v : m.data()) v = static_cast<float>(u(rng));
  return m;
}

ValidityMask random_mask(std::size_t h, std::size_t w, Rng& rng, double keep) {
  std::bernoulli_distribution b(keep);
  ValidityMask m(h, w);
  for (auto& v : m.data()) v = b(rng) ? 1 : 0;
  m[0] = 1;
  m[m.pixels() - 1] = 1;
  return m;
}

Tensor<double> map_tensor(const ScalarMap& m) {
  Tensor<double> t(Shape{1, 1, m.height(), m.width()});
  for (std::size_t k = 0; k < m.pixels(); ++k) t[k] = m[k];
  return t;
}

Tensor<double> random_tensor(const Shape& s, Rng& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(s);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

std::shared_ptr<dataio::Mixture> mixture(const std::vector<Sample>& indoor, const std::vector<Sample>& outdoor,
                                         std::uint64_t seed) {
  std::vector<std::shared_ptr<const dataio::SampleSource>> sources;
  std::vector<double> ratios;
  if (!indoor.empty()) {
    sources.push_back(std::make_shared<dataio::VectorSource>("indoor_like", indoor));
    ratios.push_back(9);
  }
  if (!outdoor.empty()) {
    sources.push_back(std::make_shared<dataio::VectorSource>("outdoor_like", outdoor));
    ratios.push_back(1);
  }
  return std::make_shared<dataio::Mixture>(sources, ratios, seed);
}

// ---------------------------------------------------------------------------
// 1. formula oracles
// ---------------------------------------------------------------------------

/// Brute-force KL(softmax(a/T) || softmax(b/T)) for one token.
double kl_oracle(const std::vector<double>& a, const std::vector<double>& b, double temp) {
  double ma = -INFINITY, mb = -INFINITY;
  for (double v : a) ma = std::max(ma, v / temp);
  for (double v : b) mb = std::max(mb, v / temp);
  double za = 0, zb = 0;
  for (double v : a) za += std::exp(v / temp - ma);
  for (double v : b) zb += std::exp(v / temp - mb);
  double kl = 0;
  for (std::size_t d = 0; d < a.size(); ++d) {
    const double p = std::exp(a[d] / temp - ma) / za, q = std::exp(b[d] / temp - mb) / zb;
    kl += p * std::log(p / q);
  }
  return kl;
}

Outcome formula_oracles() {
  Rng rng(101);
  const int instances = 120;
  std::map<std::string, double> worst;
  auto track = [&](const std::string& name, double got, double want) {
    worst[name] = std::max(worst[name], rel_err(got, want));
  };
  std::uniform_int_distribution<std::size_t> side(3, 9);
  const int di[4] = {0, 1, 1, 1}, dj[4] = {1, 0, 1, -1};

  for (int trial = 0; trial < instances; ++trial) {
    const std::size_t H = side(rng), W = side(rng);

    // latent MSE
    const auto za = random_tensor({2, 4, H, W}, rng), zb = random_tensor({2, 4, H, W}, rng);
    double m = 0;
    for (std::size_t i = 0; i < za.size(); ++i) m += (za[i] - zb[i]) * (za[i] - zb[i]);
    m /= static_cast<double>(za.size());
    track("latent_mse", losses::latent_loss(za, zb), m);
    track("latent_mse", losses::mse(Var<double>::constant(zb), za).value()[0], m);

    // masked pixel MSE
    const auto gt = random_map(H, W, rng, -1, 1), pred = random_map(H, W, rng, -1, 1);
    const auto mask = random_mask(H, W, rng, 0.8);
    double p = 0;
    int n = 0;
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j)
        if (mask(i, j)) {
          p += (double(gt(i, j)) - pred(i, j)) * (double(gt(i, j)) - pred(i, j));
          ++n;
        }
    p /= n;
    track("pixel_mse", losses::pixel_loss(gt, pred, mask), p);
    track("pixel_mse", losses::masked_mse(Var<double>::constant(map_tensor(pred)), map_tensor(gt), mask.data())
                           .value()[0], p);

    // directional gradients
    const auto stack = losses::directional_gradients(gt, mask);
    double g_worst = 0;
    for (int i = 0; i < int(H); ++i)
      for (int j = 0; j < int(W); ++j)
        for (int k = 0; k < 4; ++k) {
          const int a = i + di[k], b = j + dj[k];
          const bool valid = a >= 0 && b >= 0 && a < int(H) && b < int(W) && mask(i, j) && mask(a, b);
          const auto e = (static_cast<std::size_t>(i) * W + j) * 4 + k;
          if (valid != (stack.valid[e] != 0)) g_worst = INFINITY;
          if (!valid) continue;
          const double want = double(gt(a, b)) - gt(i, j);
          if (want != 0 || stack.data[e] != 0) g_worst = std::max(g_worst, rel_err(stack.data[e], want));
        }
    worst["directional_gradients"] = std::max(worst["directional_gradients"], g_worst);

    // gradient Huber, both forms, raster and autograd
    const double delta = std::uniform_real_distribution<double>(0.05, 0.5)(rng);
    for (auto form : {losses::HuberForm::linear_inside, losses::HuberForm::classical}) {
      double acc = 0;
      int cnt = 0;
      for (int i = 0; i < int(H); ++i)
        for (int j = 0; j < int(W); ++j)
          for (int k = 0; k < 4; ++k) {
            const int a = i + di[k], b = j + dj[k];
            if (a < 0 || b < 0 || a >= int(H) || b >= int(W) || !mask(i, j) || !mask(a, b)) continue;
            const double x = std::abs((double(gt(a, b)) - gt(i, j)) - (double(pred(a, b)) - pred(i, j)));
            if (form == losses::HuberForm::linear_inside) {
              acc += x <= delta ? delta * x : 0.5 * x * x + 0.5 * delta * delta;
            } else {
              acc += x <= delta ? 0.5 * x * x : delta * (x - 0.5 * delta);
            }
            ++cnt;
          }
      const double want = acc / cnt;
      track("gradient_huber",
            losses::gradient_huber_loss(stack, losses::directional_gradients(pred, mask), delta, form), want);
      const auto g_var = losses::directional_gradients(Var<double>::constant(map_tensor(gt))).value();
      const auto v = losses::gradient_huber(losses::directional_gradients(Var<double>::constant(map_tensor(pred))),
                                            g_var, losses::gradient_validity(mask.data(), 1, H, W), delta, form);
      track("gradient_huber", v.value()[0], want);
    }

    // AbsRel and delta1 on positive depths
    const DepthMap d_gt(H, W, random_map(H, W, rng, 0.3, 20).data());
    const DepthMap d_pred(H, W, random_map(H, W, rng, 0.3, 20).data());
    double ar = 0;
    int hits = 0, valid = 0;
    for (std::size_t k = 0; k < d_gt.pixels(); ++k) {
      if (!mask[k]) continue;
      const double g = d_gt[k], q = d_pred[k];
      ar += std::abs(g - q) / g;
      hits += std::max(q / g, g / q) < 1.25;
      ++valid;
    }
    track("abs_rel", metrics::abs_rel(d_pred, d_gt, mask) / 100.0, ar / valid);
    track("delta1", metrics::delta1(d_pred, d_gt, mask) / 100.0, double(hits) / valid);

    // KL alignment, token and map forms
    const std::size_t N = side(rng), D = std::uniform_int_distribution<std::size_t>(2, 16)(rng);
    const double temps[3] = {0.5, 1.0, 2.0};
    const double temp = temps[trial % 3];
    alignment::TokenFeatures ext{Tensor<float>(Shape{N, D}), 8, 1, N}, prj{Tensor<float>(Shape{N, D}), 8, 1, N};
    std::uniform_real_distribution<double> u(-3, 3);
    for (auto& v : ext.data.values()) v = static_cast<float>(u(rng));
    for (auto& v : prj.data.values()) v = static_cast<float>(u(rng));
    double kl = 0;
    for (std::size_t t = 0; t < N; ++t) {
      std::vector<double> a(D), b(D);
      for (std::size_t d = 0; d < D; ++d) {
        a[d] = ext.data[t * D + d];
        b[d] = prj.data[t * D + d];
      }
      kl += kl_oracle(a, b, temp);
    }
    kl /= static_cast<double>(N);
    track("kl_alignment", alignment::feature_alignment_loss(ext, prj, temp), kl);
    track("kl_alignment",
          alignment::feature_alignment_loss(Var<double>::constant(alignment::tokens_to_map<double>(prj)),
                                            alignment::tokens_to_map<double>(ext), temp)
              .value()[0],
          kl);
  }

  Outcome o{true, std::to_string(instances) + " instances;"};
  for (const auto& [name, w] : worst) {
    o.pass = o.pass && w <= 1e-6;
    o.detail += " " + name + "=" + fmt("%.1e", w);
  }
  return o;
}

// ---------------------------------------------------------------------------
// 2. Huber knee
// ---------------------------------------------------------------------------

Outcome huber_continuity() {
  double knee_worst = 0, jump_worst = 0;
  const int n = 10000;
  for (double delta : {0.01, 0.1, 1.0}) {
    // inner branch at the knee, outer branch one ulp past it
    const double inner = losses::huber_value(delta, delta);
    const double outer = losses::huber_value(std::nextafter(delta, INFINITY), delta);
    const double inner_neg = losses::huber_value(-delta, delta);
    const double outer_neg = losses::huber_value(std::nextafter(-delta, -INFINITY), delta);
    for (double v : {inner, outer, inner_neg, outer_neg}) knee_worst = std::max(knee_worst, std::abs(v - delta * delta));

    // 10^4 residuals straddling |x| = delta on both signs: no step larger
    // than the local slope allows
    for (double sign : {1.0, -1.0}) {
      double prev_x = sign * delta * 0.99, prev = losses::huber_value(prev_x, delta);
      for (int k = 1; k <= n; ++k) {
        const double x = sign * delta * (0.99 + 0.02 * k / n);
        const double v = losses::huber_value(x, delta);
        const double bound = std::max(std::abs(x), delta) * std::abs(x - prev_x);
        jump_worst = std::max(jump_worst, std::abs(v - prev) - bound);
        prev = v;
        prev_x = x;
      }
    }
  }
  return {knee_worst <= 1e-9 && jump_worst <= 1e-12,
          "knee error " + fmt("%.1e", knee_worst) + ", excess jump " + fmt("%.1e", std::max(jump_worst, 0.0))};
}

// ---------------------------------------------------------------------------
// 3. FFT module
// ---------------------------------------------------------------------------

Outcome fft_module() {
  Rng rng(303);
  // identity modulator on mid-block features of the default U-Net
  const auto s = dataio::generate_scene(17, DomainTag::indoor_like);
  CodecConfig cc;
  const LatentCodec<float> codec(cc);
  const UNet<float> model(training::TrainConfig::for_stage(1).unet_config(cc.latent_channels));
  const auto mid = model.forward(Var<float>::constant(codec.encode(codec::rgb_input<float>(s.rgb)))).tap(TapLocation::Mid);
  FrequencyEnhancer<float> fe(mid.shape()[1], Activation::identity, rng);
  fe.set_identity_modulator();
  const auto back = fe.frequency_pass(mid).value();
  double num = 0, den = 0;
  for (std::size_t k = 0; k < back.size(); ++k) {
    num = std::max(num, double(std::abs(back[k] - mid.value()[k])));
    den = std::max(den, double(std::abs(mid.value()[k])));
  }
  const double identity = num / den;

  // 4x4 transform against the direct DFT
  const double two_pi = 2.0 * std::acos(-1.0);
  double dft_worst = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto x = random_tensor({1, 1, 4, 4}, rng);
    const auto sp = spectrum(Var<double>::constant(x)).value();
    for (std::size_t u = 0; u < 4; ++u)
      for (std::size_t v = 0; v < 4; ++v) {
        std::complex<double> acc = 0;
        for (std::size_t i = 0; i < 4; ++i)
          for (std::size_t j = 0; j < 4; ++j)
            acc += x[i * 4 + j] * std::polar(1.0, -two_pi * double(u * i + v * j) / 4.0);
        dft_worst = std::max({dft_worst, std::abs(sp[u * 4 + v] - acc.real()), std::abs(sp[16 + u * 4 + v] - acc.imag())});
      }
  }

  // Parseval on float features: sum |X|^2 = HW sum |x|^2
  double parseval = 0;
  for (const auto& t : {mid.value(), [&] {
                          Tensor<float> r(Shape{2, 3, 8, 8});
                          std::normal_distribution<float> g(0, 2);
                          for (auto& v : r.values()) v = g(rng);
                          return r;
                        }()}) {
    const auto sp = spectrum(Var<float>::constant(t)).value();
    double ex = 0, es = 0;
    for (float v : t.values()) ex += double(v) * v;
    for (float v : sp.values()) es += double(v) * v;
    parseval = std::max(parseval, rel_err(es, double(t.dim(2) * t.dim(3)) * ex));
  }
  return {identity <= 1e-5 && dft_worst <= 1e-6 && parseval <= 1e-4,
          "identity " + fmt("%.1e", identity) + ", dft " + fmt("%.1e", dft_worst) + ", parseval " +
              fmt("%.1e", parseval)};
}

// ---------------------------------------------------------------------------
// 4. gradient checks of both stage objectives
// ---------------------------------------------------------------------------

Outcome gradient_checks() {
  dataio::SceneOptions so;
  so.height = so.width = 32;  // 8x8 latents
  auto data = mixture(dataio::generate_many(400, DomainTag::indoor_like, 4, so),
                      dataio::generate_many(450, DomainTag::outdoor_like, 2, so), 4);
  CodecConfig cc;
  cc.width_full = 8;
  cc.width_down = 16;
  cc.groups = 4;
  const auto codec = LatentCodec<float>(cc).cast<double>();
  const auto encoder = std::make_shared<alignment::PatchEncoder>(alignment::PatchEncoderConfig{8, 16, 8, 3});
  std::string detail;
  bool pass = true;
  std::optional<UNet<double>> stage1_model;
  for (int stage : {1, 2}) {
    auto cfg = training::TrainConfig::for_stage(stage);
    cfg.unet_widths = {8, 8, 8};
    cfg.projector_hidden = 8;
    cfg.micro_batch = 2;
    cfg.accum_steps = 1;
    training::Trainer<double> trainer(cfg, codec, stage == 1 ? encoder : nullptr, data,
                                      stage == 2 ? stage1_model : std::nullopt);
    if (stage == 1) stage1_model = trainer.model().clone();
    const auto batch = trainer.batch(0, 2);
    const auto r = gradient_check(
        trainer.trainable_parameters(),
        [&] {
          training::StepLosses l;
          return trainer.objective(batch, l);
        },
        {1e-6, 1e-3, 1e-9, 6, 17});
    pass = pass && r.pass_fraction() >= 0.99;
    detail += (stage == 1 ? "" : "; ") + std::string("stage ") + std::to_string(stage) + " " +
              std::to_string(r.passed) + "/" + std::to_string(r.entries.size()) + " within 1e-3";
  }
  return {pass, detail};
}

// ---------------------------------------------------------------------------
// 5. alignment absorbs scale and shift
// ---------------------------------------------------------------------------

Outcome alignment_absorption() {
  double worst_abs_rel = 0, worst_d1 = 100;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto s = dataio::generate_scene(seed, seed % 2 ? DomainTag::outdoor_like : DomainTag::indoor_like);
    for (double a : {0.5, 2.0, 10.0})
      for (double b : {-3.0, 0.0, 3.0}) {
        DepthMap pred(s.depth.height(), s.depth.width());
        for (std::size_t k = 0; k < pred.pixels(); ++k) pred[k] = static_cast<float>(a * s.depth[k] + b);
        const auto al = metrics::affine_align(pred, s.depth, s.mask);
        worst_abs_rel = std::max(worst_abs_rel, metrics::abs_rel(al.aligned, s.depth, s.mask) / 100.0);
        worst_d1 = std::min(worst_d1, metrics::delta1(al.aligned, s.depth, s.mask));
      }
  }
  return {worst_abs_rel <= 1e-6 && worst_d1 == 100.0,
          "worst AbsRel " + fmt("%.1e", worst_abs_rel) + ", worst delta1 " + fmt("%.1f", worst_d1)};
}

// ---------------------------------------------------------------------------
// 6. round trips
// ---------------------------------------------------------------------------

Outcome round_trips(const fs::path& work) {
  // preprocessing chain on unclamped valid pixels
  double chain = 0;
  std::size_t checked = 0;
  for (std::uint64_t seed = 0; seed < 16; ++seed) {
    const auto s = dataio::generate_scene(seed, seed % 4 ? DomainTag::indoor_like : DomainTag::outdoor_like);
    for (auto mode : {TargetMode::depth, TargetMode::disparity, TargetMode::sqrt_disparity}) {
      const auto norm = preprocess::normalize_percentile(preprocess::depth_to_target(s.depth, s.mask, mode), s.mask,
                                                         2, 98, mode);
      const auto back = preprocess::target_to_depth(preprocess::denormalize(norm.values, norm.params), mode);
      for (std::size_t k = 0; k < back.pixels(); ++k) {
        if (!s.mask[k] || std::abs(norm.values[k]) >= 1.0f) continue;
        chain = std::max(chain, rel_err(back[k], s.depth[k]));
        ++checked;
      }
    }
  }

  // PFM bytes, including denormals and extremes
  fs::create_directories(work);
  Rng rng(606);
  bool pfm_exact = true;
  for (int trial = 0; trial < 8; ++trial) {
    const std::size_t h = 1 + trial, w = 9 - trial;
    DepthMap d(h, w);
    std::uniform_real_distribution<float> u(-1e6f, 1e6f);
    for (auto& v : d.data()) v = u(rng);
    d[0] = std::numeric_limits<float>::denorm_min();
    d[d.pixels() - 1] = std::numeric_limits<float>::max();
    const auto path = work / ("trip_" + std::to_string(trial) + ".pfm");
    pnm::write_pfm(path, d);
    const auto back = pnm::read_pfm(path);
    pfm_exact = pfm_exact && back.height() == h && back.width() == w &&
                std::memcmp(back.data().data(), d.data().data(), d.pixels() * sizeof(float)) == 0 &&
                pnm::encode_pfm(back) == pnm::encode_pfm(d);
  }

  // checkpoint resume: 12 straight steps == 6 steps, save, load, resume, 6 steps
  dataio::SceneOptions so;
  so.height = so.width = 32;
  auto data = mixture(dataio::generate_many(600, DomainTag::indoor_like, 6, so),
                      dataio::generate_many(650, DomainTag::outdoor_like, 3, so), 6);
  CodecConfig cc;
  cc.width_full = 8;
  cc.width_down = 16;
  cc.groups = 4;
  const LatentCodec<float> codec(cc);
  const auto encoder = std::make_shared<alignment::PatchEncoder>(alignment::PatchEncoderConfig{8, 16, 8, 3});
  auto cfg = training::TrainConfig::for_stage(1);
  cfg.unet_widths = {8, 16, 16};
  cfg.projector_hidden = 16;
  cfg.micro_batch = 2;
  cfg.accum_steps = 2;
  cfg.lr = 1e-3;
  cfg.iterations = 12;
  training::Trainer<float> straight(cfg, codec, encoder, data);
  training::Trainer<float> first(cfg, codec, encoder, data);
  for (int k = 0; k < 12; ++k) straight.step();
  for (int k = 0; k < 6; ++k) first.step();
  first.checkpoint().save(work / "half.ckpt");
  training::Trainer<float> resumed(cfg, codec, encoder, data);
  resumed.resume(Checkpoint::load(work / "half.ckpt"));
  for (int k = 0; k < 6; ++k) resumed.step();
  bool resume_exact = straight.iteration() == resumed.iteration();
  const auto a = straight.trainable_parameters(), b = resumed.trainable_parameters();
  resume_exact = resume_exact && a.size() == b.size();
  for (std::size_t i = 0; resume_exact && i < a.size(); ++i) {
    const auto& x = a[i].second.value();
    const auto& y = b[i].second.value();
    resume_exact = x.size() == y.size() && std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) == 0;
  }
  resume_exact = resume_exact && straight.checkpoint().encode() == resumed.checkpoint().encode();

  return {chain <= 1e-5 && checked > 0 && pfm_exact && resume_exact,
          "chain " + fmt("%.1e", chain) + " over " + std::to_string(checked) + " px, pfm " +
              (pfm_exact ? "bit-exact" : "MISMATCH") + ", resume " + (resume_exact ? "bit-exact" : "MISMATCH")};
}

// ---------------------------------------------------------------------------
// 7 and 8: desk-scale training and the detail ablation
// ---------------------------------------------------------------------------

struct Desk {
  std::vector<Sample> train, val;
  std::shared_ptr<dataio::Mixture> data;
  std::optional<LatentCodec<float>> codec;
  std::shared_ptr<const alignment::ExternalEncoder> encoder;
  std::optional<UNet<float>> stage1;
  training::TrainConfig stage1_cfg = training::TrainConfig::for_stage(1);
  std::vector<std::string> notes;
};

void build_desk(Desk& d, const Budget& budget, const fs::path& work) {
  if (d.codec) return;
  const auto n_out = budget.train_samples / 10, v_out = budget.val_samples / 10;
  auto indoor = dataio::generate_many(1000, DomainTag::indoor_like, budget.train_samples - n_out);
  auto outdoor = dataio::generate_many(50000, DomainTag::outdoor_like, n_out);
  d.train = indoor;
  d.train.insert(d.train.end(), outdoor.begin(), outdoor.end());
  d.data = mixture(indoor, outdoor, 0xDA7A);
  d.val = dataio::generate_many(90000, DomainTag::indoor_like, budget.val_samples - v_out);
  auto vo = dataio::generate_many(95000, DomainTag::outdoor_like, v_out);
  d.val.insert(d.val.end(), vo.begin(), vo.end());
  d.encoder = std::make_shared<alignment::PatchEncoder>();

  const auto codec_path = work / "codec.ckpt";
  if (fs::exists(codec_path)) {
    d.codec = LatentCodec<float>::restore(Checkpoint::load(codec_path));
    d.notes.push_back("codec reused from " + codec_path.string());
  } else {
    LatentCodec<float> codec{CodecConfig{}};
    CodecTrainConfig tc;
    tc.iterations = budget.codec_iterations;
    train_codec(codec, d.train, tc);
    Checkpoint ck;
    codec.store(ck);
    fs::create_directories(work);
    ck.save(codec_path);
    d.codec = codec;
  }
  const auto rec = reconstruction_eval(*d.codec, d.val, TargetMode::sqrt_disparity, "val");
  d.notes.push_back("codec reconstruction AbsRel " + fmt("%.2f", rec.abs_rel) + "%");
}

metrics::MetricsReport eval_model(const UNet<float>& model, const Desk& d, const training::TrainConfig& cfg) {
  return training::evaluate(model, *d.codec, d.val, cfg.target_mode, "val", {}, 1, cfg.hash(), cfg.p_lo, cfg.p_hi);
}

Outcome desk_training(Desk& d, const Budget& budget, const fs::path& work) {
  const auto t0 = std::chrono::steady_clock::now();
  build_desk(d, budget, work);
  auto cfg = training::TrainConfig::for_stage(1);
  cfg.iterations = budget.stage1_iterations;
  cfg.checkpoint_every = 1000;
  cfg.eval_every = 1000;
  d.stage1_cfg = cfg;
  training::Trainer<float> trainer(cfg, *d.codec, d.encoder, d.data);
  trainer.set_norm_params(training::mean_norm_params(*d.data, cfg.target_mode, cfg.p_lo, cfg.p_hi));
  const auto before = eval_model(trainer.model(), d, cfg);
  training::RunOptions run;
  run.out_dir = work / "stage1";
  run.validation = d.val;
  training::run_training(trainer, run);
  d.stage1 = trainer.model().clone();
  const auto after = eval_model(*d.stage1, d, cfg);
  const double minutes = seconds_since(t0) / 60.0;
  const double reduction = 1.0 - after.abs_rel / before.abs_rel;
  return {reduction >= 0.5 && minutes <= 60.0,
          "val AbsRel " + fmt("%.2f", before.abs_rel) + " -> " + fmt("%.2f", after.abs_rel) + " (" +
              fmt("%.0f", 100 * reduction) + "% lower), " + std::to_string(cfg.iterations) + " steps, " +
              fmt("%.1f", minutes) + " min"};
}

Outcome detail_ablation(Desk& d, const Budget& budget, const fs::path& work) {
  if (!d.stage1) {
    // no stage-1 run this session: reuse the one on disk
    build_desk(d, budget, work);
    const auto ck = Checkpoint::load(work / "stage1" / "last.ckpt");
    d.stage1 = UNet<float>::restore(ck);
    d.stage1_cfg = training::config_from_checkpoint(ck);
  }
  auto cfg2 = training::TrainConfig::for_stage(2);
  cfg2.target_mode = d.stage1_cfg.target_mode;
  cfg2.iterations = budget.stage2_iterations;
  cfg2.checkpoint_every = 0;
  cfg2.eval_every = 0;
  training::Trainer<float> trainer(cfg2, *d.codec, nullptr, d.data, d.stage1->clone());
  trainer.set_norm_params(training::mean_norm_params(*d.data, cfg2.target_mode, cfg2.p_lo, cfg2.p_hi));
  training::RunOptions run;
  run.out_dir = work / "stage2";
  training::run_training(trainer, run);
  const auto f1_stage1 = eval_model(*d.stage1, d, d.stage1_cfg).edge_f1;
  const auto f1_stage2 = eval_model(trainer.model(), d, cfg2).edge_f1;

  training::AblationContext ctx;
  ctx.codec = *d.codec;
  ctx.encoder = d.encoder;
  ctx.data = d.data;
  ctx.eval.push_back({"val", d.val});
  ctx.stage1.iterations = budget.detail_iterations;
  ctx.stage2.iterations = budget.detail_stage2_iterations;
  for (auto* c : {&ctx.stage1, &ctx.stage2}) {
    c->checkpoint_every = 0;
    c->eval_every = 0;
  }
  ctx.out_dir = work / "detail";
  const auto table = training::run_ablation("detail", ctx);
  plot::write_text(work / "detail.md", table.markdown());
  plot::write_text(work / "detail.json", table.to_json().dump(2) + "\n");
  plot::write_text(work / "detail.svg", plot::table_chart(table));
  bool labels = true;
  for (const char* label : {"M.Base", "M.Pixel", "M.Huber", "M.FE_Huber", "M.Full"}) {
    try {
      table.row(label);
    } catch (const ConfigError&) {
      labels = false;
    }
  }
  return {f1_stage2 > f1_stage1 && labels,
          "edge F1 stage 1 " + fmt("%.4f", f1_stage1) + " -> stage 2 " + fmt("%.4f", f1_stage2) +
              ", detail table " + (labels ? "complete" : "missing rows") + " (" + (work / "detail.md").string() + ")"};
}

// ---------------------------------------------------------------------------
// 9. target mode vote on outdoor data
// ---------------------------------------------------------------------------

Outcome target_mode_vote(const Desk& d, const Budget& budget, const fs::path& work) {
  const auto train = dataio::generate_many(70000, DomainTag::outdoor_like, 128);
  const auto val = dataio::generate_many(80000, DomainTag::outdoor_like, 32);
  auto data = mixture({}, train, 0x0D);
  const LatentCodec<float> codec = d.codec ? *d.codec : [&] {
    LatentCodec<float> c{CodecConfig{}};
    CodecTrainConfig tc;
    tc.iterations = budget.codec_iterations;
    train_codec(c, train, tc);
    return c;
  }();
  const auto encoder = std::make_shared<alignment::PatchEncoder>();
  int agree = 0;
  std::string detail;
  std::ofstream log(work / "target_mode_vote.txt", std::ios::trunc);
  for (std::uint64_t seed : {1, 2, 3}) {
    std::map<TargetMode, double> abs_rel;
    for (auto mode : {TargetMode::depth, TargetMode::disparity, TargetMode::sqrt_disparity}) {
      auto cfg = training::TrainConfig::for_stage(1);
      cfg.target_mode = mode;
      cfg.seed = seed;
      cfg.model_seed = seed + 1;
      cfg.iterations = budget.vote_iterations;
      training::Trainer<float> trainer(cfg, codec, encoder, data);
      for (std::size_t k = 0; k < cfg.iterations; ++k) trainer.step();
      abs_rel[mode] = training::evaluate(trainer.model(), codec, val, mode, "outdoor_val", {}, 1, cfg.hash(),
                                         cfg.p_lo, cfg.p_hi)
                          .abs_rel;
    }
    const bool ok = abs_rel[TargetMode::sqrt_disparity] <= abs_rel[TargetMode::disparity] &&
                    abs_rel[TargetMode::disparity] <= abs_rel[TargetMode::depth];
    agree += ok;
    const std::string row = "seed " + std::to_string(seed) + ": sqrt_disparity " +
                            fmt("%.2f", abs_rel[TargetMode::sqrt_disparity]) + ", disparity " +
                            fmt("%.2f", abs_rel[TargetMode::disparity]) + ", depth " +
                            fmt("%.2f", abs_rel[TargetMode::depth]) + (ok ? "" : " (order violated)");
    log << row << '\n';
    detail += (detail.empty() ? "" : "; ") + row;
  }
  log << "majority: " << (agree >= 2 ? "yes" : "no") << '\n';
  return {agree >= 2, std::to_string(agree) + "/3 seeds ordered; " + detail};
}

// ---------------------------------------------------------------------------
// 10. feature alignment sanity
// ---------------------------------------------------------------------------

Outcome alignment_sanity() {
  Rng rng(1010);
  double min_loss = INFINITY, self_loss = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const double scale = trial % 4 == 0 ? 50.0 : 3.0;
    const auto a = random_tensor({2, 12, 3, 3}, rng, -scale, scale), b = random_tensor({2, 12, 3, 3}, rng, -scale, scale);
    const double temp = trial % 3 == 0 ? 0.25 : 1.0;
    min_loss = std::min(min_loss, alignment::feature_alignment_loss(Var<double>::constant(a), b, temp).value()[0]);
    self_loss = std::max(self_loss, alignment::feature_alignment_loss(Var<double>::constant(a), a, temp).value()[0]);
  }

  // projector alone against frozen encoder tokens, on real U-Net mid features
  const auto samples = dataio::generate_many(1234, DomainTag::indoor_like, 8);
  const LatentCodec<float> codec{CodecConfig{}};
  const UNet<float> model(training::TrainConfig::for_stage(1).unet_config(4));
  const alignment::PatchEncoder encoder;
  std::vector<Tensor<float>> imgs;
  std::vector<Tensor<double>> targets;
  for (const auto& s : samples) {
    imgs.push_back(codec::rgb_input<float>(s.rgb));
    targets.push_back(alignment::tokens_to_map<double>(encoder.features(s)));
  }
  const auto mid = model.forward(Var<float>::constant(codec.encode(stack_batch(imgs)))).tap(TapLocation::Mid).value();
  Tensor<double> feats(mid.shape());
  for (std::size_t k = 0; k < mid.size(); ++k) feats[k] = mid[k];
  const auto target = stack_batch(targets);
  alignment::Projector<double> proj(feats.dim(1), encoder.dim(), 96, 5);
  auto params = proj.parameters();
  AdamW<double> opt(params, {1e-3, 0.9, 0.999, 1e-8, 0.0});
  const auto input = Var<double>::constant(feats);
  double first = 0, prev = INFINITY, last = 0;
  int rises = 0;
  for (int step = 0; step <= 200; ++step) {
    opt.zero_grad();
    auto loss = alignment::feature_alignment_loss(proj(input, target.dim(2), target.dim(3)), target);
    last = loss.value()[0];
    if (step == 0) first = last;
    rises += last > prev;
    prev = last;
    if (step == 200) break;
    backward(loss);
    opt.step();
  }
  return {min_loss >= 0 && self_loss == 0 && rises <= 5 && last < first,
          "min L_fa " + fmt("%.2e", min_loss) + ", self " + fmt("%.1e", self_loss) + ", projector-only " +
              fmt("%.4f", first) + " -> " + fmt("%.4f", last) + " with " + std::to_string(rises) + " rises in 200 steps"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DepthMaster acceptance suite"};
  std::string work_dir = "acceptance_work";
  std::vector<int> only;
  Budget budget;
  app.add_option("--work-dir", work_dir, "Scratch directory for runs and reports");
  app.add_option("--only", only, "Run only these criteria (1-10)")->check(CLI::Range(1, 10));
  app.add_option("--codec-iterations", budget.codec_iterations);
  app.add_option("--stage1-iterations", budget.stage1_iterations);
  app.add_option("--stage2-iterations", budget.stage2_iterations);
  app.add_option("--detail-iterations", budget.detail_iterations);
  app.add_option("--detail-stage2-iterations", budget.detail_stage2_iterations);
  app.add_option("--vote-iterations", budget.vote_iterations);
  app.add_option("--train-samples", budget.train_samples);
  app.add_option("--val-samples", budget.val_samples);
  CLI11_PARSE(app, argc, argv);
  tune_allocator();

  const fs::path work(work_dir);
  fs::create_directories(work);
  const std::set<int> selected(only.begin(), only.end());
  Desk desk;

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"formula oracles", formula_oracles},
      {"Huber continuity", huber_continuity},
      {"FFT module", fft_module},
      {"gradient checks", gradient_checks},
      {"alignment absorption", alignment_absorption},
      {"round trips", [&] { return round_trips(work / "round_trips"); }},
      {"desk training", [&] { return desk_training(desk, budget, work / "desk"); }},
      {"stage-2 edges and detail suite", [&] { return detail_ablation(desk, budget, work / "desk"); }},
      {"target mode vote", [&] { return target_mode_vote(desk, budget, work); }},
      {"feature alignment sanity", alignment_sanity},
  };

  nlohmann::json report = nlohmann::json::array();
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    all = all && o.pass;
    std::printf("C%-2d %s  %s: %s [%.1fs]\n", id, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
    report.push_back({{"criterion", id}, {"name", criteria[i].first}, {"pass", o.pass}, {"detail", o.detail},
                      {"seconds", secs}});
  }
  for (const auto& n : desk.notes) std::printf("note: %s\n", n.c_str());
  plot::write_text(work / "acceptance.json", report.dump(2) + "\n");
  return all ? 0 : 1;
}
