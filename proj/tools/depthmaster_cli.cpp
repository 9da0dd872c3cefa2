// SPDX-License-Identifier: Apache-2.0
//
// depthmaster: data generation, training, evaluation, inference, ablations
// and plots. Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "depthmaster.hpp"

namespace fs = std::filesystem;
using namespace depthmaster;

namespace {

/// Raised for bad flag combinations discovered after parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string data_dir;
  bool verbose = false;
};

void add_common(CLI::App* cmd, Common& c, bool needs_data) {
  cmd->add_option("--config", c.config, "key=value config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Random seed (overrides the config file)");
  cmd->add_option("--out-dir", c.out_dir, "Directory receiving every output")->required();
  auto* d = cmd->add_option("--data-dir", c.data_dir, "Dataset root (<root>/<split>/<id>/)");
  if (needs_data) d->required();
  cmd->add_flag("-v,--verbose", c.verbose, "Progress on stderr");
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  plot::write_text(path, j.dump(2) + "\n");
}

std::vector<dataio::Sample> load_split(const std::string& root, const std::string& split) {
  const fs::path dir = fs::path(root) / split;
  if (!fs::is_directory(dir)) throw ConfigError(dir.string() + ": split directory not found");
  auto samples = dataio::load_all(dataio::DirectorySource(dir));
  if (samples.empty()) throw DegenerateError(dir.string() + ": no readable samples");
  return samples;
}

/// Training stream over the train split, one source per domain.
std::shared_ptr<dataio::Mixture> domain_mixture(const std::vector<dataio::Sample>& samples,
                                                double indoor_ratio, std::uint64_t seed) {
  std::vector<dataio::Sample> indoor, outdoor;
  for (const auto& s : samples) (s.domain == dataio::DomainTag::indoor_like ? indoor : outdoor).push_back(s);
  std::vector<std::shared_ptr<const dataio::SampleSource>> sources;
  std::vector<double> ratios;
  if (!indoor.empty()) {
    sources.push_back(std::make_shared<dataio::VectorSource>("indoor_like", indoor));
    ratios.push_back(indoor_ratio);
  }
  if (!outdoor.empty()) {
    sources.push_back(std::make_shared<dataio::VectorSource>("outdoor_like", outdoor));
    ratios.push_back(1.0);
  }
  return std::make_shared<dataio::Mixture>(sources, ratios, mix_seed(seed, 0xDA7A));
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenOptions {
  Common common;
  std::size_t train = 512, val = 64, test = 0;
  double outdoor_fraction = 0.1;
  std::size_t size = 64;
  bool sparse = false;
};

int cmd_gen_data(const GenOptions& o) {
  const std::uint64_t seed = o.common.seed.value_or(0);
  dataio::SceneOptions so;
  so.height = so.width = o.size;
  so.mask_mode = o.sparse ? dataio::MaskMode::sparse : dataio::MaskMode::dense;
  const std::pair<const char*, std::size_t> splits[] = {{"train", o.train}, {"val", o.val}, {"test", o.test}};
  std::uint64_t block = 0;
  for (const auto& [name, count] : splits) {
    if (count == 0) continue;
    const auto n_out = static_cast<std::size_t>(std::llround(o.outdoor_fraction * static_cast<double>(count)));
    const std::uint64_t base = seed * 1000003ULL + (++block) * 100000ULL;
    auto samples = dataio::generate_many(base, dataio::DomainTag::indoor_like, count - n_out, so);
    auto out = dataio::generate_many(base + 50000, dataio::DomainTag::outdoor_like, n_out, so);
    samples.insert(samples.end(), out.begin(), out.end());
    for (const auto& s : samples) dataio::write_sample(s, fs::path(o.common.out_dir) / name / s.id);
    if (o.common.verbose) std::fprintf(stderr, "%s: %zu samples\n", name, samples.size());
  }
  return 0;
}

// ---------------------------------------------------------------------------
// train-codec
// ---------------------------------------------------------------------------

struct CodecOptions {
  Common common;
  std::size_t iterations = 2000;
  double lr = CodecTrainConfig{}.lr;
  std::size_t batch = 8;
  std::size_t width_full = CodecConfig{}.width_full;
  std::size_t width_down = CodecConfig{}.width_down;
};

int cmd_train_codec(const CodecOptions& o) {
  const fs::path out(o.common.out_dir);
  KeyValueConfig file;
  if (!o.common.config.empty()) file = KeyValueConfig::load(o.common.config);
  file.require_known({"iterations", "lr", "batch", "width_full", "width_down", "seed"}, o.common.config);
  CodecTrainConfig tc;
  CodecConfig cc;
  using config_detail::to_double;
  using config_detail::to_uint;
  tc.iterations = file.has("iterations") ? to_uint("iterations", file.get("iterations")) : o.iterations;
  tc.lr = file.has("lr") ? to_double("lr", file.get("lr")) : o.lr;
  tc.batch = file.has("batch") ? to_uint("batch", file.get("batch")) : o.batch;
  cc.width_full = file.has("width_full") ? to_uint("width_full", file.get("width_full")) : o.width_full;
  cc.width_down = file.has("width_down") ? to_uint("width_down", file.get("width_down")) : o.width_down;
  if (file.has("seed")) tc.seed = to_uint("seed", file.get("seed"));
  if (o.common.seed) tc.seed = *o.common.seed;
  cc.seed = mix_seed(tc.seed, 0xC0DEC);

  KeyValueConfig resolved;
  resolved.set("iterations", std::to_string(tc.iterations));
  resolved.set("lr", config_detail::format(tc.lr));
  resolved.set("batch", std::to_string(tc.batch));
  resolved.set("width_full", std::to_string(cc.width_full));
  resolved.set("width_down", std::to_string(cc.width_down));
  resolved.set("seed", std::to_string(tc.seed));
  resolved.write(out / "config.resolved");

  const auto train = load_split(o.common.data_dir, "train");
  LatentCodec<float> codec(cc);
  std::ofstream log(out / "run.log", std::ios::trunc);
  log << "step,loss\n";
  log.precision(9);
  train_codec(codec, train, tc, [&](std::size_t it, double loss) {
    log << it << ',' << loss << '\n';
    if (o.common.verbose) std::fprintf(stderr, "codec step %zu loss %.6f\n", it, loss);
  });
  Checkpoint ck;
  codec.store(ck);
  ck.meta["kind"] = "codec";
  ck.meta["config_hash"] = resolved.hash();
  ck.save(out / "codec.ckpt");

  const fs::path val_dir = fs::path(o.common.data_dir) / "val";
  if (fs::is_directory(val_dir)) {
    const auto val = load_split(o.common.data_dir, "val");
    nlohmann::json j = nlohmann::json::array();
    for (auto mode : {preprocess::TargetMode::depth, preprocess::TargetMode::disparity,
                      preprocess::TargetMode::sqrt_disparity}) {
      auto r = reconstruction_eval(codec, val, mode, "val");
      r.config_hash = resolved.hash();
      auto rj = metrics::to_json(r, false);
      rj["target_mode"] = preprocess::to_string(mode);
      j.push_back(rj);
    }
    write_json(out / "reconstruction.json", j);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOptions {
  Common common;
  int stage = 1;
  std::string codec;
  std::string init;
  std::string features;
  std::vector<std::string> overrides;
  std::optional<std::size_t> iterations;
  std::optional<double> lr;
  double indoor_ratio = 9.0;
  std::size_t val_limit = 64;
  bool resume = false;
};

std::shared_ptr<const alignment::ExternalEncoder> make_encoder(const std::string& features,
                                                                const dataio::Sample& probe) {
  if (features.empty()) return std::make_shared<alignment::PatchEncoder>();
  const auto index = alignment::index_feature_dir(features);
  if (index.empty()) throw ConfigError(features + ": no .feat files");
  const std::size_t tokens = index.front().tokens, dim = index.front().dim;
  // Square patches tiling the image exactly.
  const double area = static_cast<double>(probe.height() * probe.width()) / static_cast<double>(tokens);
  const auto patch = static_cast<std::size_t>(std::llround(std::sqrt(area)));
  if (patch == 0 || (probe.height() / patch) * (probe.width() / patch) != tokens) {
    throw ShapeError(features + ": token count " + std::to_string(tokens) +
                     " does not tile a " + std::to_string(probe.height()) + "x" +
                     std::to_string(probe.width()) + " image with square patches");
  }
  return std::make_shared<alignment::FileEncoder>(features, tokens, dim, patch);
}

training::TrainConfig resolve_train_config(int stage, const Common& c,
                                           const std::vector<std::string>& overrides,
                                           std::optional<std::size_t> iterations,
                                           std::optional<double> lr) {
  KeyValueConfig file;
  if (!c.config.empty()) file = KeyValueConfig::load(c.config);
  KeyValueConfig flags;
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    const auto key = KeyValueConfig::trim(kv.substr(0, eq));
    if (!training::TrainConfig::keys().count(key)) throw UsageError("--set: unknown key '" + key + "'");
    flags.set(key, KeyValueConfig::trim(kv.substr(eq + 1)));
  }
  if (c.seed) {
    flags.set("seed", std::to_string(*c.seed));
    flags.set("model_seed", std::to_string(*c.seed + 1));
  }
  if (iterations) flags.set("iterations", std::to_string(*iterations));
  if (lr) flags.set("lr", config_detail::format(*lr));
  flags.set("stage", std::to_string(stage));
  auto merged = KeyValueConfig::layered({&file, &flags});
  if (file.has("stage") && file.get("stage") != std::to_string(stage)) {
    throw UsageError("config file stage " + file.get("stage") + " conflicts with --stage " +
                     std::to_string(stage));
  }
  return training::TrainConfig::from_kv(merged, c.config.empty() ? "flags" : c.config);
}

int cmd_train(const TrainOptions& o) {
  auto cfg = resolve_train_config(o.stage, o.common, o.overrides, o.iterations, o.lr);
  const fs::path out(o.common.out_dir);

  std::optional<UNet<float>> init;
  std::optional<LatentCodec<float>> codec;
  if (o.stage == 2) {
    if (o.init.empty()) throw UsageError("--stage 2 requires --init <stage-1 checkpoint>");
    const auto ck = Checkpoint::load(o.init);
    init = UNet<float>::restore(ck);
    codec = LatentCodec<float>::restore(ck);
    const auto prev = training::config_from_checkpoint(ck);
    if (prev.target_mode != cfg.target_mode) {
      throw ConfigError("stage-2 target_mode " + preprocess::to_string(cfg.target_mode) +
                        " differs from the stage-1 checkpoint's " +
                        preprocess::to_string(prev.target_mode));
    }
  } else {
    if (o.codec.empty()) throw UsageError("--stage 1 requires --codec <codec checkpoint>");
    codec = LatentCodec<float>::restore(Checkpoint::load(o.codec));
  }

  const auto train = load_split(o.common.data_dir, "train");
  const auto data = domain_mixture(train, o.indoor_ratio, cfg.seed);
  std::shared_ptr<const alignment::ExternalEncoder> encoder;
  if (cfg.objectives.fa) encoder = make_encoder(o.features, train.front());

  training::Trainer<float> trainer(cfg, *codec, encoder, data, init);
  trainer.set_norm_params(training::mean_norm_params(*data, cfg.target_mode, cfg.p_lo, cfg.p_hi));
  training::RunOptions run;
  run.out_dir = out;
  run.resume = o.resume;
  run.verbose = o.common.verbose;
  if (fs::is_directory(fs::path(o.common.data_dir) / "val")) {
    run.validation = load_split(o.common.data_dir, "val");
    if (run.validation.size() > o.val_limit) run.validation.resize(o.val_limit);
  }
  const auto result = training::run_training(trainer, run);
  if (o.common.verbose && result.best_abs_rel) {
    std::fprintf(stderr, "best val abs_rel %.3f at step %zu\n", *result.best_abs_rel,
                 result.best_iteration);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// eval / infer
// ---------------------------------------------------------------------------

struct EvalOptions {
  Common common;
  std::string checkpoint;
  std::string split = "val";
  std::size_t iterative = 1;
  std::string alignment = "depth";
  bool per_sample = true;
};

int cmd_eval(const EvalOptions& o) {
  if (!fs::exists(o.checkpoint)) throw Error("checkpoint not found: " + o.checkpoint);
  const auto ck = Checkpoint::load(o.checkpoint);
  const auto cfg = training::config_from_checkpoint(ck);
  const auto model = UNet<float>::restore(ck);
  const auto codec = LatentCodec<float>::restore(ck);
  const auto samples = load_split(o.common.data_dir, o.split);
  metrics::EvalConfig ec;
  ec.alignment = metrics::parse_alignment_mode(o.alignment);
  auto report = training::evaluate(model, codec, samples, cfg.target_mode, o.split, ec, o.iterative,
                                   ck.get("config_hash"), cfg.p_lo, cfg.p_hi);
  if (report.n_samples == 0) throw DegenerateError("no sample could be evaluated");
  write_json(fs::path(o.common.out_dir) / "metrics.json", metrics::to_json(report, o.per_sample));
  std::printf("%s: n=%zu abs_rel=%.3f delta1=%.2f edge_f1=%.4f\n", o.split.c_str(), report.n_samples,
              report.abs_rel, report.delta1, report.edge_f1);
  return 0;
}

struct InferOptions {
  Common common;
  std::string checkpoint;
  std::string rgb;
  std::size_t iterative = 1;
  bool resize = false;
};

int cmd_infer(const InferOptions& o) {
  if (!fs::exists(o.checkpoint)) throw Error("checkpoint not found: " + o.checkpoint);
  const auto ck = Checkpoint::load(o.checkpoint);
  const auto model = UNet<float>::restore(ck);
  const auto codec = LatentCodec<float>::restore(ck);
  const auto norm = training::norm_from_checkpoint(ck);
  RgbImage rgb = pnm::read_ppm(o.rgb);
  const std::size_t f = codec.config().factor * 4;  // codec and U-Net downsampling
  const std::size_t H = rgb.height(), W = rgb.width();
  if (H % f || W % f) {
    if (!o.resize) {
      throw ShapeError("image " + std::to_string(H) + "x" + std::to_string(W) +
                       " is not divisible by " + std::to_string(f) + " (pass --resize)");
    }
    const std::size_t h = std::max(f, (H + f / 2) / f * f), w = std::max(f, (W + f / 2) / f * f);
    std::fprintf(stderr, "warning: resizing %zux%zu to %zux%zu\n", H, W, h, w);
    rgb = resize_bilinear(rgb, h, w);
  }
  const auto maps = training::predict_maps(model, codec, {rgb}, o.iterative);
  DepthMap depth = preprocess::prediction_to_depth(maps.front(), norm);
  if (depth.height() != H || depth.width() != W) depth = resize_bilinear(depth, H, W);
  const fs::path out(o.common.out_dir);
  fs::create_directories(out);
  pnm::write_pfm(out / "depth.pfm", depth);
  plot::write_text(out / "preview.png", plot::depth_preview_png(depth));
  preprocess::write_norm_params(out / "norm.txt", norm);
  return 0;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct AblateOptions {
  Common common;
  std::string suite;
  std::string codec;
  std::string features;
  std::vector<std::string> overrides;
  std::optional<std::size_t> iterations;
  std::optional<std::size_t> stage2_iterations;
  std::vector<std::string> eval_splits{"val"};
  double indoor_ratio = 9.0;
};

int cmd_ablate(const AblateOptions& o) {
  training::AblationContext ctx;
  ctx.stage1 = resolve_train_config(1, o.common, o.overrides, o.iterations, std::nullopt);
  ctx.stage2 = training::TrainConfig::for_stage(2);
  ctx.stage2.seed = ctx.stage1.seed;
  ctx.stage2.target_mode = ctx.stage1.target_mode;
  ctx.stage2.micro_batch = ctx.stage1.micro_batch;
  ctx.stage2.accum_steps = ctx.stage1.accum_steps;
  ctx.stage2.checkpoint_every = ctx.stage1.checkpoint_every;
  ctx.stage2.eval_every = ctx.stage1.eval_every;
  if (o.stage2_iterations) ctx.stage2.iterations = *o.stage2_iterations;
  ctx.codec = LatentCodec<float>::restore(Checkpoint::load(o.codec));
  const auto train = load_split(o.common.data_dir, "train");
  ctx.data = domain_mixture(train, o.indoor_ratio, ctx.stage1.seed);
  ctx.encoder = make_encoder(o.features, train.front());
  for (const auto& s : o.eval_splits) ctx.eval.push_back({s, load_split(o.common.data_dir, s)});
  ctx.out_dir = fs::path(o.common.out_dir) / o.suite;
  ctx.verbose = o.common.verbose;
  ctx.stage1.to_kv().write(fs::path(o.common.out_dir) / "config.resolved");
  const auto table = training::run_ablation(o.suite, ctx);
  write_json(fs::path(o.common.out_dir) / (o.suite + ".json"), table.to_json());
  plot::write_text(fs::path(o.common.out_dir) / (o.suite + ".md"), table.markdown());
  std::cout << table.markdown();
  return 0;
}

// ---------------------------------------------------------------------------
// plot
// ---------------------------------------------------------------------------

struct PlotOptions {
  Common common;
  std::string kind;
  std::string input;
  std::string split = "train";
  std::size_t bins = 64;
};

int cmd_plot(const PlotOptions& o) {
  const fs::path out(o.common.out_dir);
  if (o.kind == "histogram") {
    const std::string root = o.input.empty() ? o.common.data_dir : o.input;
    if (root.empty()) throw UsageError("histogram needs --input <dataset root> or --data-dir");
    const auto samples = load_split(root, o.split);
    std::vector<std::pair<std::string, preprocess::Histogram>> h;
    nlohmann::json j;
    for (auto mode : {preprocess::TargetMode::depth, preprocess::TargetMode::disparity,
                      preprocess::TargetMode::sqrt_disparity}) {
      auto hist = preprocess::target_histogram(samples, mode, o.bins);
      j[preprocess::to_string(mode)] = {{"entropy", hist.entropy()}, {"mass", hist.mass}};
      h.emplace_back(preprocess::to_string(mode), std::move(hist));
    }
    plot::write_text(out / "histogram.svg", plot::histogram_chart(h, "target distribution: " + o.split));
    write_json(out / "histogram.json", j);
  } else if (o.kind == "ablation-table") {
    std::ifstream in(o.input);
    if (!in) throw Error(o.input + ": cannot open");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(o.input + ": " + e.what());
    }
    const auto table = training::AblationTable::from_json(j);
    plot::write_text(out / (table.suite + "_table.svg"), plot::table_chart(table));
  } else if (o.kind == "loss-curve") {
    plot::write_text(out / "loss_curve.svg", plot::loss_curve_chart(o.input));
  } else {
    throw UsageError("unknown plot kind '" + o.kind + "'");
  }
  return 0;
}

// ---------------------------------------------------------------------------
// ingest-features
// ---------------------------------------------------------------------------

struct IngestOptions {
  Common common;
  std::size_t tokens = 0;
  std::size_t dim = 0;
};

int cmd_ingest(const IngestOptions& o) {
  const auto index = alignment::index_feature_dir(o.common.data_dir, o.tokens, o.dim);
  if (index.empty()) throw DegenerateError(o.common.data_dir + ": no .feat files");
  nlohmann::json j;
  j["directory"] = fs::absolute(o.common.data_dir).string();
  j["tokens"] = index.front().tokens;
  j["dim"] = index.front().dim;
  for (const auto& e : index) j["entries"].push_back({{"id", e.id}, {"file", e.path.filename().string()}});
  write_json(fs::path(o.common.out_dir) / "feature_index.json", j);
  std::printf("indexed %zu feature files (N=%zu, D=%zu)\n", index.size(), index.front().tokens,
              index.front().dim);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Single-step latent depth estimation: data, training, evaluation and ablations"};
  app.require_subcommand(1);

  GenOptions gen;
  auto* g = app.add_subcommand("gen-data", "Generate a procedural RGB-D dataset");
  add_common(g, gen.common, false);
  g->add_option("--train", gen.train, "Training samples")->capture_default_str();
  g->add_option("--val", gen.val, "Validation samples")->capture_default_str();
  g->add_option("--test", gen.test, "Test samples")->capture_default_str();
  g->add_option("--outdoor-fraction", gen.outdoor_fraction, "Fraction of outdoor-like scenes")
      ->check(CLI::Range(0.0, 1.0))->capture_default_str();
  g->add_option("--size", gen.size, "Image side in pixels (multiple of 16)")
      ->check([](const std::string& s) {
        return std::stoul(s) % 16 == 0 && std::stoul(s) > 0 ? "" : "must be a positive multiple of 16";
      })->capture_default_str();
  g->add_flag("--sparse", gen.sparse, "Sparse ground-truth masks");

  CodecOptions codec;
  auto* c = app.add_subcommand("train-codec", "Train the latent codec");
  add_common(c, codec.common, true);
  c->add_option("--iterations", codec.iterations, "Training iterations")->capture_default_str();
  c->add_option("--lr", codec.lr, "Learning rate")->capture_default_str();
  c->add_option("--batch", codec.batch, "Batch size")->capture_default_str();
  c->add_option("--width-full", codec.width_full, "Full-resolution channel width")->capture_default_str();
  c->add_option("--width-down", codec.width_down, "Downsampled channel width")->capture_default_str();

  TrainOptions train;
  auto* t = app.add_subcommand("train", "Train the U-Net (stage 1 or stage 2)");
  add_common(t, train.common, true);
  t->add_option("--stage", train.stage, "Curriculum stage")->check(CLI::IsMember({1, 2}))->required();
  t->add_option("--codec", train.codec, "Codec checkpoint (stage 1)");
  t->add_option("--init", train.init, "Stage-1 checkpoint to fine-tune (stage 2)");
  t->add_option("--features", train.features, "Directory of .feat files replacing the built-in encoder");
  t->add_option("--set", train.overrides, "Config override key=value (repeatable)");
  t->add_option("--iterations", train.iterations, "Optimizer steps");
  t->add_option("--lr", train.lr, "Learning rate");
  t->add_option("--indoor-ratio", train.indoor_ratio, "Indoor:outdoor sampling ratio")->capture_default_str();
  t->add_option("--val-limit", train.val_limit, "Validation samples used for best-checkpoint selection")
      ->capture_default_str();
  t->add_flag("--resume", train.resume, "Continue from <out-dir>/last.ckpt");

  EvalOptions ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  add_common(e, ev.common, true);
  e->add_option("--checkpoint", ev.checkpoint, "Model checkpoint")->required();
  e->add_option("--split", ev.split, "Split directory under --data-dir")->capture_default_str();
  e->add_option("--iterative", ev.iterative, "U-Net passes")->check(CLI::PositiveNumber)->capture_default_str();
  e->add_option("--alignment", ev.alignment, "Alignment space")
      ->check(CLI::IsMember({"depth", "disparity"}))->capture_default_str();

  InferOptions inf;
  auto* i = app.add_subcommand("infer", "Predict depth for one PPM image");
  add_common(i, inf.common, false);
  i->add_option("--checkpoint", inf.checkpoint, "Model checkpoint")->required();
  i->add_option("--rgb", inf.rgb, "Input image (binary PPM)")->required()->check(CLI::ExistingFile);
  i->add_option("--iterative", inf.iterative, "U-Net passes")->check(CLI::PositiveNumber)->capture_default_str();
  i->add_flag("--resize", inf.resize, "Resize images whose sides are not multiples of 16");

  AblateOptions ab;
  auto* a = app.add_subcommand("ablate", "Run an ablation suite");
  add_common(a, ab.common, true);
  a->add_option("--suite", ab.suite, "Suite name")
      ->check(CLI::IsMember(training::ablation_suites()))->required();
  a->add_option("--codec", ab.codec, "Codec checkpoint")->required()->check(CLI::ExistingFile);
  a->add_option("--features", ab.features, "Directory of .feat files replacing the built-in encoder");
  a->add_option("--set", ab.overrides, "Stage-1 config override key=value (repeatable)");
  a->add_option("--iterations", ab.iterations, "Stage-1 steps per row");
  a->add_option("--stage2-iterations", ab.stage2_iterations, "Stage-2 steps for the two-stage row");
  a->add_option("--eval-split", ab.eval_splits, "Evaluation splits (repeatable)")->capture_default_str();
  a->add_option("--indoor-ratio", ab.indoor_ratio, "Indoor:outdoor sampling ratio")->capture_default_str();

  PlotOptions pl;
  auto* p = app.add_subcommand("plot", "Render figures as SVG");
  add_common(p, pl.common, false);
  p->add_option("--kind", pl.kind, "Figure kind")
      ->check(CLI::IsMember({"histogram", "ablation-table", "loss-curve"}))->required();
  p->add_option("--input", pl.input, "Dataset root, ablation JSON or run.log");
  p->add_option("--split", pl.split, "Split for the histogram kind")->capture_default_str();
  p->add_option("--bins", pl.bins, "Histogram bins")->check(CLI::PositiveNumber)->capture_default_str();

  IngestOptions ing;
  auto* f = app.add_subcommand("ingest-features", "Validate and index a directory of .feat files");
  add_common(f, ing.common, true);
  f->add_option("--tokens", ing.tokens, "Expected token count (0: take from the first file)");
  f->add_option("--dim", ing.dim, "Expected feature dimension (0: take from the first file)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& h) {
    return app.exit(h);
  } catch (const CLI::CallForAllHelp& h) {
    return app.exit(h);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return 1;
  }

  try {
    if (*g) return cmd_gen_data(gen);
    if (*c) return cmd_train_codec(codec);
    if (*t) return cmd_train(train);
    if (*e) return cmd_eval(ev);
    if (*i) return cmd_infer(inf);
    if (*a) return cmd_ablate(ab);
    if (*p) return cmd_plot(pl);
    if (*f) return cmd_ingest(ing);
  } catch (const UsageError& err) {
    std::fprintf(stderr, "usage error: %s\n", err.what());
    return 1;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 2;
  }
  return 1;
}
