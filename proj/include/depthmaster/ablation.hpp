// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "depthmaster/trainer.hpp"

namespace depthmaster::training {

/// A rendered ablation table: labelled rows, string cells.
struct AblationTable {
  std::string suite;
  std::vector<std::string> columns;  // first column is the row label
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> notes;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return i;
    throw ConfigError("ablation table has no column '" + name + "'");
  }

  const std::vector<std::string>& row(const std::string& label) const {
    for (const auto& r : rows)
      if (!r.empty() && r[0] == label) return r;
    throw ConfigError("ablation table has no row '" + label + "'");
  }

  double value(const std::string& label, const std::string& col) const {
    return std::stod(row(label).at(column(col)));
  }

  std::string markdown() const {
    std::string out = "|";
    for (const auto& c : columns) out += " " + c + " |";
    out += "\n|";
    for (std::size_t i = 0; i < columns.size(); ++i) out += i == 0 ? "---|" : "---:|";
    out += "\n";
    for (const auto& r : rows) {
      out += "|";
      for (const auto& c : r) out += " " + c + " |";
      out += "\n";
    }
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["suite"] = suite;
    j["columns"] = columns;
    j["rows"] = rows;
    j["notes"] = notes;
    return j;
  }

  static AblationTable from_json(const nlohmann::json& j) {
    AblationTable t;
    try {
      t.suite = j.at("suite").get<std::string>();
      t.columns = j.at("columns").get<std::vector<std::string>>();
      t.rows = j.at("rows").get<std::vector<std::vector<std::string>>>();
      if (j.contains("notes")) t.notes = j.at("notes").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("ablation table: ") + e.what());
    }
    return t;
  }
};

struct EvalSplit {
  std::string name;
  std::vector<Sample> samples;
};

/// Shared inputs of every row of an ablation suite.
struct AblationContext {
  LatentCodec<float> codec;
  std::shared_ptr<const alignment::ExternalEncoder> encoder;
  std::shared_ptr<const dataio::Mixture> data;
  std::vector<EvalSplit> eval;
  TrainConfig stage1 = TrainConfig::for_stage(1);
  TrainConfig stage2 = TrainConfig::for_stage(2);
  std::filesystem::path out_dir;
  bool verbose = false;
};

inline const std::vector<std::string>& ablation_suites() {
  static const std::vector<std::string> s{"preprocess", "fa_location", "detail"};
  return s;
}

namespace ablation_detail {

inline std::string cell(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

struct Trained {
  UNet<float> model;
  TrainConfig cfg;
};

inline Trained train_row(const AblationContext& ctx, const TrainConfig& cfg,
                         const std::string& label, std::optional<UNet<float>> init = std::nullopt) {
  const auto dir = ctx.out_dir / label;
  Trainer<float> trainer(cfg, ctx.codec, cfg.objectives.fa ? ctx.encoder : nullptr, ctx.data,
                         std::move(init));
  trainer.set_norm_params(mean_norm_params(*ctx.data, cfg.target_mode, cfg.p_lo, cfg.p_hi));
  RunOptions opt;
  opt.out_dir = dir;
  opt.verbose = ctx.verbose;
  run_training(trainer, opt);
  return {trainer.model(), cfg};
}

inline std::vector<metrics::MetricsReport> evaluate_row(const AblationContext& ctx,
                                                        const Trained& t) {
  std::vector<metrics::MetricsReport> out;
  for (const auto& split : ctx.eval) {
    out.push_back(evaluate(t.model, ctx.codec, split.samples, t.cfg.target_mode, split.name, {}, 1,
                           t.cfg.hash(), t.cfg.p_lo, t.cfg.p_hi));
  }
  return out;
}

inline void add_metric_columns(AblationTable& table, const AblationContext& ctx) {
  for (const auto& split : ctx.eval) {
    table.columns.push_back(split.name + ".abs_rel");
    table.columns.push_back(split.name + ".delta1");
  }
}

inline void append_metrics(std::vector<std::string>& row,
                           const std::vector<metrics::MetricsReport>& reports) {
  for (const auto& r : reports) {
    row.push_back(cell(r.abs_rel));
    row.push_back(cell(r.delta1));
  }
}

inline AblationTable preprocess_suite(const AblationContext& ctx) {
  AblationTable table{"preprocess", {"target"}, {}, {}};
  add_metric_columns(table, ctx);
  const std::pair<const char*, TargetMode> rows[] = {
      {"depth", TargetMode::depth},
      {"disparity", TargetMode::disparity},
      {"sqrt_disp", TargetMode::sqrt_disparity}};
  for (const auto& [label, mode] : rows) {
    TrainConfig cfg = ctx.stage1;
    cfg.target_mode = mode;
    const auto t = train_row(ctx, cfg, label);
    std::vector<std::string> row{label};
    append_metrics(row, evaluate_row(ctx, t));
    table.rows.push_back(std::move(row));
  }
  return table;
}

inline AblationTable fa_location_suite(const AblationContext& ctx) {
  AblationTable table{"fa_location", {"alignment"}, {}, {}};
  add_metric_columns(table, ctx);
  const std::pair<const char*, std::optional<TapLocation>> rows[] = {
      {"baseline", std::nullopt},
      {"D1", TapLocation::D1},
      {"D2", TapLocation::D2},
      {"Mid", TapLocation::Mid}};
  for (const auto& [label, loc] : rows) {
    TrainConfig cfg = ctx.stage1;
    cfg.objectives.fa = loc.has_value();
    if (loc) cfg.alignment_location = *loc;
    const auto t = train_row(ctx, cfg, label);
    std::vector<std::string> row{label};
    append_metrics(row, evaluate_row(ctx, t));
    table.rows.push_back(std::move(row));
  }
  return table;
}

/// Detail-preservation rows. Feature alignment stays on in every
/// single-stage row so the rows differ only in the named components.
inline AblationTable detail_suite(const AblationContext& ctx) {
  AblationTable table{"detail", {"model", "pixel", "L_h", "FE", "two_stage"}, {}, {}};
  add_metric_columns(table, ctx);
  table.columns.push_back("F1");

  auto emit = [&](const std::string& label, bool pixel, bool lh, bool fe, bool two,
                  const Trained& t) {
    std::vector<std::string> row{label, pixel ? "x" : "", lh ? "x" : "", fe ? "x" : "",
                                 two ? "x" : ""};
    const auto reports = evaluate_row(ctx, t);
    append_metrics(row, reports);
    row.push_back(cell(reports.front().edge_f1, 3));
    table.rows.push_back(std::move(row));
  };

  const Trained base = train_row(ctx, ctx.stage1, "M.Base");
  emit("M.Base", false, false, false, false, base);

  TrainConfig single = ctx.stage1;
  single.objectives = {true, ctx.stage1.objectives.fa, true, false, false};
  emit("M.Pixel", true, false, false, false, train_row(ctx, single, "M.Pixel"));

  single.objectives.huber = true;
  emit("M.Huber", true, true, false, false, train_row(ctx, single, "M.Huber"));

  single.objectives.enhancer = true;
  emit("M.FE_Huber", true, true, true, false, train_row(ctx, single, "M.FE_Huber"));

  emit("M.Full", true, true, true, true, train_row(ctx, ctx.stage2, "M.Full", base.model));
  table.notes.push_back("F1 measured on split '" + ctx.eval.front().name + "'");
  return table;
}

}  // namespace ablation_detail

/// Train and evaluate every row of a named suite; each row writes its run
/// under out_dir/<row label>/.
inline AblationTable run_ablation(const std::string& suite, const AblationContext& ctx) {
  if (ctx.eval.empty()) throw ConfigError("run_ablation: no evaluation splits");
  if (suite == "preprocess") return ablation_detail::preprocess_suite(ctx);
  if (suite == "fa_location") return ablation_detail::fa_location_suite(ctx);
  if (suite == "detail") return ablation_detail::detail_suite(ctx);
  std::string known;
  for (const auto& s : ablation_suites()) known += (known.empty() ? "" : ", ") + s;
  throw ConfigError("unknown ablation suite '" + suite + "' (known: " + known + ")");
}

}  // namespace depthmaster::training
