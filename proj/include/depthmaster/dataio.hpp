// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "depthmaster/pnm.hpp"
#include "depthmaster/scene.hpp"

namespace depthmaster::dataio {

namespace fs = std::filesystem;

struct SamplePaths {
  fs::path rgb, depth, mask, meta;
};

inline SamplePaths sample_paths(const fs::path& dir) {
  return {dir / "rgb.ppm", dir / "depth.pfm", dir / "mask.pgm", dir / "meta.txt"};
}

inline SamplePaths write_sample(const Sample& sample, const fs::path& dir) {
  fs::create_directories(dir);
  const auto paths = sample_paths(dir);
  pnm::write_ppm(paths.rgb, sample.rgb);
  pnm::write_pfm(paths.depth, sample.depth);
  pnm::write_pgm(paths.mask, sample.mask);
  std::ofstream meta(paths.meta, std::ios::trunc);
  meta << "domain=" << to_string(sample.domain) << '\n'
       << "far_plane=" << sample.far_plane << '\n';
  if (!meta) throw Error(paths.meta.string() + ": write failed");
  return paths;
}

inline Sample read_sample(const fs::path& dir) {
  const auto paths = sample_paths(dir);
  Sample s;
  s.id = dir.filename().string();
  s.depth = pnm::read_pfm(paths.depth);
  s.rgb = pnm::read_ppm(paths.rgb);
  if (!s.rgb.same_size(s.depth.height(), s.depth.width())) {
    throw ParseError(paths.rgb.string() + ": dimensions do not match " +
                     paths.depth.string());
  }
  if (fs::exists(paths.mask)) {
    s.mask = pnm::read_pgm(paths.mask);
    if (!s.mask.same_size(s.depth.height(), s.depth.width())) {
      throw ParseError(paths.mask.string() + ": dimensions do not match " +
                       paths.depth.string());
    }
  } else {
    s.mask = full_mask(s.depth.height(), s.depth.width());
  }
  if (fs::exists(paths.meta)) {
    std::ifstream meta(paths.meta);
    std::string line;
    while (std::getline(meta, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
      try {
        if (key == "domain") s.domain = parse_domain(value);
        if (key == "far_plane") s.far_plane = std::stof(value);
      } catch (const std::exception& e) {
        throw ParseError(paths.meta.string() + ": bad line '" + line + "'");
      }
    }
  }
  return s;
}

/// Random-access collection of samples.
class SampleSource {
 public:
  virtual ~SampleSource() = default;
  virtual std::size_t size() const = 0;
  virtual Sample at(std::size_t i) const = 0;
  virtual std::string name() const = 0;
};

class VectorSource : public SampleSource {
 public:
  VectorSource(std::string name, std::vector<Sample> samples)
      : name_(std::move(name)), samples_(std::move(samples)) {}
  std::size_t size() const override { return samples_.size(); }
  Sample at(std::size_t i) const override { return samples_.at(i); }
  std::string name() const override { return name_; }
  const std::vector<Sample>& samples() const { return samples_; }

 private:
  std::string name_;
  std::vector<Sample> samples_;
};

/// `<root>/<split>/<id>/` sample directories, read lazily in id order.
class DirectorySource : public SampleSource {
 public:
  explicit DirectorySource(fs::path split_dir) : dir_(std::move(split_dir)) {
    if (!fs::is_directory(dir_)) throw ConfigError(dir_.string() + ": not a directory");
    for (const auto& e : fs::directory_iterator(dir_)) {
      if (e.is_directory() && fs::exists(e.path() / "depth.pfm")) ids_.push_back(e.path());
    }
    std::sort(ids_.begin(), ids_.end());
  }
  std::size_t size() const override { return ids_.size(); }
  Sample at(std::size_t i) const override { return read_sample(ids_.at(i)); }
  std::string name() const override { return dir_.filename().string(); }
  const std::vector<fs::path>& entries() const { return ids_; }

 private:
  fs::path dir_;
  std::vector<fs::path> ids_;
};

inline std::vector<Sample> load_all(const SampleSource& src) {
  std::vector<Sample> out;
  out.reserve(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out.push_back(src.at(i));
  return out;
}

/// Generate `count` scenes of one profile with seeds base_seed, base_seed+1, ...
inline std::vector<Sample> generate_many(std::uint64_t base_seed, DomainTag profile,
                                         std::size_t count, const SceneOptions& opt = {}) {
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_scene(base_seed + i, profile, opt));
  return out;
}

struct Draw {
  std::size_t source = 0;
  std::size_t index = 0;
  friend bool operator==(const Draw&, const Draw&) = default;
};

/// Deterministic weighted stream over several sources. Draw k depends only
/// on (seed, k), so a stream can be repositioned exactly for resumption.
class Mixture {
 public:
  Mixture(std::vector<std::shared_ptr<const SampleSource>> sources,
          std::vector<double> ratios, std::uint64_t seed)
      : sources_(std::move(sources)), ratios_(std::move(ratios)), seed_(seed) {
    if (sources_.empty()) throw ConfigError("make_mixture: empty source list");
    if (sources_.size() != ratios_.size()) {
      throw ConfigError("make_mixture: " + std::to_string(sources_.size()) +
                        " sources but " + std::to_string(ratios_.size()) + " ratios");
    }
    double total = 0;
    for (std::size_t i = 0; i < sources_.size(); ++i) {
      if (!sources_[i] || sources_[i]->size() == 0) {
        throw ConfigError("make_mixture: source " + std::to_string(i) + " is empty");
      }
      if (!(ratios_[i] > 0.0)) throw ConfigError("make_mixture: ratios must be positive");
      total += ratios_[i];
    }
    double acc = 0;
    for (double r : ratios_) {
      acc += r / total;
      cumulative_.push_back(acc);
    }
    cumulative_.back() = 1.0;
  }

  Draw draw_at(std::uint64_t k) const {
    Rng rng(mix_seed(seed_, k));
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    std::size_t s = 0;
    while (s + 1 < cumulative_.size() && u >= cumulative_[s]) ++s;
    const std::size_t idx =
        std::uniform_int_distribution<std::size_t>(0, sources_[s]->size() - 1)(rng);
    return {s, idx};
  }

  Draw next() { return draw_at(position_++); }
  Sample next_sample() {
    const Draw d = next();
    return sources_[d.source]->at(d.index);
  }
  std::uint64_t position() const { return position_; }
  void seek(std::uint64_t pos) { position_ = pos; }

  const SampleSource& source(std::size_t i) const { return *sources_.at(i); }
  std::size_t source_count() const { return sources_.size(); }
  const std::vector<double>& ratios() const { return ratios_; }

 private:
  std::vector<std::shared_ptr<const SampleSource>> sources_;
  std::vector<double> ratios_;
  std::vector<double> cumulative_;
  std::uint64_t seed_;
  std::uint64_t position_ = 0;
};

inline Mixture make_mixture(std::vector<std::shared_ptr<const SampleSource>> sources,
                            std::vector<double> ratios, std::uint64_t seed) {
  return Mixture(std::move(sources), std::move(ratios), seed);
}

template <typename R>
R mirrored(const R& r) {
  R out(r.height(), r.width());
  for (std::size_t i = 0; i < r.height(); ++i)
    for (std::size_t j = 0; j < r.width(); ++j)
      for (std::size_t c = 0; c < R::channels; ++c)
        out(i, j, c) = r(i, r.width() - 1 - j, c);
  return out;
}

inline Sample flip_horizontal(const Sample& s) {
  Sample out = s;
  out.rgb = mirrored(s.rgb);
  out.depth = mirrored(s.depth);
  out.mask = mirrored(s.mask);
  return out;
}

/// Mirror rgb, depth and mask together with probability p.
inline Sample augment_hflip(const Sample& s, double p, Rng& rng) {
  if (p < 0.0 || p > 1.0) throw ConfigError("augment_hflip: p outside [0, 1]");
  if (p == 0.0) return s;
  if (p == 1.0 || std::bernoulli_distribution(p)(rng)) return flip_horizontal(s);
  return s;
}

}  // namespace depthmaster::dataio
