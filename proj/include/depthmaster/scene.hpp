// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "depthmaster/random.hpp"
#include "depthmaster/raster.hpp"

namespace depthmaster::dataio {

enum class DomainTag { indoor_like, outdoor_like };

inline std::string to_string(DomainTag d) {
  return d == DomainTag::indoor_like ? "indoor_like" : "outdoor_like";
}

inline DomainTag parse_domain(const std::string& s) {
  if (s == "indoor_like") return DomainTag::indoor_like;
  if (s == "outdoor_like") return DomainTag::outdoor_like;
  throw ConfigError("unknown domain tag '" + s + "'");
}

enum class MaskMode { dense, sparse };

inline constexpr float kOutdoorFarPlane = 80.0f;
inline constexpr float kIndoorNear = 0.3f;
inline constexpr float kIndoorFar = 10.0f;

struct Sample {
  RgbImage rgb;
  DepthMap depth;
  ValidityMask mask;
  DomainTag domain = DomainTag::indoor_like;
  float far_plane = kIndoorFar;
  std::string id;

  std::size_t height() const { return depth.height(); }
  std::size_t width() const { return depth.width(); }
};

struct SceneOptions {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t codec_factor = 4;
  MaskMode mask_mode = MaskMode::dense;
  double sparse_fraction = 0.2;
};

namespace scene_detail {

using Vec3 = std::array<double, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline Vec3 normalized(const Vec3& a) {
  const double n = std::sqrt(dot(a, a));
  return n > 0 ? (1.0 / n) * a : a;
}

enum class Kind { plane, box, ellipsoid };

/// Albedo pattern in image coordinates, deliberately unrelated to geometry.
struct Texture {
  std::array<double, 3> base{};
  std::array<double, 3> alt{};
  int pattern = 0;  // 0 stripes, 1 checker, 2 blobs
  double period = 8.0, angle = 0.0, phase = 0.0;
  std::vector<std::array<double, 3>> blobs;  // (u, v, radius)

  std::array<double, 3> at(double u, double v) const {
    double m = 0.0;
    if (pattern == 0) {
      const double s = u * std::cos(angle) + v * std::sin(angle);
      m = 0.5 + 0.5 * std::sin(2.0 * M_PI * s / period + phase);
    } else if (pattern == 1) {
      const auto a = static_cast<long>(std::floor((u + phase) / period));
      const auto b = static_cast<long>(std::floor((v + phase) / period));
      m = ((a + b) & 1) ? 1.0 : 0.0;
    } else {
      for (const auto& bl : blobs) {
        const double du = u - bl[0], dv = v - bl[1];
        m += std::exp(-(du * du + dv * dv) / (2.0 * bl[2] * bl[2]));
      }
      m = std::min(m, 1.0);
    }
    return {base[0] * (1 - m) + alt[0] * m, base[1] * (1 - m) + alt[1] * m,
            base[2] * (1 - m) + alt[2] * m};
  }
};

struct Primitive {
  Kind kind = Kind::plane;
  Vec3 center{};      // plane: point on plane
  Vec3 extent{};      // plane: normal; box: half sizes; ellipsoid: radii
  double yaw = 0.0;   // box rotation about the vertical axis
  Texture texture;
};

inline Vec3 rotate_y(const Vec3& v, double a) {
  const double c = std::cos(a), s = std::sin(a);
  return {c * v[0] + s * v[2], v[1], -s * v[0] + c * v[2]};
}

inline std::optional<double> intersect(const Primitive& p, const Vec3& o, const Vec3& d) {
  constexpr double eps = 1e-6;
  switch (p.kind) {
    case Kind::plane: {
      const double den = dot(d, p.extent);
      if (std::abs(den) < 1e-12) return std::nullopt;
      const double t = dot(p.center - o, p.extent) / den;
      return t > eps ? std::optional<double>(t) : std::nullopt;
    }
    case Kind::box: {
      const Vec3 lo = rotate_y(o - p.center, -p.yaw);
      const Vec3 ld = rotate_y(d, -p.yaw);
      double t0 = -std::numeric_limits<double>::infinity();
      double t1 = std::numeric_limits<double>::infinity();
      for (int a = 0; a < 3; ++a) {
        if (std::abs(ld[a]) < 1e-12) {
          if (std::abs(lo[a]) > p.extent[a]) return std::nullopt;
          continue;
        }
        double ta = (-p.extent[a] - lo[a]) / ld[a];
        double tb = (p.extent[a] - lo[a]) / ld[a];
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
      }
      if (t0 > t1 || t1 <= eps) return std::nullopt;
      return t0 > eps ? t0 : t1;
    }
    case Kind::ellipsoid: {
      const Vec3 lo = o - p.center;
      const Vec3 so{lo[0] / p.extent[0], lo[1] / p.extent[1], lo[2] / p.extent[2]};
      const Vec3 sd{d[0] / p.extent[0], d[1] / p.extent[1], d[2] / p.extent[2]};
      const double a = dot(sd, sd), b = 2.0 * dot(so, sd), c = dot(so, so) - 1.0;
      const double disc = b * b - 4 * a * c;
      if (disc < 0) return std::nullopt;
      const double sq = std::sqrt(disc);
      const double ta = (-b - sq) / (2 * a), tb = (-b + sq) / (2 * a);
      if (ta > eps) return ta;
      if (tb > eps) return tb;
      return std::nullopt;
    }
  }
  return std::nullopt;
}

inline double uniform(Rng& rng, double a, double b) {
  return std::uniform_real_distribution<double>(a, b)(rng);
}

}  // namespace scene_detail

/// Ray-cast a random scene: a ground plane (plus room walls indoors, side
/// buildings outdoors) and 3-10 boxes/ellipsoids. Depth is planar (camera z).
/// RGB is Lambertian shading from normals estimated on the depth map,
/// multiplied by per-object albedo patterns laid out in image space.
inline Sample generate_scene(std::uint64_t seed, DomainTag profile,
                             const SceneOptions& opt = {}) {
  using namespace scene_detail;
  const std::size_t H = opt.height, W = opt.width;
  if (H < 32 || W < 32) {
    throw ConfigError("generate_scene: size " + std::to_string(H) + "x" +
                      std::to_string(W) + " below the 32x32 minimum");
  }
  if (opt.codec_factor == 0 || H % opt.codec_factor || W % opt.codec_factor) {
    throw ConfigError("generate_scene: size " + std::to_string(H) + "x" +
                      std::to_string(W) + " not divisible by codec factor " +
                      std::to_string(opt.codec_factor));
  }
  const bool indoor = profile == DomainTag::indoor_like;
  Rng rng(mix_seed(seed, indoor ? 0x1D00 : 0x0D00));
  auto U = [&](double a, double b) { return uniform(rng, a, b); };
  auto pick = [&](int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
  };

  auto random_texture = [&]() {
    Texture t;
    for (int c = 0; c < 3; ++c) {
      t.base[static_cast<std::size_t>(c)] = U(0.25, 1.0);
      t.alt[static_cast<std::size_t>(c)] = U(0.05, 0.9);
    }
    t.pattern = pick(0, 2);
    t.period = U(3.0, 14.0);
    t.angle = U(0.0, M_PI);
    t.phase = U(0.0, 2.0 * M_PI);
    if (t.pattern == 2) {
      const int nb = pick(2, 6);
      for (int b = 0; b < nb; ++b) {
        t.blobs.push_back({U(0, static_cast<double>(W)), U(0, static_cast<double>(H)),
                           U(2.0, 8.0)});
      }
    }
    return t;
  };

  const double cam_h = indoor ? U(1.2, 1.7) : U(1.3, 1.8);
  const double pitch = indoor ? U(0.0, 0.25) : U(0.0, 0.12);
  const double focal = static_cast<double>(W) * U(0.8, 1.1);
  const Vec3 origin{U(-0.3, 0.3), cam_h, 0.0};

  std::vector<Primitive> prims;
  auto add_plane = [&](Vec3 point, Vec3 normal) {
    Primitive p;
    p.kind = Kind::plane;
    p.center = point;
    p.extent = normal;
    p.texture = random_texture();
    prims.push_back(std::move(p));
  };
  auto add_box = [&](Vec3 c, Vec3 half, double yaw) {
    Primitive p;
    p.kind = Kind::box;
    p.center = c;
    p.extent = half;
    p.yaw = yaw;
    p.texture = random_texture();
    prims.push_back(std::move(p));
  };
  auto add_ellipsoid = [&](Vec3 c, Vec3 radii) {
    Primitive p;
    p.kind = Kind::ellipsoid;
    p.center = c;
    p.extent = radii;
    p.texture = random_texture();
    prims.push_back(std::move(p));
  };

  add_plane({0, 0, 0}, {0, 1, 0});
  double back = 0, left = 0, right = 0;
  if (indoor) {
    back = U(5.0, 9.5);
    left = U(1.8, 3.5);
    right = U(1.8, 3.5);
    add_plane({0, U(2.6, 3.2), 0}, {0, 1, 0});
    add_plane({0, 0, back}, {0, 0, 1});
    add_plane({-left, 0, 0}, {1, 0, 0});
    add_plane({right, 0, 0}, {1, 0, 0});
  } else {
    const int buildings = pick(2, 4);
    for (int b = 0; b < buildings; ++b) {
      const double side = (b % 2 == 0) ? -1.0 : 1.0;
      const double hx = U(2.0, 4.0), hy = U(2.0, 7.5), hz = U(3.0, 10.0);
      add_box({side * (U(8.0, 12.0) + hx), hy, U(10.0, 60.0)}, {hx, hy, hz}, 0.0);
    }
  }

  const int objects = pick(3, 10);
  for (int k = 0; k < objects; ++k) {
    const bool box = pick(0, 1) == 0;
    if (indoor) {
      const double z = U(1.5, back - 0.6);
      const double x = U(-left + 0.4, right - 0.4);
      if (box) {
        const double hy = U(0.15, 0.8);
        add_box({x, hy, z}, {U(0.15, 0.6), hy, U(0.15, 0.6)}, U(0.0, M_PI));
      } else {
        const double ry = U(0.15, 0.5);
        add_ellipsoid({x, ry * U(1.0, 2.0), z}, {U(0.15, 0.5), ry, U(0.15, 0.5)});
      }
    } else {
      const double z = U(4.0, 45.0);
      const double x = U(-7.0, 7.0);
      if (box) {
        const double hy = U(0.5, 1.0);
        add_box({x, hy, z}, {U(0.6, 1.2), hy, U(1.5, 2.5)}, U(-0.3, 0.3));
      } else {
        const double ry = U(0.8, 2.0);
        add_ellipsoid({x, ry * U(1.0, 2.5), z}, {U(0.8, 2.0), ry, U(0.8, 2.0)});
      }
    }
  }

  const double far = indoor ? kIndoorFar : kOutdoorFarPlane;
  const double cx = static_cast<double>(W) / 2.0, cy = static_cast<double>(H) / 2.0;
  const double cp = std::cos(pitch), sp = std::sin(pitch);

  Sample s;
  s.domain = profile;
  s.far_plane = static_cast<float>(far);
  s.id = to_string(profile) + "_" + std::to_string(seed);
  s.depth = DepthMap(H, W);
  s.rgb = RgbImage(H, W);
  s.mask = ValidityMask(H, W, std::uint8_t{1});
  std::vector<int> hit_id(H * W, -1);
  std::vector<Vec3> rays(H * W);

  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const Vec3 dc{(static_cast<double>(j) + 0.5 - cx) / focal,
                    -((static_cast<double>(i) + 0.5) - cy) / focal, 1.0};
      rays[i * W + j] = dc;
      const Vec3 dw{dc[0], dc[1] * cp - sp, dc[1] * sp + cp};
      double best = std::numeric_limits<double>::infinity();
      int id = -1;
      for (std::size_t p = 0; p < prims.size(); ++p) {
        if (auto t = intersect(prims[p], origin, dw); t && *t < best) {
          best = *t;
          id = static_cast<int>(p);
        }
      }
      double depth = id < 0 ? far : best;
      depth = indoor ? std::clamp(depth, static_cast<double>(kIndoorNear), far)
                     : std::min(depth, far);
      s.depth(i, j) = static_cast<float>(depth);
      hit_id[i * W + j] = id;
    }

  const Vec3 light = normalized({U(-0.6, 0.6), U(0.2, 0.9), -U(0.4, 1.0)});
  auto point = [&](std::size_t i, std::size_t j) {
    return static_cast<double>(s.depth(i, j)) * rays[i * W + j];
  };
  std::normal_distribution<double> noise(0.0, 0.01);
  const std::array<double, 3> sky_top{U(0.35, 0.55), U(0.55, 0.75), U(0.85, 1.0)};
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      std::array<double, 3> color{};
      const int id = hit_id[i * W + j];
      if (id < 0) {
        const double f = static_cast<double>(i) / static_cast<double>(H);
        for (std::size_t c = 0; c < 3; ++c) color[c] = sky_top[c] * (1.0 - 0.3 * f) + 0.3 * f;
      } else {
        const std::size_t jl = j > 0 ? j - 1 : j, jr = j + 1 < W ? j + 1 : j;
        const std::size_t iu = i > 0 ? i - 1 : i, id_ = i + 1 < H ? i + 1 : i;
        const Vec3 tx = point(i, jr) - point(i, jl);
        const Vec3 ty = point(id_, j) - point(iu, j);
        Vec3 n = normalized(cross(tx, ty));
        if (dot(n, point(i, j)) > 0) n = -1.0 * n;
        const double shade = 0.3 + 0.7 * std::max(0.0, dot(n, light));
        const auto albedo = prims[static_cast<std::size_t>(id)].texture.at(
            static_cast<double>(j), static_cast<double>(i));
        for (std::size_t c = 0; c < 3; ++c) color[c] = albedo[c] * shade;
      }
      for (std::size_t c = 0; c < 3; ++c) {
        s.rgb(i, j, c) = static_cast<float>(std::clamp(color[c] + noise(rng), 0.0, 1.0));
      }
    }

  if (opt.mask_mode == MaskMode::sparse) {
    std::bernoulli_distribution keep(opt.sparse_fraction);
    for (auto& m : s.mask.data()) m = keep(rng) ? 1 : 0;
  }
  return s;
}

}  // namespace depthmaster::dataio
