// SPDX-License-Identifier: Apache-2.0
#include "helpers.hpp"

using namespace dm_test;
using namespace depthmaster::preprocess;

namespace {

constexpr TargetMode kModes[] = {TargetMode::depth, TargetMode::disparity, TargetMode::sqrt_disparity};

}  // namespace

TEST(Preprocess, FullChainRoundTripsUnclampedPixels) {
  for (auto mode : kModes) {
    const auto s = dataio::generate_scene(4, dataio::DomainTag::outdoor_like);
    const auto target = depth_to_target(s.depth, s.mask, mode);
    const auto norm = normalize_percentile(target, s.mask, 2, 98, mode);
    const auto depth = target_to_depth(denormalize(norm.values, norm.params), mode);
    std::size_t checked = 0;
    for (std::size_t k = 0; k < depth.pixels(); ++k) {
      if (!s.mask[k] || std::abs(norm.values[k]) >= 1.0f) continue;
      EXPECT_NEAR(depth[k], s.depth[k], 1e-4 * s.depth[k]) << to_string(mode) << " pixel " << k;
      ++checked;
    }
    EXPECT_GT(checked, depth.pixels() / 2);
  }
}

TEST(Preprocess, PercentilesMatchLinearInterpolation) {
  // 101 evenly spaced values 0..100: the p-th percentile is p itself
  ScalarMap t(1, 101);
  for (std::size_t k = 0; k < 101; ++k) t[k] = static_cast<float>(100 - k);
  const auto n = normalize_percentile(t, full_mask(1, 101), 2, 98, TargetMode::depth);
  EXPECT_NEAR(n.params.lo, 2.0, 1e-12);
  EXPECT_NEAR(n.params.hi, 98.0, 1e-12);
  EXPECT_FLOAT_EQ(n.values[50], 0.0f);   // value 50
  EXPECT_FLOAT_EQ(n.values[0], 1.0f);    // value 100, clamped
  EXPECT_FLOAT_EQ(n.values[100], -1.0f); // value 0, clamped
  EXPECT_NEAR(n.values[75], 2.0 * (25.0 - 2.0) / 96.0 - 1.0, 1e-6);

  std::vector<double> v{4, 1, 3, 2};
  std::sort(v.begin(), v.end());
  EXPECT_DOUBLE_EQ(percentile_sorted(v, 50), 2.5);
  EXPECT_DOUBLE_EQ(percentile_sorted(v, 0), 1.0);
  EXPECT_DOUBLE_EQ(percentile_sorted(v, 100), 4.0);
}

TEST(Preprocess, InvalidPixelsDoNotMoveThePercentiles) {
  ScalarMap t(2, 2, std::vector<float>{1, 2, 3, 1000});
  ValidityMask m(2, 2, std::vector<std::uint8_t>{1, 1, 1, 0});
  const auto n = normalize_percentile(t, m, 0, 100, TargetMode::depth);
  EXPECT_DOUBLE_EQ(n.params.lo, 1.0);
  EXPECT_DOUBLE_EQ(n.params.hi, 3.0);
}

TEST(Preprocess, TargetsAreMonotoneInDepth) {
  DepthMap d(1, 50);
  for (std::size_t k = 0; k < 50; ++k) d[k] = 0.3f + 0.2f * static_cast<float>(k);
  for (auto mode : kModes) {
    const auto t = depth_to_target(d, full_mask(1, 50), mode);
    for (std::size_t k = 1; k < 50; ++k) {
      if (mode == TargetMode::depth) EXPECT_GT(t[k], t[k - 1]);
      else EXPECT_LT(t[k], t[k - 1]);
    }
  }
}

TEST(Preprocess, DegenerateAndInvalidInputsThrow) {
  ScalarMap flat(4, 4, 2.0f);
  EXPECT_THROW(normalize_percentile(flat, full_mask(4, 4)), DegenerateError);
  EXPECT_THROW(normalize_percentile(flat, full_mask(4, 4), 98, 2), ConfigError);
  DepthMap d(1, 2, std::vector<float>{1.0f, 0.0f});
  EXPECT_THROW(depth_to_target(d, full_mask(1, 2), TargetMode::disparity), DomainError);
  ScalarMap neg(1, 1, -0.5f);
  EXPECT_THROW(target_to_depth(neg, TargetMode::sqrt_disparity), DomainError);
  ValidityMask m = full_mask(1, 1);
  const auto out = target_to_depth(neg, TargetMode::sqrt_disparity, m);
  EXPECT_EQ(m[0], 0);
  EXPECT_EQ(out[0], 0.0f);
  EXPECT_THROW(parse_target_mode("log"), ConfigError);
}

TEST(Preprocess, PredictionToDepthClampsOutOfRangeValues) {
  NormParams p{0.2, 1.0, 2, 98, TargetMode::disparity};
  ScalarMap pred(1, 3, std::vector<float>{-5.0f, 0.0f, 7.0f});
  const auto d = prediction_to_depth(pred, p);
  EXPECT_NEAR(d[0], 5.0, 1e-5);
  EXPECT_NEAR(d[1], 1.0 / 0.6, 1e-5);
  EXPECT_NEAR(d[2], 1.0, 1e-6);
}

TEST(Histogram, MassSumsToOne) {
  const auto samples = dataio::generate_many(30, dataio::DomainTag::indoor_like, 6);
  for (auto mode : kModes) {
    const auto h = target_histogram(samples, mode, 32);
    ASSERT_EQ(h.mass.size(), 32u);
    double total = 0;
    for (double m : h.mass) {
      EXPECT_GE(m, 0.0);
      total += m;
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
  EXPECT_THROW(target_histogram(samples, TargetMode::depth, 0), ConfigError);
}

TEST(Histogram, SqrtDisparitySpreadsOutdoorDepthMoreEvenly) {
  const auto samples = dataio::generate_many(40, dataio::DomainTag::outdoor_like, 16);
  const double h_depth = target_histogram(samples, TargetMode::depth, 64).entropy();
  const double h_sqrt = target_histogram(samples, TargetMode::sqrt_disparity, 64).entropy();
  EXPECT_GT(h_sqrt, h_depth);
}

TEST(NormFile, RoundTripsExactly) {
  TempDir dir("norm");
  const NormParams p{0.123456789012345, 3.25, 2, 98, TargetMode::disparity};
  write_norm_params(dir / "norm.txt", p);
  const auto q = read_norm_params(dir / "norm.txt");
  EXPECT_EQ(q.lo, p.lo);
  EXPECT_EQ(q.hi, p.hi);
  EXPECT_EQ(q.mode, p.mode);
  write_text_file(dir / "bad.txt", "lo=1\n");
  EXPECT_THROW(read_norm_params(dir / "bad.txt"), ParseError);
}
