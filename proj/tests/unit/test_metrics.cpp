// SPDX-License-Identifier: Apache-2.0
#include <Eigen/Dense>

#include "helpers.hpp"

using namespace dm_test;
using namespace depthmaster::metrics;

namespace {

DepthMap random_depth(std::size_t h, std::size_t w, Rng& rng, double lo = 0.5, double hi = 10.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  DepthMap d(h, w);
  for (auto& v : d.data()) v = static_cast<float>(u(rng));
  return d;
}

}  // namespace

TEST(Alignment, AbsorbsAnyPositiveScaleAndShift) {
  Rng rng(41);
  const auto gt = random_depth(16, 16, rng);
  const auto mask = full_mask(16, 16);
  for (auto [s, t] : {std::pair{2.0, 0.5}, std::pair{0.3, -0.1}, std::pair{7.0, 3.0}}) {
    DepthMap pred(16, 16);
    for (std::size_t k = 0; k < gt.pixels(); ++k) pred[k] = static_cast<float>((gt[k] - t) / s);
    const auto a = affine_align(pred, gt, mask);
    EXPECT_NEAR(a.scale, s, 1e-4 * s);
    EXPECT_NEAR(abs_rel(a.aligned, gt, mask), 0.0, 1e-3);
    EXPECT_DOUBLE_EQ(delta1(a.aligned, gt, mask), 100.0);
  }
}

TEST(Alignment, MatchesNormalEquationsOracle) {
  Rng rng(42);
  const auto gt = random_depth(12, 10, rng), pred = random_depth(12, 10, rng);
  auto mask = full_mask(12, 10);
  for (std::size_t k = 0; k < mask.pixels(); k += 4) mask[k] = 0;
  std::vector<std::size_t> idx;
  for (std::size_t k = 0; k < mask.pixels(); ++k)
    if (mask[k]) idx.push_back(k);
  Eigen::MatrixXd A(idx.size(), 2);
  Eigen::VectorXd b(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    A(r, 0) = pred[idx[r]];
    A(r, 1) = 1.0;
    b(r) = gt[idx[r]];
  }
  const Eigen::Vector2d st = A.colPivHouseholderQr().solve(b);
  const auto a = affine_align(pred, gt, mask);
  EXPECT_NEAR(a.scale, st(0), 1e-9);
  EXPECT_NEAR(a.shift, st(1), 1e-9);

  // disparity mode fits on reciprocals
  for (std::size_t r = 0; r < idx.size(); ++r) {
    A(r, 0) = 1.0 / pred[idx[r]];
    b(r) = 1.0 / gt[idx[r]];
  }
  const Eigen::Vector2d sd = A.colPivHouseholderQr().solve(b);
  const auto ad = affine_align(pred, gt, mask, AlignmentMode::disparity);
  EXPECT_NEAR(ad.scale, sd(0), 1e-9);
  EXPECT_NEAR(ad.shift, sd(1), 1e-9);
}

TEST(Alignment, ConstantPredictionIsDegenerate) {
  Rng rng(43);
  const auto gt = random_depth(8, 8, rng);
  EXPECT_THROW(affine_align(DepthMap(8, 8, 2.0f), gt, full_mask(8, 8)), DegenerateError);
}

TEST(Metrics, AbsRelAndDeltaMatchHandComputedValues) {
  DepthMap gt(1, 4, std::vector<float>{1, 2, 4, 8});
  DepthMap pred(1, 4, std::vector<float>{1.1f, 2, 6, 8});
  auto mask = full_mask(1, 4);
  // |0.1|/1 + 0 + 2/4 + 0 = 0.6 over 4 pixels
  EXPECT_NEAR(abs_rel(pred, gt, mask), 15.0, 1e-5);
  EXPECT_NEAR(delta1(pred, gt, mask), 75.0, 1e-12);
  mask[2] = 0;
  EXPECT_NEAR(abs_rel(pred, gt, mask), 100.0 * 0.1 / 3.0, 1e-5);
  EXPECT_NEAR(delta1(pred, gt, mask), 100.0, 1e-12);
  EXPECT_THROW(abs_rel(pred, gt, ValidityMask(1, 4, std::uint8_t{0})), DegenerateError);
}

TEST(Metrics, EdgeF1OfIdenticalMapsIsOne) {
  const auto s = dataio::generate_scene(9, dataio::DomainTag::indoor_like);
  EXPECT_DOUBLE_EQ(edge_f1(s.depth, s.depth), 1.0);
  EXPECT_DOUBLE_EQ(edge_f1(DepthMap(8, 8, 3.0f), DepthMap(8, 8, 3.0f)), 1.0);
}

TEST(Metrics, EdgeF1PenalizesMissingAndSpuriousEdges) {
  DepthMap step(16, 16, 1.0f), flat(16, 16, 1.0f), shifted(16, 16, 1.0f);
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 8; j < 16; ++j) step(i, j) = 4.0f;
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 12; j < 16; ++j) shifted(i, j) = 4.0f;
  EXPECT_DOUBLE_EQ(edge_f1(flat, step), 0.0);
  EXPECT_DOUBLE_EQ(edge_f1(shifted, step), 0.0);  // 4 px away, outside the tolerance
  DepthMap near = step;
  for (std::size_t i = 0; i < 16; ++i) near(i, 8) = 1.0f;  // edge moved by one pixel
  EXPECT_DOUBLE_EQ(edge_f1(near, step), 1.0);
}

TEST(Metrics, AggregateIsOrderIndependentAndRoundTripsThroughJson) {
  std::vector<SampleMetrics> s{{"a", 3, 90, 0.5, 1, 0}, {"b", 5, 80, 0.7, 2, 1}, {"c", 1, 100, 0.9, 1, 0}};
  auto r = aggregate("synthetic", s, {}, "abc");
  std::reverse(s.begin(), s.end());
  const auto r2 = aggregate("synthetic", s, {});
  EXPECT_DOUBLE_EQ(r.abs_rel, 3.0);
  EXPECT_DOUBLE_EQ(r.abs_rel, r2.abs_rel);
  EXPECT_DOUBLE_EQ(r.delta1, r2.delta1);
  EXPECT_DOUBLE_EQ(r.edge_f1, r2.edge_f1);
  r.alignment_mode = AlignmentMode::disparity;
  const auto back = report_from_json(nlohmann::json::parse(to_json(r).dump()));
  EXPECT_EQ(back.dataset, "synthetic");
  EXPECT_EQ(back.n_samples, 3u);
  EXPECT_DOUBLE_EQ(back.abs_rel, r.abs_rel);
  EXPECT_DOUBLE_EQ(back.edge_f1, r.edge_f1);
  EXPECT_EQ(back.config_hash, "abc");
  EXPECT_EQ(back.alignment_mode, AlignmentMode::disparity);
  ASSERT_EQ(back.samples.size(), 3u);
  EXPECT_EQ(back.samples[1].id, "b");
}

TEST(Metrics, EvaluateSampleIsInvariantToPredictionAffineChanges) {
  Rng rng(44);
  const auto s = dataio::generate_scene(10, dataio::DomainTag::outdoor_like);
  auto pred = s.depth;
  std::normal_distribution<double> n(0, 0.3);
  for (auto& v : pred.data()) v = static_cast<float>(std::max(0.1, v + n(rng)));
  auto pred2 = pred;
  for (auto& v : pred2.data()) v = 0.5f * v + 2.0f;
  const auto a = evaluate_sample(pred, s.depth, s.mask), b = evaluate_sample(pred2, s.depth, s.mask);
  EXPECT_NEAR(a.abs_rel, b.abs_rel, 1e-3);
  EXPECT_NEAR(a.delta1, b.delta1, 0.5);
}
