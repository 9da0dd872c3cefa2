// SPDX-License-Identifier: Apache-2.0
#include "helpers.hpp"

using namespace dm_test;

namespace {

CodecConfig small_codec() {
  CodecConfig c;
  c.width_full = 8;
  c.width_down = 16;
  c.groups = 4;
  return c;
}

}  // namespace

TEST(Codec, LatentShapeFollowsFactor) {
  LatentCodec<float> codec(small_codec());
  Rng rng(51);
  const auto x = random_tensor<float>({2, 3, 64, 64}, rng);
  const auto z = codec.encode(x);
  EXPECT_EQ(z.shape(), (Shape{2, 4, 16, 16}));
  EXPECT_EQ(codec.decode(z).shape(), x.shape());
  EXPECT_THROW(codec.encode(random_tensor<float>({1, 3, 30, 32}, rng)), ShapeError);
  EXPECT_THROW(codec.encode(random_tensor<float>({1, 1, 32, 32}, rng)), ShapeError);
  EXPECT_THROW(codec.decode(random_tensor<float>({1, 3, 8, 8}, rng)), ShapeError);
}

TEST(Codec, SeededConstructionAndEncodingAreDeterministic) {
  LatentCodec<float> a(small_codec()), b(small_codec());
  EXPECT_EQ(a.hash(), b.hash());
  Rng rng(52);
  const auto x = random_tensor<float>({1, 3, 32, 32}, rng);
  EXPECT_EQ(a.encode(x), b.encode(x));
  auto other = small_codec();
  other.seed = 8;
  EXPECT_NE(LatentCodec<float>(other).hash(), a.hash());
}

TEST(Codec, OutOfRangeInputCountsWarnings) {
  LatentCodec<float> codec(small_codec());
  Rng rng(53);
  codec.encode(random_tensor<float>({1, 3, 16, 16}, rng));
  EXPECT_EQ(codec.range_warnings(), 0u);
  codec.encode(random_tensor<float>({1, 3, 16, 16}, rng, -3, 3));
  EXPECT_EQ(codec.range_warnings(), 1u);
}

TEST(Codec, ZeroLatentDecodesToFiniteOutput) {
  LatentCodec<float> codec(small_codec());
  const auto y = codec.decode(Tensor<float>(Shape{1, 4, 8, 8}));
  EXPECT_TRUE(y.all_finite());
}

TEST(Codec, FreezeStopsGradientsAndKeepsHash) {
  LatentCodec<double> codec(small_codec());
  const auto before = codec.hash();
  codec.freeze();
  Rng rng(54);
  auto x = Var<double>::parameter(random_tensor({1, 3, 16, 16}, rng));
  const auto w = random_tensor({1, 3, 16, 16}, rng);
  backward(probe(codec.decode(codec.encode(x)), w));
  for (const auto& [name, p] : codec.parameters()) EXPECT_FALSE(p.has_grad()) << name;
  EXPECT_TRUE(x.has_grad());  // gradients still flow through a frozen codec
  EXPECT_EQ(codec.hash(), before);
}

TEST(Codec, GradientsMatchFiniteDifferences) {
  CodecConfig cfg = small_codec();
  cfg.factor = 2;
  cfg.width_full = 4;
  cfg.width_down = 4;
  cfg.groups = 2;
  LatentCodec<double> codec(cfg);
  Rng rng(55);
  auto x = Var<double>::parameter(random_tensor({1, 3, 4, 4}, rng));
  NamedParameters<double> params{{"x", x}};
  for (auto& p : codec.parameters()) params.push_back(p);
  const auto w = random_tensor({1, 3, 4, 4}, rng);
  const auto r = gradient_check(params, [&] { return probe(codec.decode(codec.encode(x)), w); },
                                {1e-6, 1e-4, 1e-8, 3, 6});
  EXPECT_GE(r.pass_fraction(), 0.99) << "worst " << r.worst();
}

TEST(Codec, StoreRestoreRoundTrip) {
  LatentCodec<float> codec(small_codec());
  Checkpoint ck;
  codec.store(ck);
  TempDir dir("codec");
  ck.save(dir / "c.ckpt");
  const auto back = LatentCodec<float>::restore(Checkpoint::load(dir / "c.ckpt"));
  EXPECT_EQ(back.hash(), codec.hash());
  EXPECT_EQ(back.config().width_down, 16u);

  auto tampered = ck;
  tampered.meta["codec.hash"] = "0000000000000000";
  EXPECT_THROW(LatentCodec<float>::restore(tampered), IntegrityError);
}

TEST(Codec, ShortTrainingReducesReconstructionLoss) {
  dataio::SceneOptions opt;
  opt.height = opt.width = 32;
  const auto samples = dataio::generate_many(60, dataio::DomainTag::indoor_like, 8, opt);
  LatentCodec<float> codec(small_codec());
  CodecTrainConfig cfg;
  cfg.iterations = 60;
  cfg.batch = 4;
  cfg.log_every = 10;
  const auto r = train_codec(codec, samples, cfg);
  ASSERT_GE(r.curve.size(), 2u);
  double early = 0, late = 0;
  for (std::size_t k = 0; k < 2; ++k) early += r.curve[k].second;
  for (std::size_t k = r.curve.size() - 2; k < r.curve.size(); ++k) late += r.curve[k].second;
  EXPECT_LT(late, 0.5 * early);
  // frozen on return
  for (const auto& [name, p] : codec.parameters()) EXPECT_FALSE(p.requires_grad()) << name;
}
