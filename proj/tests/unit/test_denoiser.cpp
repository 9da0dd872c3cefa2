// SPDX-License-Identifier: Apache-2.0
#include "helpers.hpp"

using namespace dm_test;

namespace {

UNetConfig tiny(std::size_t w = 8) {
  UNetConfig c;
  c.widths = {w, 2 * w, 2 * w};
  c.groups = 4;
  return c;
}

}  // namespace

TEST(UNet, DefaultModelShapesAndTaps) {
  UNet<float> net;
  Rng rng(61);
  const auto z = Var<float>::constant(random_tensor<float>({2, 4, 16, 16}, rng));
  const auto out = net.forward(z);
  EXPECT_EQ(out.latent.shape(), (Shape{2, 4, 16, 16}));
  EXPECT_EQ(out.tap(TapLocation::D1).shape(), (Shape{2, 32, 16, 16}));
  EXPECT_EQ(out.tap(TapLocation::D2).shape(), (Shape{2, 64, 8, 8}));
  EXPECT_EQ(out.tap(TapLocation::Mid).shape(), (Shape{2, 128, 4, 4}));
  for (auto loc : {TapLocation::D1, TapLocation::D2, TapLocation::Mid}) {
    const auto [c, div] = net.tap_geometry(loc);
    EXPECT_EQ(out.tap(loc).shape()[1], c);
    EXPECT_EQ(out.tap(loc).shape()[2], 16 / div);
  }
  EXPECT_THROW(net.forward(Var<float>::constant(Tensor<float>(Shape{1, 4, 6, 8}))), ShapeError);
  EXPECT_THROW(net.forward(Var<float>::constant(Tensor<float>(Shape{1, 3, 8, 8}))), ShapeError);
  EXPECT_EQ(parse_tap_location("mid"), TapLocation::Mid);
  EXPECT_THROW(parse_tap_location("up1"), ConfigError);
}

TEST(UNet, SeededModelIsDeterministic) {
  UNet<float> a(tiny()), b(tiny());
  Rng rng(62);
  const auto z = random_tensor<float>({1, 4, 8, 8}, rng);
  EXPECT_EQ(a.predict_latent(z), b.predict_latent(z));
  EXPECT_EQ(parameter_hash(a.parameters()), parameter_hash(b.parameters()));
}

TEST(UNet, GoldenFingerprint) {
  // Pins the default initialization and forward pass on this toolchain.
  UNet<float> net;
  Tensor<float> z(Shape{1, 4, 8, 8});
  for (std::size_t k = 0; k < z.size(); ++k) z[k] = static_cast<float>(std::sin(0.37 * static_cast<double>(k)));
  const auto y = net.predict_latent(z);
  double sum = 0, sq = 0;
  for (float v : y.values()) {
    sum += v;
    sq += double(v) * v;
  }
  EXPECT_EQ(hex64(parameter_hash(net.parameters())), "d9a3c5a57ec44fa5");
  EXPECT_NEAR(sum, 0.97896517, 1e-3);
  EXPECT_NEAR(sq, 76.6862604, 1e-3);
}

TEST(UNet, IterativeInferenceWithOneStepEqualsSinglePass) {
  UNet<float> net(tiny());
  Rng rng(63);
  const auto z = random_tensor<float>({1, 4, 8, 8}, rng);
  EXPECT_EQ(net.infer_iterative(z, 1), net.predict_latent(z));
  EXPECT_EQ(net.infer_iterative(z, 2), net.predict_latent(net.predict_latent(z)));
  EXPECT_THROW(net.infer_iterative(z, 0), ConfigError);
}

TEST(UNet, EnhancerStartsAsIdentityAndCanBeRemoved) {
  UNet<float> net(tiny());
  Rng rng(64);
  const auto z = random_tensor<float>({2, 4, 8, 8}, rng);
  const auto plain = net.predict_latent(z);
  const auto n_backbone = net.parameters().size();
  net.enable_enhancer();
  EXPECT_GT(net.parameters().size(), n_backbone);
  const auto enhanced = net.predict_latent(z);
  for (std::size_t k = 0; k < plain.size(); ++k) EXPECT_NEAR(enhanced[k], plain[k], 1e-5);
  net.disable_enhancer();
  EXPECT_EQ(net.predict_latent(z), plain);
  EXPECT_EQ(net.parameters().size(), n_backbone);
}

TEST(UNet, StoreRestoreKeepsEnhancer) {
  UNet<float> net(tiny());
  net.enable_enhancer(Activation::gelu_tanh);
  Checkpoint ck;
  net.store(ck);
  const auto back = UNet<float>::restore(ck);
  ASSERT_TRUE(back.enhancer_enabled());
  EXPECT_EQ(back.enhancer()->activation(), Activation::gelu_tanh);
  EXPECT_EQ(parameter_hash(back.parameters()), parameter_hash(net.parameters()));
}

TEST(UNet, GradientsMatchFiniteDifferences) {
  UNetConfig cfg;
  cfg.latent_channels = 2;
  cfg.widths = {4, 4, 4};
  cfg.groups = 2;
  UNet<double> net(cfg);
  net.enable_enhancer();
  Rng rng(65);
  // move the fusion off identity so the frequency path is exercised
  auto fe = net.enhancer_parameters();
  for (auto& [name, p] : fe) p.value() = random_tensor(p.shape(), rng, -0.5, 0.5);
  auto z = Var<double>::parameter(random_tensor({1, 2, 8, 8}, rng));
  NamedParameters<double> params{{"z", z}};
  for (auto& p : net.parameters()) params.push_back(p);
  const auto w = random_tensor({1, 2, 8, 8}, rng);
  const auto r = gradient_check(params, [&] { return probe(net.predict_latent(z), w); },
                                {1e-6, 1e-3, 1e-8, 2, 7});
  EXPECT_GE(r.pass_fraction(), 0.99) << "worst " << r.worst();
}
