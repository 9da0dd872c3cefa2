// SPDX-License-Identifier: Apache-2.0
#include "helpers.hpp"

using namespace dm_test;

TEST(Autograd, ConstantsRecordNoGraph) {
  auto a = Var<double>::constant(Tensor<double>(Shape{1}, 1.0));
  auto y = scale(add(a, a), 3.0);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_EQ(y.node()->parents.size(), 0u);
}

TEST(Autograd, DiamondGraphAccumulatesBothPaths) {
  // y = (2a) + (a * 3) through a shared node: dy/da = 5
  auto a = Var<double>::parameter(Tensor<double>(Shape{1}, 1.5));
  auto shared = scale(a, 1.0);
  auto y = add(scale(shared, 2.0), scale(shared, 3.0));
  backward(y);
  EXPECT_DOUBLE_EQ(a.grad()[0], 5.0);
}

TEST(Autograd, RepeatedBackwardAccumulatesIntoParameters) {
  auto a = Var<double>::parameter(Tensor<double>(Shape{1}, 0.0));
  for (int i = 0; i < 3; ++i) backward(scale(a, 2.0));
  EXPECT_DOUBLE_EQ(a.grad()[0], 6.0);
  a.zero_grad();
  EXPECT_FALSE(a.has_grad());
}

TEST(Autograd, BackwardSeedScalesGradients) {
  auto a = Var<double>::parameter(Tensor<double>(Shape{1}, 0.0));
  backward(scale(a, 2.0), 0.25);
  EXPECT_DOUBLE_EQ(a.grad()[0], 0.5);
}

TEST(Autograd, NonScalarRootIsRejected) {
  auto a = Var<double>::parameter(Tensor<double>(Shape{2}, 0.0));
  EXPECT_THROW(backward(a), ShapeError);
}

TEST(Autograd, DeepChainDoesNotOverflowStack) {
  auto a = Var<double>::parameter(Tensor<double>(Shape{1}, 1.0));
  Var<double> h = a;
  for (int i = 0; i < 5000; ++i) h = scale(h, 1.0);
  backward(h);
  EXPECT_DOUBLE_EQ(a.grad()[0], 1.0);
}
