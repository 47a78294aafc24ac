// Copyright 2026 the strl authors.
// Licensed under the Apache License, Version 2.0.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "core/ops.hpp"
#include "core/optim.hpp"
#include "core/tensor.hpp"
#include "testutil.hpp"

using namespace strl;

TEST_CASE("conv2d centered delta kernel is identity") {
  Rng rng(1);
  Tensor x = Tensor::from_data({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  std::vector<float> w(9, 0.0f);
  w[4] = 1.0f;  // center of the 3x3 kernel
  Tensor weight = Tensor::from_data({1, 1, 3, 3}, w);
  Tensor bias = Tensor::zeros({1});
  Tensor y = conv2d(x, weight, bias, 1, 1);
  REQUIRE(y.shape() == Shape{1, 1, 3, 3});
  for (size_t i = 0; i < 9; ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));
}

TEST_CASE("conv2d all-ones kernel sums 9c on constant input") {
  const float c = 0.37f;
  Tensor x = Tensor::full({1, 1, 6, 6}, c);
  Tensor weight = Tensor::full({1, 1, 3, 3}, 1.0f);
  Tensor bias = Tensor::zeros({1});
  Tensor y = conv2d(x, weight, bias, 1, 0);
  REQUIRE(y.shape() == Shape{1, 1, 4, 4});
  for (size_t i = 0; i < y.size(); ++i) CHECK(y.data()[i] == doctest::Approx(9.0f * c));
}

TEST_CASE("conv2d rejects channel mismatch with shape diagnostic") {
  Tensor x = Tensor::zeros({1, 2, 4, 4});
  Tensor w = Tensor::zeros({3, 4, 3, 3});
  Tensor b = Tensor::zeros({3});
  CHECK_THROWS_WITH_AS(conv2d(x, w, b, 1, 1), doctest::Contains("channels"), InvalidArgument);
}

TEST_CASE("transpose_conv2d of 2x2 ones with 3x3 ones kernel has unit corners") {
  Tensor x = Tensor::full({1, 1, 2, 2}, 1.0f);
  Tensor w = Tensor::full({1, 1, 3, 3}, 1.0f);
  Tensor b = Tensor::zeros({1});
  Tensor y = transpose_conv2d(x, w, b, 2, 0);
  REQUIRE(y.shape() == Shape{1, 1, 5, 5});
  CHECK(y.data()[0] == doctest::Approx(1.0f));
  CHECK(y.data()[4] == doctest::Approx(1.0f));
  CHECK(y.data()[20] == doctest::Approx(1.0f));
  CHECK(y.data()[24] == doctest::Approx(1.0f));
  // center sees all four inputs
  CHECK(y.data()[12] == doctest::Approx(4.0f));
}

TEST_CASE("batch_norm train normalizes each channel to zero mean unit variance") {
  Rng rng(7);
  TensorD x = test::random_tensor(rng, {2, 3, 4, 4}, -2.0, 2.0, false);
  TensorD scale = TensorD::full({3}, 1.0);
  TensorD shift = TensorD::zeros({3});
  auto stats = BnStats<double>::make(3);
  TensorD y = batch_norm(x, scale, shift, stats, BnMode::train);
  const size_t pl = 16, n = 2 * pl;
  for (int c = 0; c < 3; ++c) {
    double mean = 0, var = 0;
    for (int b = 0; b < 2; ++b)
      for (size_t p = 0; p < pl; ++p) mean += y.data()[(b * 3 + c) * pl + p];
    mean /= n;
    for (int b = 0; b < 2; ++b)
      for (size_t p = 0; p < pl; ++p) {
        double d = y.data()[(b * 3 + c) * pl + p] - mean;
        var += d * d;
      }
    var /= n;
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("batch_norm infer applies the closed-form affine map") {
  const double c = 0.8, m = 0.25, v = 2.0, gamma = 1.5, beta = -0.5, eps = 1e-5;
  TensorD x = TensorD::full({1, 1, 2, 2}, c);
  TensorD scale = TensorD::full({1}, gamma);
  TensorD shift = TensorD::full({1}, beta);
  auto stats = BnStats<double>::make(1);
  stats.mean[0] = m;
  stats.var[0] = v;
  TensorD y = batch_norm(x, scale, shift, stats, BnMode::infer);
  const double expect = gamma * (c - m) / std::sqrt(v + eps) + beta;
  for (size_t i = 0; i < 4; ++i) CHECK(y.data()[i] == doctest::Approx(expect));
}

TEST_CASE("batch_norm train rejects single-sample batches") {
  TensorD x = TensorD::zeros({1, 2, 1, 1});
  TensorD scale = TensorD::full({2}, 1.0);
  TensorD shift = TensorD::zeros({2});
  auto stats = BnStats<double>::make(2);
  CHECK_THROWS_AS(batch_norm(x, scale, shift, stats, BnMode::train), InvalidArgument);
}

TEST_CASE("pointwise basics") {
  Tensor x = Tensor::from_data({3}, {0.0f, -1.5f, 2.0f});
  CHECK(sigmoid(x).data()[0] == doctest::Approx(0.5f));
  CHECK(relu(x).data()[1] == 0.0f);
  CHECK(relu(x).data()[2] == doctest::Approx(2.0f));
  CHECK(abs(x).data()[1] == doctest::Approx(1.5f));
  CHECK_THROWS_AS(add(Tensor::zeros({2, 2}), Tensor::zeros({3})), InvalidArgument);
}

TEST_CASE("concat_channels layout, shapes, gradient") {
  Rng rng(3);
  TensorD a = test::random_tensor(rng, {1, 2, 4, 4});
  TensorD b = test::random_tensor(rng, {1, 3, 4, 4});
  TensorD y = concat_channels(a, b);
  REQUIRE(y.shape() == Shape{1, 5, 4, 4});
  // leading channels hold a, trailing hold b, exactly
  for (size_t i = 0; i < a.size(); ++i) CHECK(y.data()[i] == a.data()[i]);
  for (size_t i = 0; i < b.size(); ++i) CHECK(y.data()[a.size() + i] == b.data()[i]);
  reduce_sum(y).backward();
  for (size_t i = 0; i < a.size(); ++i) CHECK(a.grad()[i] == doctest::Approx(1.0));
  for (size_t i = 0; i < b.size(); ++i) CHECK(b.grad()[i] == doctest::Approx(1.0));
  CHECK_THROWS_AS(concat_channels(a, TensorD::zeros({1, 1, 3, 3})), InvalidArgument);
}

TEST_CASE("global_average_pool constant input and mask arithmetic") {
  Tensor c = Tensor::full({2, 3, 5, 5}, 0.42f);
  Tensor y = global_average_pool(c);
  for (size_t i = 0; i < y.size(); ++i) CHECK(y.data()[i] == doctest::Approx(0.42f));

  Tensor x = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor m = Tensor::from_data({1, 1, 2, 2}, {1, 0, 0, 1});
  Tensor ym = global_average_pool(x, &m);
  CHECK(ym.data()[0] == doctest::Approx(2.5f));

  // constant stays constant under any mask
  Tensor cm = global_average_pool(c, nullptr);
  Tensor mask = Tensor::zeros({2, 1, 5, 5});
  mask.data()[3] = 1.0f;
  mask.data()[25 + 7] = 1.0f;
  Tensor ym2 = global_average_pool(c, &mask);
  for (size_t i = 0; i < ym2.size(); ++i) CHECK(ym2.data()[i] == doctest::Approx(0.42f));

  Tensor empty = Tensor::zeros({1, 1, 2, 2});
  CHECK_THROWS_AS(global_average_pool(x, &empty), InvalidArgument);
}

TEST_CASE("backward of sum gives ones, of sum of squares gives 2x") {
  Rng rng(11);
  TensorD x = test::random_tensor(rng, {2, 3});
  reduce_sum(x).backward();
  for (size_t i = 0; i < x.size(); ++i) CHECK(x.grad()[i] == doctest::Approx(1.0));

  TensorD z = test::random_tensor(rng, {4});
  reduce_sum(mul(z, z)).backward();
  for (size_t i = 0; i < z.size(); ++i) CHECK(z.grad()[i] == doctest::Approx(2.0 * z.data()[i]));
}

TEST_CASE("backward rejects non-scalar roots and accumulates across calls") {
  TensorD x = TensorD::full({2}, 1.0);
  x.set_requires_grad(true);
  TensorD y = mul(x, x);
  CHECK_THROWS_AS(y.backward(), InvalidArgument);

  TensorD s = reduce_sum(mul(x, x));
  s.backward();
  s.backward();
  CHECK(x.grad()[0] == doctest::Approx(4.0));  // 2x accumulated twice
}

TEST_CASE("forward determinism: identical inputs give bit-identical outputs") {
  Rng rng(5);
  TensorD x = test::random_tensor(rng, {2, 4, 8, 8}, -1, 1, false);
  TensorD w = test::random_tensor(rng, {6, 4, 3, 3}, -1, 1, false);
  TensorD b = test::random_tensor(rng, {6}, -1, 1, false);
  TensorD y1 = conv2d(x, w, b, 2, 1);
  TensorD y2 = conv2d(x, w, b, 2, 1);
  for (size_t i = 0; i < y1.size(); ++i) CHECK(y1.data()[i] == y2.data()[i]);
}

TEST_CASE("forward ops stay finite for inputs up to 1e3") {
  Rng rng(17);
  TensorD x = test::random_tensor(rng, {1, 2, 6, 6}, -1e3, 1e3, false);
  TensorD w = test::random_tensor(rng, {2, 2, 3, 3}, -1e3, 1e3, false);
  TensorD b = test::random_tensor(rng, {2}, -1e3, 1e3, false);
  for (const TensorD& t : {conv2d(x, w, b, 1, 1), relu(x), sigmoid(x), tanh(x), abs(x),
                           mul(x, x), global_average_pool(x)}) {
    for (size_t i = 0; i < t.size(); ++i) CHECK(std::isfinite(t.data()[i]));
  }
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  AdamT<double> opt(0.1);
  TensorD p = TensorD::from_data({2}, {1.0, -2.0});
  p.set_requires_grad(true);
  p.grad();  // allocate zeros
  opt.register_param("p", p);
  opt.step();
  CHECK(p.data()[0] == doctest::Approx(1.0));
  CHECK(p.data()[1] == doctest::Approx(-2.0));
}

TEST_CASE("adam: first step moves by about the learning rate") {
  const double lr = 0.05, g = 3.7;
  AdamT<double> opt(lr);
  TensorD p = TensorD::from_data({1}, {0.0});
  p.set_requires_grad(true);
  p.grad()[0] = g;
  opt.register_param("p", p);
  opt.step();
  CHECK(std::abs(std::abs(p.data()[0]) - lr) < 1e-6);
  CHECK(p.data()[0] < 0.0);  // moves against the gradient
}

TEST_CASE("adam: 100 steps shrink f(x)=x^2 from x=1") {
  AdamT<double> opt(0.1);
  TensorD p = TensorD::from_data({1}, {1.0});
  p.set_requires_grad(true);
  opt.register_param("p", p);
  // independent scalar simulation as the oracle: track f along the way
  double prev = 1.0;
  int non_increasing_after_transient = 0;
  for (int i = 0; i < 100; ++i) {
    opt.zero_grad();
    TensorD f = mul(p, p);
    reduce_sum(f).backward();
    opt.step();
    double cur = p.data()[0] * p.data()[0];
    if (i >= 20 && cur <= prev + 1e-12) ++non_increasing_after_transient;
    prev = cur;
  }
  CHECK(prev < 0.01);
  CHECK(non_increasing_after_transient >= 75);
}

TEST_CASE("adam: non-finite gradient is rejected with the parameter name") {
  AdamT<double> opt(0.1);
  TensorD p = TensorD::from_data({1}, {1.0});
  p.set_requires_grad(true);
  p.grad()[0] = std::numeric_limits<double>::quiet_NaN();
  opt.register_param("theta", p);
  CHECK_THROWS_WITH_AS(opt.step(), doctest::Contains("theta"), NumericError);
}
