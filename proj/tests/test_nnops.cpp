#include <gtest/gtest.h>

#include <cmath>

#include "convformer/error.hpp"
#include "convformer/nnops.hpp"
#include "oracles.hpp"

using namespace convformer;

namespace {

Tensor<double> rand_t(Rng& rng, Shape4 s) { return oracle::random_tensor(rng, s); }

const Tensor<float>* const kNoBiasF = nullptr;
const Tensor<double>* const kNoBiasD = nullptr;

}  // namespace

TEST(ConvGeometry, OutputSizeAndErrors) {
  EXPECT_EQ(conv_output_size(224, 7, {2, 3, 1, 1}), 112);
  EXPECT_EQ(conv_output_size(56, 2, {2, 0, 1, 1}), 28);
  EXPECT_EQ(conv_output_size(8, 7, {1, 9, 3, 1}), 8);
  EXPECT_EQ(same_padding(7, 3), 9);
  EXPECT_THROW(conv_output_size(3, 7, {1, 0, 1, 1}), GeometryError);
  Tensor<float> x({1, 4, 5, 5}), w({4, 2, 3, 3});
  EXPECT_THROW(conv2d(x, w, kNoBiasF, {1, 1, 1, 1}), ShapeError);  // C_in/groups mismatch
  EXPECT_THROW(conv2d(x, w, kNoBiasF, {1, 1, 1, 3}), ShapeError);  // groups do not divide
  EXPECT_THROW(conv2d(x, Tensor<float>({4, 4, 3, 3}), kNoBiasF, {0, 1, 1, 1}), ConfigError);
  EXPECT_THROW(conv2d(Tensor<float>({1, 4, 2, 2}), Tensor<float>({4, 4, 3, 3}), kNoBiasF, {}), GeometryError);
}

TEST(Conv2d, DepthwiseIdentityKernelIsBitwiseIdentity) {
  Rng rng(2);
  auto x = Tensor<float>::create({2, 3, 6, 5}, init::Uniform{rng, -3, 3});
  Tensor<float> w({3, 1, 3, 3});
  for (int c = 0; c < 3; ++c) w(c, 0, 1, 1) = 1.0f;
  EXPECT_EQ(conv2d(x, w, kNoBiasF, {1, 1, 1, 3}), x);
}

TEST(Conv2d, OneByOneChannelSum) {
  Tensor<float> x({1, 3, 2, 2});
  x(0, 0, 1, 0) = 2;
  x(0, 1, 1, 0) = 3;
  x(0, 2, 1, 0) = 4;
  Tensor<float> w({1, 3, 1, 1}, 1.0f);
  EXPECT_EQ(conv2d(x, w, kNoBiasF, {})(0, 0, 1, 0), 9.0f);
}

TEST(Conv2d, DilatedDepthwiseMatchesOracle) {
  Rng rng(20);
  auto x = rand_t(rng, {1, 2, 5, 5});
  auto w = rand_t(rng, {2, 1, 5, 5});
  const auto got = conv2d(x, w, kNoBiasD, {1, 4, 2, 2});
  EXPECT_LT(oracle::max_abs_diff(got, oracle::conv2d(x, w, nullptr, 1, 4, 2, 2)), 1e-6);
}

TEST(Conv2d, RandomizedCasesMatchOracle) {
  Rng rng(99);
  for (int trial = 0; trial < 150; ++trial) {
    const std::int64_t groups = 1 + static_cast<std::int64_t>(rng.below(3));
    const std::int64_t cin = groups * (1 + static_cast<std::int64_t>(rng.below(3)));
    const std::int64_t cout = groups * (1 + static_cast<std::int64_t>(rng.below(3)));
    const std::int64_t k = 1 + static_cast<std::int64_t>(rng.below(5));
    const std::int64_t dil = 1 + static_cast<std::int64_t>(rng.below(3));
    const std::int64_t stride = 1 + static_cast<std::int64_t>(rng.below(2));
    const std::int64_t pad = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(dil * (k - 1) / 2 + 2)));
    const std::int64_t span = dil * (k - 1) + 1;
    const std::int64_t h = std::max<std::int64_t>(span - 2 * pad, 1) + static_cast<std::int64_t>(rng.below(5));
    const std::int64_t wdt = std::max<std::int64_t>(span - 2 * pad, 1) + static_cast<std::int64_t>(rng.below(5));
    auto x = rand_t(rng, {1 + static_cast<std::int64_t>(rng.below(2)), cin, h, wdt});
    auto w = rand_t(rng, {cout, cin / groups, k, k});
    auto b = rand_t(rng, {1, 1, 1, cout});
    const bool use_bias = rng.bernoulli(0.5);
    const ConvGeometry g{stride, pad, dil, groups};
    const auto got = conv2d(x, w, use_bias ? &b : nullptr, g);
    const auto want = oracle::conv2d(x, w, use_bias ? &b : nullptr, stride, pad, dil, groups);
    ASSERT_EQ(got.shape(), want.shape()) << "trial " << trial;
    EXPECT_LT(oracle::max_abs_diff(got, want), 1e-6) << "trial " << trial;
  }
}

TEST(BatchNorm, ConstantInputTrainMode) {
  auto bn = BatchNormState<float>::make(2);
  Tensor<float> x({2, 2, 3, 3}, 4.0f);
  {
    const auto out = batchnorm2d(x, bn, Mode::train);
    for (float v : out.data()) EXPECT_EQ(v, 0.0f);
  }
  bn.beta = Tensor<float>::constant({1, 2, 1, 1}, 5.0f);
  {
    const auto out = batchnorm2d(x, bn, Mode::train);
    for (float v : out.data()) EXPECT_EQ(v, 5.0f);
  }
}

TEST(BatchNorm, TrainOutputIsStandardized) {
  Rng rng(4);
  auto x = Tensor<double>::create({4, 3, 8, 8}, init::Uniform{rng, -2, 5});
  auto bn = BatchNormState<double>::make(3);
  const auto y = batchnorm2d(x, bn, Mode::train);
  for (int c = 0; c < 3; ++c) {
    double sum = 0, sq = 0;
    for (int n = 0; n < 4; ++n)
      for (int h = 0; h < 8; ++h)
        for (int w = 0; w < 8; ++w) sum += y(n, c, h, w);
    const double mean = sum / 256;
    for (int n = 0; n < 4; ++n)
      for (int h = 0; h < 8; ++h)
        for (int w = 0; w < 8; ++w) sq += (y(n, c, h, w) - mean) * (y(n, c, h, w) - mean);
    EXPECT_LT(std::abs(mean), 1e-5);
    EXPECT_NEAR(sq / 256, 1.0, 1e-3);  // biased variance
  }
}

TEST(BatchNorm, RunningStatsMomentumAndEvalMode) {
  Tensor<double> x({2, 1, 1, 2}, std::vector<double>{1, 3, 5, 7});
  auto bn = BatchNormState<double>::make(1);
  batchnorm2d(x, bn, Mode::train);
  EXPECT_NEAR(bn.running_mean[0], 0.1 * 4.0, 1e-12);
  EXPECT_NEAR(bn.running_var[0], 0.9 * 1.0 + 0.1 * 5.0, 1e-12);
  const auto before = bn.running_mean;
  const auto y = batchnorm2d(x, bn, Mode::eval);
  EXPECT_EQ(bn.running_mean, before);
  EXPECT_NEAR(y[0], (1.0 - 0.4) / std::sqrt(1.4 + 1e-5), 1e-12);
}

TEST(BatchNorm, MatchesOracleBothModes) {
  Rng rng(8);
  for (bool train : {true, false}) {
    auto x = rand_t(rng, {3, 4, 5, 5});
    auto bn = BatchNormState<double>::make(4);
    oracle::randomize(bn, rng);
    const auto want = oracle::batchnorm(x, bn, train);
    EXPECT_LT(oracle::max_abs_diff(batchnorm2d(x, bn, train ? Mode::train : Mode::eval), want), 1e-10);
  }
}

TEST(BatchNorm, ChannelMismatch) {
  auto bn = BatchNormState<float>::make(3);
  EXPECT_THROW(batchnorm2d(Tensor<float>({1, 4, 2, 2}), bn, Mode::eval), ShapeError);
}

TEST(Activations, PointValues) {
  EXPECT_EQ(sigmoid(0.0), 0.5);
  EXPECT_EQ(activation(Tensor<float>({1, 1, 1, 2}, std::vector<float>{-3, 3}), Activation::relu),
            (Tensor<float>({1, 1, 1, 2}, std::vector<float>{0, 3})));
  EXPECT_NEAR(gelu(1.0), 0.8413447460685429, 1e-5);
  EXPECT_NEAR(gelu(1.0), oracle::gelu(1.0), 1e-15);
  EXPECT_EQ(gelu(0.0), 0.0);
}

TEST(GlobalAvgPool, ValuesAndOracle) {
  Tensor<float> c({1, 2, 3, 3}, 1.75f);
  {
    const auto out = global_avg_pool(c);
    for (float v : out.data()) EXPECT_EQ(v, 1.75f);
  }
  Tensor<double> x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  EXPECT_EQ(global_avg_pool(x)[0], 2.5);
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    auto r = rand_t(rng, {2, 3, 1 + static_cast<std::int64_t>(rng.below(8)), 1 + static_cast<std::int64_t>(rng.below(8))});
    EXPECT_LT(oracle::max_abs_diff(global_avg_pool(r), oracle::global_avg_pool(r)), 1e-6);
  }
  EXPECT_THROW(global_avg_pool(Tensor<float>({1, 1, 0, 3})), GeometryError);
}

TEST(Linear, IdentityArithmeticAndOracle) {
  Rng rng(10);
  auto x = rand_t(rng, {3, 4, 1, 1});
  Tensor<double> eye({1, 1, 4, 4});
  for (int i = 0; i < 4; ++i) eye(0, 0, i, i) = 1;
  EXPECT_EQ(linear(x, eye, kNoBiasD), x);

  Tensor<double> v({1, 2, 1, 1}, std::vector<double>{1, 2});
  Tensor<double> w({1, 1, 2, 2}, std::vector<double>{1, 0, 0, 2});
  Tensor<double> b({1, 1, 1, 2}, std::vector<double>{1, 1});
  EXPECT_EQ(linear(v, w, &b), (Tensor<double>({1, 2, 1, 1}, std::vector<double>{2, 5})));

  for (int trial = 0; trial < 50; ++trial) {
    auto xi = rand_t(rng, {2, 8, 1, 1});
    auto wi = rand_t(rng, {1, 1, 8, 16});
    auto bi = rand_t(rng, {1, 1, 1, 16});
    EXPECT_LT(oracle::max_abs_diff(linear(xi, wi, &bi), oracle::linear(xi, wi, &bi)), 1e-6);
  }
  EXPECT_THROW(linear(rand_t(rng, {1, 5, 1, 1}), rand_t(rng, {1, 1, 4, 2}), kNoBiasD), ShapeError);
}

TEST(PointwiseLinear, MatchesOracle) {
  Rng rng(12);
  for (int trial = 0; trial < 30; ++trial) {
    auto x = rand_t(rng, {2, 5, 3, 4});
    LinearParams<double> p{rand_t(rng, {1, 1, 5, 7}), rand_t(rng, {1, 1, 1, 7})};
    EXPECT_LT(oracle::max_abs_diff(pointwise_linear(x, p), oracle::pointwise_linear(x, p)), 1e-6);
  }
}

TEST(DropPath, IdentityCases) {
  Rng rng(1);
  auto x = Tensor<float>::create({4, 2, 3, 3}, init::Uniform{rng, -1, 1});
  Rng r(5);
  EXPECT_EQ(drop_path(x, 0.0, Mode::train, r), x);
  EXPECT_EQ(drop_path(x, 0.2, Mode::eval, r), x);
  EXPECT_EQ(r.state(), Rng(5).state());
  EXPECT_THROW(drop_path(x, 1.0, Mode::train, r), ConfigError);
  EXPECT_THROW(drop_path(x, -0.1, Mode::train, r), ConfigError);
}

TEST(DropPath, KeptFractionAndScale) {
  Tensor<float> x({1000, 1, 1, 1}, 1.0f);
  Rng rng(17);
  const auto y = drop_path(x, 0.5, Mode::train, rng);
  int kept = 0;
  for (float v : y.data()) {
    if (v != 0.0f) {
      ++kept;
      EXPECT_EQ(v, 2.0f);
    }
  }
  EXPECT_NEAR(kept / 1000.0, 0.5, 0.05);
}
