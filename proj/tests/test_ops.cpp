#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "avnet/gradcheck.hpp"
#include "avnet/ops.hpp"
#include "test_support.hpp"

namespace avnet {
namespace {

using TensorD = Tensor<double>;
using TensorF = Tensor<float>;
using testing::random_tensor;

std::vector<double> to_vec(std::span<const double> s) { return {s.begin(), s.end()}; }

TEST(Conv2dSpec, OutputSizeFollowsClosedForm) {
  for (std::size_t k : {1u, 3u, 7u})
    for (std::size_t s : {1u, 2u})
      for (std::size_t d : {1u, 2u, 4u, 8u, 12u})
        for (std::size_t pad : {0u, 1u, 5u, 12u}) {
          Conv2dSpec spec{1, 1, k, k, s, d, pad, pad};
          const long long num = 100 + 2 * static_cast<long long>(pad) -
                                static_cast<long long>(d * (k - 1)) - 1;
          if (num < 0) {
            EXPECT_THROW(spec.out_h(100), ShapeError);
            continue;
          }
          EXPECT_EQ(spec.out_h(100), static_cast<std::size_t>(num / s + 1));
        }
}

TEST(Conv2dSpec, SamePaddingPreservesSize) {
  for (std::size_t d : {1u, 2u, 4u, 8u, 12u}) {
    auto spec = Conv2dSpec::same(1, 1, 3, 3, d);
    EXPECT_EQ(spec.pad_h, d);
    EXPECT_EQ(spec.out_h(64), 64u);
  }
  auto wide = Conv2dSpec::same(1, 1, 1, 7);
  EXPECT_EQ(wide.pad_h, 0u);
  EXPECT_EQ(wide.pad_w, 3u);
}

TEST(Conv2d, UnitKernelIsIdentity) {
  std::mt19937_64 rng(1);
  auto x = random_tensor<double>({2, 1, 5, 4}, rng);
  TensorD w({1, 1, 1, 1}, {1.0});
  auto y = conv2d(x, w, TensorD(), Conv2dSpec{1, 1, 1, 1});
  EXPECT_EQ(y.values(), x.values());
}

TEST(Conv2d, AllOnesKernelCenterSumsWindow) {
  std::vector<double> v(9);
  std::iota(v.begin(), v.end(), 1.0);
  TensorD x({1, 1, 3, 3}, v);
  auto w = TensorD::full({1, 1, 3, 3}, 1.0);
  auto y = conv2d(x, w, TensorD::zeros({1}), Conv2dSpec::same(1, 1, 3, 3));
  EXPECT_DOUBLE_EQ(y.at(0, 0, 1, 1), 45.0);
  // Corner only sees the 2x2 block {1,2,4,5}.
  EXPECT_DOUBLE_EQ(y.at(0, 0, 0, 0), 12.0);
}

TEST(Conv2d, DilatedKernelSpreadsOneHot) {
  auto x = TensorD::zeros({1, 1, 5, 5});
  x.mutable_data()[12] = 1.0;
  auto w = TensorD::full({1, 1, 3, 3}, 1.0);
  auto y = conv2d(x, w, TensorD(), Conv2dSpec::same(1, 1, 3, 3, 2));
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 5; ++c) {
      const bool expected = (r == 0 || r == 2 || r == 4) && (c == 0 || c == 2 || c == 4);
      EXPECT_EQ(y.at(0, 0, r, c), expected ? 1.0 : 0.0) << r << "," << c;
    }
}

TEST(Conv2d, ChannelMismatchIsRejected) {
  auto x = TensorD::zeros({1, 2, 5, 5});
  auto w = TensorD::zeros({1, 3, 3, 3});
  EXPECT_THROW(conv2d(x, w, TensorD(), Conv2dSpec::same(3, 1, 3, 3)), ShapeError);
}

TEST(Conv2d, KernelLargerThanInputIsRejected) {
  auto x = TensorD::zeros({1, 1, 4, 4});
  auto w = TensorD::zeros({1, 1, 3, 3});
  EXPECT_THROW(conv2d(x, w, TensorD(), Conv2dSpec{1, 1, 3, 3, 1, 4, 0, 0}), ShapeError);
}

struct ConvCase {
  std::size_t kh, kw, stride, dilation, pad_h, pad_w;
};

std::vector<ConvCase> conv_grid() {
  std::vector<ConvCase> cases;
  for (std::size_t k : {1u, 3u, 7u})
    for (std::size_t s : {1u, 2u})
      for (std::size_t d : {1u, 2u, 4u, 8u, 12u})
        for (std::size_t p : {0u, 1u})
          cases.push_back({k, k, s, d, p * d * (k - 1) / 2, p * d * (k - 1) / 2});
  cases.push_back({1, 7, 1, 1, 0, 3});
  cases.push_back({7, 1, 1, 1, 3, 0});
  return cases;
}

TEST(Conv2d, DilationOneMatchesNestedLoopsBitExactly) {
  std::mt19937_64 rng(5);
  for (const auto& cc : conv_grid()) {
    if (cc.dilation != 1) continue;
    Conv2dSpec spec{3, 4, cc.kh, cc.kw, cc.stride, 1, cc.pad_h, cc.pad_w};
    auto x = random_tensor<double>({2, 3, 11, 10}, rng);
    auto w = random_tensor<double>({4, 3, cc.kh, cc.kw}, rng);
    auto b = random_tensor<double>({4}, rng);
    std::size_t oh = 0, ow = 0;
    auto ref = testing::naive_conv2d(x.values(), 2, 11, 10, w.values(), b.values(), spec, oh, ow);
    auto y = conv2d(x, w, b, spec);
    ASSERT_EQ(y.shape(), (Shape{2, 4, oh, ow}));
    EXPECT_EQ(y.values(), ref) << "k=" << cc.kh << "x" << cc.kw << " s=" << cc.stride;
  }
}

TEST(Conv2d, DilatedMatchesZeroInsertedKernel) {
  std::mt19937_64 rng(6);
  for (const auto& cc : conv_grid()) {
    Conv2dSpec spec{2, 3, cc.kh, cc.kw, cc.stride, cc.dilation, cc.pad_h, cc.pad_w};
    const std::size_t size = spec.extent_h() + 6;
    auto x = random_tensor<double>({1, 2, size, size + 1}, rng);
    auto w = random_tensor<double>({3, 2, cc.kh, cc.kw}, rng);
    auto b = random_tensor<double>({3}, rng);
    Conv2dSpec dense;
    auto wz = testing::zero_insert_kernel(w.values(), spec, dense);
    std::size_t oh = 0, ow = 0;
    auto ref = testing::naive_conv2d(x.values(), 1, size, size + 1, wz, b.values(), dense, oh, ow);
    auto y = conv2d(x, w, b, spec);
    ASSERT_EQ(y.numel(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) {
      ASSERT_NEAR(y[i], ref[i], 1e-6) << "d=" << cc.dilation << " k=" << cc.kh;
    }
  }
}

TEST(Conv2d, FloatAndDoubleAgree) {
  std::mt19937_64 rng(8);
  auto x = random_tensor<double>({1, 3, 9, 9}, rng);
  auto w = random_tensor<double>({2, 3, 3, 3}, rng);
  auto spec = Conv2dSpec::same(3, 2, 3, 3, 2);
  auto yd = conv2d(x, w, TensorD(), spec);
  auto yf = conv2d(x.cast<float>(), w.cast<float>(), TensorF(), spec);
  for (std::size_t i = 0; i < yd.numel(); ++i) EXPECT_NEAR(yd[i], yf[i], 1e-5);
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  const std::vector<Conv2dSpec> specs{
      Conv2dSpec::same(2, 3, 3, 3),       Conv2dSpec::same(2, 3, 3, 3, 2),
      Conv2dSpec::same(2, 3, 3, 3, 4),    Conv2dSpec::same(2, 3, 3, 3, 8),
      Conv2dSpec::same(2, 3, 3, 3, 12),   Conv2dSpec{2, 3, 3, 3, 2, 1, 1, 1},
      Conv2dSpec::same(2, 3, 1, 7),       Conv2dSpec::same(2, 3, 7, 1),
      Conv2dSpec{2, 3, 1, 1, 1, 1, 0, 0}, Conv2dSpec{2, 3, 3, 3, 2, 2, 0, 0},
  };
  for (std::size_t trial = 0; trial < specs.size(); ++trial) {
    const auto& spec = specs[trial];
    std::mt19937_64 rng(40 + trial);
    const std::size_t size = std::max<std::size_t>(6, spec.extent_h() + 1);
    auto x = random_tensor<double>({2, 2, size, size}, rng);
    auto w = random_tensor<double>({3, 2, spec.kernel_h, spec.kernel_w}, rng);
    auto b = random_tensor<double>({3}, rng);
    auto proj = random_tensor<double>(
        {2, 3, spec.out_h(size), spec.out_w(size)}, rng, 0.5, 1.5);
    const double err = gradient_check<double>(
        [&] { return sum(conv2d(x, w, b, spec) * proj); }, {x, w, b});
    EXPECT_LT(err, 1e-4) << "case " << trial;
  }
}

TEST(MaxPool, WindowMaximum) {
  TensorD x({1, 1, 2, 2}, {1, 2, 3, 4});
  auto y = maxpool2d(x);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(y[0], 4.0);
}

TEST(MaxPool, TiesRouteGradientToFirstElement) {
  auto x = TensorD::full({1, 1, 4, 4}, 2.5, true);
  auto y = maxpool2d(x);
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 2.5);
  backward(sum(y));
  auto g = to_vec(x.grad());
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c)
      EXPECT_DOUBLE_EQ(g[r * 4 + c], (r % 2 == 0 && c % 2 == 0) ? 1.0 : 0.0);
}

TEST(MaxPool, RampMatchesBruteForce) {
  std::vector<double> v(16);
  std::iota(v.begin(), v.end(), 0.0);
  TensorD x({1, 1, 4, 4}, v);
  auto y = maxpool2d(x);
  EXPECT_EQ(y.values(), testing::brute_force_maxpool(v, 4, 4, 2, 2));
  EXPECT_EQ(y.values(), (std::vector<double>{5, 7, 13, 15}));
}

TEST(MaxPool, RandomPlanesMatchBruteForce) {
  std::mt19937_64 rng(12);
  auto x = random_tensor<double>({1, 1, 10, 8}, rng);
  EXPECT_EQ(maxpool2d(x).values(), testing::brute_force_maxpool(x.values(), 10, 8, 2, 2));
}

TEST(MaxPool, PaddedStrideOneKeepsSize) {
  std::mt19937_64 rng(13);
  auto x = random_tensor<double>({1, 2, 5, 6}, rng);
  auto y = maxpool2d(x, PoolSpec{3, 1, 1});
  EXPECT_EQ(y.shape(), x.shape());
  // Top-left output sees the 2x2 corner.
  const double corner = std::max({x.at(0, 0, 0, 0), x.at(0, 0, 0, 1), x.at(0, 0, 1, 0),
                                  x.at(0, 0, 1, 1)});
  EXPECT_DOUBLE_EQ(y.at(0, 0, 0, 0), corner);
}

TEST(MaxPool, TooSmallInputIsRejected) {
  auto x = TensorD::zeros({1, 1, 1, 4});
  EXPECT_THROW(maxpool2d(x), ShapeError);
}

TEST(MaxPool, GradientsMatchFiniteDifferences) {
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    std::mt19937_64 rng(60 + trial);
    auto x = random_tensor<double>({2, 2, 6, 6}, rng);
    PoolSpec spec = trial % 2 ? PoolSpec{3, 1, 1} : PoolSpec{2, 2, 0};
    const double err = finite_diff_check<double>(
        [&](const TensorD& t) { return maxpool2d(t, spec); }, x);
    EXPECT_LT(err, 1e-4);
  }
}

TEST(Upsample, ReplicatesPixels) {
  TensorD x({1, 1, 1, 1}, {1.0});
  EXPECT_EQ(upsample_nearest2x(x).values(), (std::vector<double>{1, 1, 1, 1}));
}

TEST(Upsample, PoolThenUpsampleOfConstantIsIdentity) {
  auto x = TensorD::full({1, 3, 8, 8}, 0.7);
  EXPECT_EQ(upsample_nearest2x(maxpool2d(x)).values(), x.values());
}

TEST(Upsample, GradientOfSumIsFour) {
  std::mt19937_64 rng(14);
  auto x = random_tensor<double>({2, 2, 3, 5}, rng, -1, 1, true);
  backward(sum(upsample_nearest2x(x)));
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 4.0);
}

TEST(Upsample, GradientsMatchFiniteDifferences) {
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    std::mt19937_64 rng(70 + trial);
    auto x = random_tensor<double>({1, 2, 3, 4}, rng);
    EXPECT_LT(finite_diff_check<double>([](const TensorD& t) { return upsample_nearest2x(t); }, x),
              1e-4);
  }
}

TEST(BatchNorm, NormalizedInputPassesThrough) {
  // Per channel: values {-1, 1} have mean 0 and variance 1.
  TensorD x({2, 1, 1, 1}, {-1.0, 1.0});
  BatchNormState<double> bn(1);
  bn.epsilon = 0.0;
  auto y = batchnorm2d(x, bn);
  EXPECT_NEAR(y[0], -1.0, 1e-12);
  EXPECT_NEAR(y[1], 1.0, 1e-12);
}

TEST(BatchNorm, TrainModeOutputHasUnitMoments) {
  std::mt19937_64 rng(15);
  auto x = random_tensor<double>({4, 3, 8, 8}, rng, -3, 7);
  BatchNormState<double> bn(3);
  auto y = batchnorm2d(x, bn);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, s2 = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 64; ++i) {
        const double v = y[(n * 3 + c) * 64 + i];
        s += v;
        s2 += v * v;
      }
    const double mean = s / 256, var = s2 / 256 - mean * mean;
    EXPECT_LT(std::abs(mean), 1e-6);
    EXPECT_LT(std::abs(var - 1.0), 1e-3);
  }
}

TEST(BatchNorm, AffineParametersSetMoments) {
  std::mt19937_64 rng(16);
  auto x = random_tensor<double>({8, 1, 16, 16}, rng, -2, 2);
  BatchNormState<double> bn(1);
  bn.gamma.mutable_data()[0] = 3.0;
  bn.beta.mutable_data()[0] = -0.5;
  auto y = batchnorm2d(x, bn);
  double s = 0, s2 = 0;
  for (double v : y.data()) {
    s += v;
    s2 += v * v;
  }
  const double mean = s / y.numel(), var = s2 / y.numel() - mean * mean;
  EXPECT_NEAR(mean, -0.5, 1e-3);
  EXPECT_NEAR(var, 9.0, 1e-2);
}

TEST(BatchNorm, EvalModeIsAffineReadOff) {
  std::mt19937_64 rng(17);
  auto x = random_tensor<double>({2, 2, 3, 3}, rng);
  BatchNormState<double> bn(2);
  bn.epsilon = 0.0;
  bn.mode = Mode::Eval;
  for (std::size_t c = 0; c < 2; ++c) {
    bn.gamma.mutable_data()[c] = 2.0;
    bn.beta.mutable_data()[c] = 1.0;
  }
  auto y = batchnorm2d(x, bn);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], 2.0 * x[i] + 1.0, 1e-12);
}

TEST(BatchNorm, TrainModeUpdatesRunningStatistics) {
  TensorD x({1, 1, 2, 2}, {1, 2, 3, 6});
  BatchNormState<double> bn(1);
  (void)batchnorm2d(x, bn);
  EXPECT_NEAR(bn.running_mean[0], 0.1 * 3.0, 1e-12);
  // Unbiased variance of {1,2,3,6} is 14/3.
  EXPECT_NEAR(bn.running_var[0], 0.9 + 0.1 * 14.0 / 3.0, 1e-12);
}

TEST(BatchNorm, SingleValuePerChannelInTrainModeFails) {
  auto x = TensorD::zeros({1, 2, 1, 1});
  BatchNormState<double> bn(2);
  EXPECT_THROW(batchnorm2d(x, bn), std::invalid_argument);
  bn.mode = Mode::Eval;
  EXPECT_NO_THROW(batchnorm2d(x, bn));
}

TEST(BatchNorm, GradientsMatchFiniteDifferences) {
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    std::mt19937_64 rng(80 + trial);
    auto x = random_tensor<double>({2, 3, 3, 3}, rng, -2, 2);
    BatchNormState<double> bn(3);
    bn.mode = trial < 8 ? Mode::Train : Mode::Eval;
    bn.gamma = random_tensor<double>({3}, rng, 0.5, 1.5, true);
    bn.beta = random_tensor<double>({3}, rng, -0.5, 0.5, true);
    auto proj = random_tensor<double>({2, 3, 3, 3}, rng, 0.5, 1.5);
    const double err = gradient_check<double>(
        [&] { return sum(batchnorm2d(x, bn) * proj); }, {x, bn.gamma, bn.beta});
    EXPECT_LT(err, 1e-4) << "trial " << trial;
  }
}

TEST(Dropout, EvalModeAndZeroRateAreIdentity) {
  std::mt19937_64 rng(18);
  auto x = random_tensor<float>({1, 2, 4, 4}, rng);
  EXPECT_EQ(dropout(x, 0.2, Mode::Eval, 1).values(), x.values());
  EXPECT_EQ(dropout(x, 0.0, Mode::Train, 1).values(), x.values());
}

TEST(Dropout, RateOutsideRangeIsRejected) {
  auto x = TensorF::zeros({4});
  EXPECT_THROW(dropout(x, 1.0, Mode::Train, 1), std::invalid_argument);
  EXPECT_THROW(dropout(x, -0.1, Mode::Train, 1), std::invalid_argument);
}

TEST(Dropout, LargeSampleStatistics) {
  auto x = TensorD::full({1000000}, 1.0);
  auto y = dropout(x, 0.2, Mode::Train, 2024);
  std::size_t zeros = 0;
  double total = 0;
  for (double v : y.data()) {
    zeros += v == 0.0;
    total += v;
  }
  EXPECT_NEAR(static_cast<double>(zeros) / 1e6, 0.2, 0.005);
  EXPECT_NEAR(total / 1e6, 1.0, 0.01);
}

TEST(Dropout, MaskIsAFunctionOfSeed) {
  auto x = TensorD::full({256}, 1.0);
  EXPECT_EQ(dropout(x, 0.5, Mode::Train, 3).values(), dropout(x, 0.5, Mode::Train, 3).values());
  EXPECT_NE(dropout(x, 0.5, Mode::Train, 3).values(), dropout(x, 0.5, Mode::Train, 4).values());
}

TEST(Dropout, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(19);
  auto x = random_tensor<double>({2, 2, 3, 3}, rng);
  EXPECT_LT(finite_diff_check<double>(
                [](const TensorD& t) { return dropout(t, 0.3, Mode::Train, 5); }, x),
            1e-4);
}

TEST(Concat, StacksChannels) {
  auto a = TensorD::full({2, 2, 3, 3}, 1.0);
  auto b = TensorD::full({2, 3, 3, 3}, 2.0);
  auto c = concat_channels<double>({a, b});
  EXPECT_EQ(c.shape(), (Shape{2, 5, 3, 3}));
  EXPECT_DOUBLE_EQ(c.at(1, 1, 2, 2), 1.0);
  EXPECT_DOUBLE_EQ(c.at(1, 2, 0, 0), 2.0);
}

TEST(Concat, SingleInputIsIdentity) {
  std::mt19937_64 rng(20);
  auto a = random_tensor<double>({1, 2, 2, 2}, rng);
  EXPECT_EQ(concat_channels<double>({a}).values(), a.values());
}

TEST(Concat, SpatialMismatchIsRejected) {
  auto a = TensorD::zeros({1, 1, 4, 4});
  auto b = TensorD::zeros({1, 1, 4, 5});
  EXPECT_THROW(concat_channels<double>({a, b}), ShapeError);
}

TEST(Concat, BackwardSlicesUpstreamGradient) {
  std::mt19937_64 rng(21);
  auto a = random_tensor<double>({2, 1, 2, 2}, rng, -1, 1, true);
  auto b = random_tensor<double>({2, 2, 2, 2}, rng, -1, 1, true);
  auto proj = random_tensor<double>({2, 3, 2, 2}, rng);
  backward(sum(concat_channels<double>({a, b}) * proj));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_DOUBLE_EQ(a.grad()[n * 4 + i], proj[(n * 3) * 4 + i]);
      EXPECT_DOUBLE_EQ(b.grad()[(n * 2 + 1) * 4 + i], proj[(n * 3 + 2) * 4 + i]);
    }
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    std::mt19937_64 r(90 + trial);
    auto p = random_tensor<double>({1, 2, 2, 3}, r);
    auto q = random_tensor<double>({1, 1, 2, 3}, r);
    const double err = gradient_check<double>(
        [&] { return sum(square(concat_channels<double>({p, q, p}))); }, {p, q});
    EXPECT_LT(err, 1e-4);
  }
}

TEST(Softmax, UniformLogitsGiveUniformProbabilities) {
  auto x = TensorD::full({1, 4, 2, 2}, 3.0);
  auto probs = softmax_channels(x);
  for (double p : probs.data()) EXPECT_DOUBLE_EQ(p, 0.25);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  TensorD x({1, 2, 1, 1}, {1000.0, 0.0});
  auto p = softmax_channels(x);
  EXPECT_NEAR(p[0], 1.0, 1e-12);
  EXPECT_NEAR(p[1], 0.0, 1e-12);
  EXPECT_TRUE(std::isfinite(p[1]));
}

TEST(Softmax, ChannelsSumToOne) {
  std::mt19937_64 rng(22);
  auto x = random_tensor<float>({3, 4, 5, 5}, rng, -20, 20);
  auto p = softmax_channels(x);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 25; ++i) {
      double s = 0;
      for (std::size_t c = 0; c < 4; ++c) s += p[(n * 4 + c) * 25 + i];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Softmax, SingleChannelIsRejected) {
  EXPECT_THROW(softmax_channels(TensorD::zeros({1, 1, 2, 2})), ShapeError);
}

TEST(WeightedCrossEntropy, PerfectPredictionIsNearZero) {
  TensorD probs({1, 4, 1, 2}, {1, 0, 0, 0, 0, 1, 0, 0});
  ClassMap target(1, 1, 2);
  target.labels = {0, 2};
  auto loss = weighted_cross_entropy(probs, target, TensorD::full({1, 1, 1, 2}, 1.0));
  EXPECT_LE(loss.item(), 1e-9);
}

TEST(WeightedCrossEntropy, UniformPredictionIsLogK) {
  auto probs = TensorD::full({2, 4, 3, 3}, 0.25);
  ClassMap target(2, 3, 3);
  for (std::size_t i = 0; i < target.size(); ++i) target.labels[i] = i % 4;
  auto loss = weighted_cross_entropy(probs, target, TensorD::full({2, 1, 3, 3}, 1.0));
  EXPECT_NEAR(loss.item(), std::log(4.0), 1e-12);
  EXPECT_NEAR(loss.item(), 1.3863, 1e-4);
}

TEST(WeightedCrossEntropy, NegligibleWeightPixelDoesNotContribute) {
  TensorD probs({1, 4, 1, 2}, {0.1, 0.4, 0.7, 0.1, 0.1, 0.1, 0.1, 0.4});
  ClassMap target(1, 1, 2);
  target.labels = {1, 3};  // arteriole then intersection
  TensorD weights({1, 1, 1, 2}, {5.0, 1e-12});
  const double loss = weighted_cross_entropy(probs, target, weights).item();
  const double alone = -std::log(0.7);
  EXPECT_NEAR(loss / alone, 1.0, 1e-10);
}

TEST(WeightedCrossEntropy, IgnoredPixelsAreExcluded) {
  TensorD probs({1, 4, 1, 2}, {0.5, 0.01, 0.5, 0.99, 0, 0, 0, 0});
  ClassMap target(1, 1, 2);
  target.labels = {0, kIgnore};
  auto loss = weighted_cross_entropy(probs, target, TensorD::full({1, 1, 1, 2}, 1.0));
  EXPECT_NEAR(loss.item(), -std::log(0.5), 1e-12);
}

TEST(WeightedCrossEntropy, EmptyEffectivePixelSetFails) {
  auto probs = TensorD::full({1, 4, 1, 2}, 0.25);
  ClassMap target(1, 1, 2, kIgnore);
  EXPECT_THROW(weighted_cross_entropy(probs, target, TensorD::full({1, 1, 1, 2}, 1.0)),
               std::invalid_argument);
  ClassMap zero_weight(1, 1, 2, 0);
  EXPECT_THROW(weighted_cross_entropy(probs, zero_weight, TensorD::zeros({1, 1, 1, 2})),
               std::invalid_argument);
}

TEST(WeightedCrossEntropy, CompositeGradientIsProbMinusOneHot) {
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    std::mt19937_64 rng(100 + trial);
    auto logits = random_tensor<double>({2, 4, 3, 3}, rng, -3, 3, true);
    ClassMap target(2, 3, 3);
    std::vector<double> w(18);
    std::uniform_int_distribution<int> cls(0, 3);
    std::uniform_real_distribution<double> wd(0.0, 5.0);
    for (std::size_t i = 0; i < 18; ++i) {
      target.labels[i] = static_cast<std::uint8_t>(cls(rng));
      w[i] = wd(rng);
    }
    target.labels[4] = kIgnore;
    TensorD weights({2, 1, 3, 3}, w);
    auto probs = softmax_channels(logits);
    backward(weighted_cross_entropy(probs, target, weights));
    double total = 0;
    for (std::size_t i = 0; i < 18; ++i)
      if (target.labels[i] != kIgnore) total += w[i];
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t i = 0; i < 9; ++i) {
          const std::size_t px = n * 9 + i;
          const std::size_t idx = (n * 4 + c) * 9 + i;
          double expected = 0.0;
          if (target.labels[px] != kIgnore) {
            expected = (probs[idx] - (target.labels[px] == c ? 1.0 : 0.0)) * w[px] / total;
          }
          EXPECT_NEAR(logits.grad()[idx], expected, 1e-6);
        }
    const double err = gradient_check<double>(
        [&] { return weighted_cross_entropy(softmax_channels(logits), target, weights); },
        {logits});
    EXPECT_LT(err, 1e-4);
  }
}

}  // namespace
}  // namespace avnet
