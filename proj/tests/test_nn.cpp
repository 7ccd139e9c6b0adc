#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "emo/gradcheck.hpp"
#include "emo/nn.hpp"

using namespace emo;

namespace {

Tensor randn(const Shape& s, std::uint64_t seed) {
  std::mt19937_64 r(seed);
  std::normal_distribution<double> nd;
  std::vector<double> d(numel_of(s));
  for (auto& v : d) v = nd(r);
  return Tensor(s, d);
}

// Direct 7-loop cross-correlation.
std::vector<double> naive_conv(const Tensor& x, const ConvSpec& s, const Tensor& w, const Tensor& b) {
  const auto N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const auto Ho = s.out_extent(H), Wo = s.out_extent(W);
  const auto cig = s.in_channels / s.groups, cog = s.out_channels / s.groups;
  std::vector<double> out(N * s.out_channels * Ho * Wo, 0.0);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t co = 0; co < s.out_channels; ++co) {
      const auto g = co / cog;
      for (std::int64_t oy = 0; oy < Ho; ++oy)
        for (std::int64_t ox = 0; ox < Wo; ++ox) {
          double acc = b.defined() ? b[co] : 0.0;
          for (std::int64_t ci = 0; ci < cig; ++ci)
            for (std::int64_t ky = 0; ky < s.kernel; ++ky)
              for (std::int64_t kx = 0; kx < s.kernel; ++kx) {
                const auto iy = oy * s.stride - s.padding + ky * s.dilation;
                const auto ix = ox * s.stride - s.padding + kx * s.dilation;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += x[((n * s.in_channels + g * cig + ci) * H + iy) * W + ix] *
                       w[((co * cig + ci) * s.kernel + ky) * s.kernel + kx];
              }
          out[((n * s.out_channels + co) * Ho + oy) * Wo + ox] = acc;
        }
    }
  return out;
}

}  // namespace

class ConvOracle : public ::testing::TestWithParam<ConvSpec> {};

TEST_P(ConvOracle, MatchesNaiveLoops) {
  const auto s = GetParam();
  auto x = randn({2, s.in_channels, 7, 6}, 1);
  auto w = randn(s.weight_shape(), 2);
  auto b = randn({s.out_channels}, 3);
  auto y = conv2d(x, s, w, b);
  auto ref = naive_conv(x, s, w, b);
  ASSERT_EQ(y.numel(), static_cast<std::int64_t>(ref.size()));
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[static_cast<std::int64_t>(i)], ref[i], 1e-12);
}

INSTANTIATE_TEST_SUITE_P(Specs, ConvOracle,
                         ::testing::Values(ConvSpec{3, 4, 3, 1, 1, 1, 1}, ConvSpec{3, 4, 3, 2, 1, 1, 1},
                                           ConvSpec{4, 6, 3, 1, 1, 1, 2}, ConvSpec{2, 2, 3, 1, 2, 2, 1},
                                           ConvSpec::pointwise(5, 3), ConvSpec::pointwise(4, 6, 2),
                                           ConvSpec::depthwise(4, 5), ConvSpec::depthwise(3, 5, 2),
                                           ConvSpec{2, 3, 1, 2, 0, 1, 1}));

TEST(Conv, PointwiseIsPerPixelMatmul) {
  auto x = randn({1, 3, 2, 2}, 4);
  auto w = randn({2, 3, 1, 1}, 5);
  auto y = conv2d(x, ConvSpec::pointwise(3, 2), w);
  for (int co = 0; co < 2; ++co)
    for (int p = 0; p < 4; ++p) {
      double s = 0;
      for (int ci = 0; ci < 3; ++ci) s += w[co * 3 + ci] * x[ci * 4 + p];
      EXPECT_NEAR(y[co * 4 + p], s, 1e-14);
    }
}

TEST(Conv, ParamCounts) {
  EXPECT_EQ(ConvSpec::depthwise(48, 5).param_count(), 1248);
  EXPECT_EQ((ConvSpec{64, 64, 3, 1, 1, 1, 1}).param_count(), 36928);
}

TEST(Conv, TraceCountsHandExample) {
  // 1x1 conv, 4 -> 4 channels, 2x2 map: 2*4*4*4 = 128 FLOPs plus 16 bias adds.
  OpCounts c;
  {
    TraceScope s;
    (void)conv2d(Tensor::zeros({1, 4, 2, 2}), ConvSpec::pointwise(4, 4), Tensor::zeros({4, 4, 1, 1}),
                 Tensor::zeros({4}));
    c = s.counts();
  }
  EXPECT_EQ(c.conv_flops(), 128);
  EXPECT_EQ(c.bias_adds, 16);
}

TEST(Conv, RejectsBadGeometry) {
  EXPECT_THROW(conv2d(Tensor::zeros({1, 3, 4, 4}), ConvSpec::pointwise(4, 4), Tensor::zeros({4, 4, 1, 1})), ShapeError);
  EXPECT_THROW((ConvSpec{3, 4, 3, 1, 1, 1, 2}).validate(), ShapeError);
  EXPECT_THROW(conv2d(Tensor::zeros({1, 1, 2, 2}), ConvSpec{1, 1, 5, 1, 0, 1, 1}, Tensor::zeros({1, 1, 5, 5})),
               ShapeError);
}

TEST(BatchNorm, EvalIdentityWithUnitStats) {
  auto x = randn({2, 3, 2, 2}, 6);
  RunningStats st{std::vector<double>(3, 0.0), std::vector<double>(3, 1.0)};
  auto y = batchnorm2d(x, NormSpec::batchnorm(3), Tensor::full({3}, 1.0), Tensor::zeros({3}), st, Mode::eval);
  for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], x[i] / std::sqrt(1.0 + 1e-5), 1e-12);
}

TEST(BatchNorm, TrainNormalizesAndUpdatesStats) {
  auto x = randn({4, 2, 3, 3}, 7);
  RunningStats st{std::vector<double>(2, 0.0), std::vector<double>(2, 1.0)};
  auto y = batchnorm2d(x, NormSpec::batchnorm(2), Tensor::full({2}, 1.0), Tensor::zeros({2}), st, Mode::train);
  for (int c = 0; c < 2; ++c) {
    double m = 0, v = 0, xm = 0, xv = 0;
    const int n = 4 * 9;
    for (int b = 0; b < 4; ++b)
      for (int i = 0; i < 9; ++i) {
        m += y[(b * 2 + c) * 9 + i];
        xm += x[(b * 2 + c) * 9 + i];
      }
    m /= n;
    xm /= n;
    for (int b = 0; b < 4; ++b)
      for (int i = 0; i < 9; ++i) {
        v += std::pow(y[(b * 2 + c) * 9 + i] - m, 2);
        xv += std::pow(x[(b * 2 + c) * 9 + i] - xm, 2);
      }
    v /= n;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-4);  // eps shrinks it slightly
    EXPECT_NEAR(st.mean[c], 0.1 * xm, 1e-12);
    EXPECT_NEAR(st.var[c], 0.9 + 0.1 * xv / (n - 1), 1e-12);
  }
}

TEST(LayerNorm, HandExamples) {
  // token [1,-1], C=2 -> [1,-1]/sqrt(1+eps)
  auto x = Tensor({1, 2, 1, 1}, {1.0, -1.0});
  auto y = layernorm_tokens(x, NormSpec::layernorm(2), Tensor::full({2}, 1.0), Tensor::zeros({2}));
  EXPECT_NEAR(y[0], 1.0 / std::sqrt(1.0 + 1e-6), 1e-14);
  EXPECT_NEAR(y[1], -1.0 / std::sqrt(1.0 + 1e-6), 1e-14);
  auto c = layernorm_tokens(Tensor::full({1, 3, 2, 2}, 5.0), NormSpec::layernorm(3), Tensor::full({3}, 1.0),
                            Tensor::zeros({3}));
  for (std::int64_t i = 0; i < c.numel(); ++i) EXPECT_NEAR(c[i], 0.0, 1e-12);
}

TEST(DropPath, EvalAndZeroRateAreIdentity) {
  std::mt19937_64 rng(0);
  auto x = randn({3, 2, 2, 2}, 8);
  auto a = drop_path(x, 0.5, Mode::eval, rng);
  auto b = drop_path(x, 0.0, Mode::train, rng);
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    EXPECT_EQ(a[i], x[i]);
    EXPECT_EQ(b[i], x[i]);
  }
  EXPECT_THROW(drop_path(x, 1.0, Mode::train, rng), std::invalid_argument);
}

TEST(DropPath, PreservesExpectation) {
  std::mt19937_64 rng(1);
  auto x = Tensor::full({100000, 1, 1, 1}, 2.0);
  auto y = drop_path(x, 0.5, Mode::train, rng);
  double m = 0;
  std::int64_t zeros = 0;
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    m += y[i];
    zeros += y[i] == 0.0;
  }
  m /= static_cast<double>(y.numel());
  EXPECT_NEAR(m, 2.0, 0.04);
  EXPECT_GT(zeros, 45000);
}

TEST(Pool, ConstantMapAndLinearIdentity) {
  auto p = global_avg_pool(Tensor::full({2, 3, 4, 5}, 1.5));
  for (std::int64_t i = 0; i < p.numel(); ++i) EXPECT_DOUBLE_EQ(p[i], 1.5);
  auto x = randn({2, 3}, 9);
  std::vector<double> eye(9, 0.0);
  eye[0] = eye[4] = eye[8] = 1.0;
  auto y = linear(x, Tensor({3, 3}, eye), Tensor::zeros({3}));
  for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Gradients, CompositeConvNormSoftmax) {
  auto x = randn({2, 3, 4, 4}, 10), w = randn({4, 3, 3, 3}, 11), g = randn({4}, 12), b = randn({4}, 13);
  const ConvSpec s{3, 4, 3, 1, 1, 1, 1};
  auto f = [&] {
    RunningStats st{std::vector<double>(4, 0.0), std::vector<double>(4, 1.0)};
    auto y = batchnorm2d(conv2d(x, s, w), NormSpec::batchnorm(4), g, b, st, Mode::train);
    return softmax(y, 1);
  };
  GradCheckOptions o;
  o.eps = 1e-5;
  EXPECT_LT(gradcheck(f, {x, w, g, b}, o).max_error, 1e-4);
}

TEST(Modules, TruncNormalBoundedAndSeeded) {
  std::mt19937_64 a(3), b(3);
  auto t = trunc_normal({1000}, a);
  auto u = trunc_normal({1000}, b);
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    EXPECT_LE(std::abs(t[i]), 0.04);
    EXPECT_EQ(t[i], u[i]);
  }
}

TEST(Modules, NormCollectsRunningStatsAsBuffers) {
  Norm n(NormSpec::batchnorm(5));
  ParamList ps;
  n.collect("bn", ps);
  ASSERT_EQ(ps.size(), 4u);
  EXPECT_EQ(count_learnable(ps), 10);
  EXPECT_EQ(ps[2].name, "bn.running_mean");
  EXPECT_FALSE(ps[2].learnable);
}

TEST(Modules, NormTrainUpdatesOwnedStats) {
  Norm n(NormSpec::batchnorm(2));
  (void)n(randn({3, 2, 2, 2}, 14) , Mode::train);
  EXPECT_NE(n.running_mean[0], 0.0);
}
