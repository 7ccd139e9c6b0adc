#include <gtest/gtest.h>

#include <random>

#include "emo/ops.hpp"

using namespace emo;

TEST(Tensor, ConstructionChecksLength) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  auto t = Tensor::arange({2, 3});
  EXPECT_EQ(t.numel(), 6);
  EXPECT_EQ(t[5], 5.0);
  EXPECT_EQ(to_string(t.shape()), "[2,3]");
}

TEST(Tensor, ItemRequiresSingleElement) {
  EXPECT_THROW(Tensor::zeros({2}).item(), ShapeError);
  EXPECT_EQ(Tensor::scalar(4.5).item(), 4.5);
}

TEST(Autodiff, ChainAndAccumulate) {
  auto x = Tensor({3}, {1.0, -2.0, 3.0}, true);
  // f = sum(x*x + 3x) -> df/dx = 2x + 3
  backward(sum(add(mul(x, x), scale(x, 3.0))));
  ASSERT_TRUE(x.has_grad());
  EXPECT_DOUBLE_EQ(x.grad()[0], 5.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -1.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 9.0);
  // leaf gradients accumulate across backward calls
  backward(sum(x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
}

TEST(Autodiff, SharedSubexpressionVisitedOnce) {
  auto x = Tensor({1}, {2.0}, true);
  auto y = mul(x, x);         // 4
  auto z = add(y, mul(y, y));  // y + y^2
  backward(z);
  // dz/dx = (1 + 2y) * 2x = 9 * 4
  EXPECT_DOUBLE_EQ(x.grad()[0], 36.0);
}

TEST(Autodiff, NoGradGuardRecordsNothing) {
  auto x = Tensor({2}, {1.0, 2.0}, true);
  Tensor y;
  {
    NoGradGuard ng;
    EXPECT_FALSE(grad_mode_enabled());
    y = mul(x, x);
  }
  EXPECT_TRUE(grad_mode_enabled());
  EXPECT_TRUE(y.is_leaf());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autodiff, ConstantsGetNoGradient) {
  auto x = Tensor({2}, {1.0, 2.0}, true);
  auto c = Tensor({2}, {3.0, 4.0});
  backward(sum(mul(x, c)));
  EXPECT_FALSE(c.has_grad());
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(Autodiff, DetachCutsGraph) {
  auto x = Tensor({1}, {3.0}, true);
  auto d = mul(x, x).detach();
  EXPECT_TRUE(d.is_leaf());
  EXPECT_FALSE(d.requires_grad());
}

TEST(Debug, FiniteChecksRejectNan) {
  set_debug_finite_checks(true);
  auto x = Tensor({1}, {0.0});
  EXPECT_THROW(scale(Tensor({1}, {1e308}), 1e10), NumericError);
  EXPECT_NO_THROW(scale(x, 2.0));
  set_debug_finite_checks(false);
  EXPECT_NO_THROW(scale(Tensor({1}, {1e308}), 1e10));
}

TEST(Trace, CountsOnlyInsideScope) {
  auto a = Tensor::arange({1, 2, 3});
  auto b = Tensor::arange({1, 3, 4});
  (void)matmul_batched(a, b);
  OpCounts c;
  {
    TraceScope s;
    (void)matmul_batched(a, b);
    (void)softmax(a, -1);
    c = s.counts();
  }
  EXPECT_EQ(c.attn_macs, 2 * 3 * 4);
  EXPECT_EQ(c.softmax_elems, 6);
  EXPECT_EQ(c.flops(), 2 * 24 + 3 * 6);
  EXPECT_EQ(detail::tracer(), nullptr);
}

// Naive reference for the GEMM kernels.
TEST(Gemm, KernelsMatchNaive) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  const std::int64_t m = 5, n = 7, k = 3;
  std::vector<double> A(m * k), B(k * n), Bt(n * k), At(k * m);
  for (auto& v : A) v = u(rng);
  for (auto& v : B) v = u(rng);
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t p = 0; p < k; ++p) At[p * m + i] = A[i * k + p];
  for (std::int64_t p = 0; p < k; ++p)
    for (std::int64_t j = 0; j < n; ++j) Bt[j * k + p] = B[p * n + j];
  std::vector<double> ref(m * n, 0.0);
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t p = 0; p < k; ++p) ref[i * n + j] += A[i * k + p] * B[p * n + j];
  std::vector<double> c1(m * n, 0.0), c2(m * n, 0.0), c3(m * n, 0.0);
  kernel::gemm_nn(m, n, k, A.data(), B.data(), c1.data());
  kernel::gemm_nt(m, n, k, A.data(), Bt.data(), c2.data());
  kernel::gemm_tn(m, n, k, At.data(), B.data(), c3.data());
  for (std::int64_t i = 0; i < m * n; ++i) {
    EXPECT_NEAR(c1[i], ref[i], 1e-12);
    EXPECT_NEAR(c2[i], ref[i], 1e-12);
    EXPECT_NEAR(c3[i], ref[i], 1e-12);
  }
}
