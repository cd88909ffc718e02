#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "retnet/retention.hpp"
#include "test_util.hpp"

using namespace retnet;

TEST(Matmul, IdentityAndProjector) {
  auto a = Tensor<double>::from_rows({{1, 2}, {3, 4}});
  EXPECT_EQ(matmul(Tensor<double>::identity(2), a), a);
  auto p = Tensor<double>::from_rows({{1, 0}, {0, 0}});
  auto b = Tensor<double>::from_rows({{5, 6}, {7, 8}});
  EXPECT_EQ(matmul(p, b), Tensor<double>::from_rows({{5, 6}, {0, 0}}));
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(11);
  auto a = random_uniform<double>(rng, 4, 5);
  auto b = random_uniform<double>(rng, 5, 3);
  EXPECT_LE(max_abs_diff(matmul(a, b), testutil::naive_matmul(a, b)), 1e-12);
  EXPECT_LE(max_abs_diff(matmul_nt(a, transpose(b)), testutil::naive_matmul(a, b)), 1e-12);
  EXPECT_LE(max_abs_diff(matmul_tn(transpose(a), b), testutil::naive_matmul(a, b)), 1e-12);
}

TEST(Matmul, ShapeMismatchReportsDimensions) {
  Tensor<double> a({2, 3}), b({4, 2});
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[4x2]"), std::string::npos);
  }
}

TEST(GroupNorm, ConstantGroupIsZero) {
  Tensor<double> x({1, 4}, 3.5);
  auto y = group_norm(x, 2);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(GroupNorm, PositiveScaleInvariance) {
  Rng rng(3);
  // eps (1e-6) is negligible against the group variance of this input.
  auto x = random_uniform<float>(rng, 5, 48, -3, 3);
  auto y = group_norm(x, 3);
  for (float alpha : {2.0f, 10.0f, 300.0f}) EXPECT_LE(max_abs_diff(group_norm(scale(x, alpha), 3), y), 1e-6f);
}

TEST(GroupNorm, MomentsPerGroup) {
  Rng rng(4);
  auto x = random_uniform<double>(rng, 6, 16, -3, 5);
  auto y = group_norm(x, 4);
  for (std::size_t i = 0; i < y.rows(); ++i) {
    for (std::size_t g = 0; g < 4; ++g) {
      double mean = 0, var = 0;
      for (std::size_t j = 0; j < 4; ++j) mean += y(i, g * 4 + j);
      mean /= 4;
      for (std::size_t j = 0; j < 4; ++j) var += (y(i, g * 4 + j) - mean) * (y(i, g * 4 + j) - mean);
      var /= 4;
      EXPECT_LE(std::abs(mean), 1e-10);
      EXPECT_NEAR(var, 1.0, 1e-8);
    }
  }
}

TEST(RotatePairs, IdentityAtPositionZero) {
  Rng rng(5);
  auto x = random_uniform<double>(rng, 1, 8);
  auto th = rotation_angles<double>(8);
  EXPECT_EQ(rotate_pairs(x, std::span<const double>(th), 0, +1), x);
}

TEST(RotatePairs, QuarterTurn) {
  auto x = Tensor<double>::from_rows({{1, 0}});
  std::vector<double> th{M_PI / 2};
  auto y = rotate_pairs(x, std::span<const double>(th), 1, +1);
  EXPECT_NEAR(y[0], 0.0, 1e-15);
  EXPECT_NEAR(y[1], 1.0, 1e-15);
}

TEST(RotatePairs, OrthogonalRoundTrip) {
  Rng rng(6);
  auto th = rotation_angles<double>(16);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_uniform<double>(rng, 1, 16);
    const long pos = static_cast<long>(rng.below(5000));
    auto y = rotate_pairs(x, std::span<const double>(th), pos, +1);
    EXPECT_NEAR(testutil::norm(y), testutil::norm(x), 1e-12);
    EXPECT_LE(max_abs_diff(rotate_pairs(y, std::span<const double>(th), pos, -1), x), 1e-12);
  }
}

TEST(RotatePairs, OddDimensionRejected) {
  Tensor<double> x({1, 3});
  std::vector<double> th{1.0};
  EXPECT_THROW(rotate_pairs(x, std::span<const double>(th), 1, +1), ShapeError);
  EXPECT_THROW(rotation_angles<double>(5), ShapeError);
}

TEST(Activations, BasicValues) {
  EXPECT_EQ(swish(Tensor<double>::row({0.0}))[0], 0.0);
  auto s = softmax_rows(Tensor<double>::row({0, 0, 0}));
  for (double v : s.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(gelu(Tensor<double>::row({-30.0}))[0], 0.0, 1e-12);
  EXPECT_NEAR(swish(Tensor<double>::row({2.0}))[0], 2.0 / (1.0 + std::exp(-2.0)), 1e-15);
}

TEST(Activations, LayerNormMoments) {
  Rng rng(8);
  auto y = layer_norm(random_uniform<double>(rng, 3, 10));
  for (std::size_t i = 0; i < 3; ++i) {
    double m = 0;
    for (double v : y.row_span(i)) m += v;
    EXPECT_NEAR(m / 10, 0.0, 1e-12);
  }
}

TEST(CausalSoftmax, RowsSumToOneOverPrefix) {
  Rng rng(9);
  auto p = causal_softmax(random_uniform<double>(rng, 4, 4));
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 4; ++j) {
      if (j > i) EXPECT_EQ(p(i, j), 0.0);
      s += p(i, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-15);
  }
}

TEST(Rng, IdenticalSeedsGiveIdenticalDraws) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs |= x != c.next_u64();
  }
  EXPECT_TRUE(differs);
}

// --- gradients -------------------------------------------------------------

TEST(Grad, SumOfSquares) {
  Rng rng(10);
  std::vector<Tensor<double>> params{random_uniform<double>(rng, 3, 4)};
  auto g = grad<double>([](std::span<const Var<double>> p) { return col_sum(row_sum(hadamard(p[0], p[0]))); },
                        std::span<const Tensor<double>>(params));
  EXPECT_LE(max_abs_diff(g[0], scale(params[0], 2.0)), 1e-15);
}

TEST(Grad, ConstantFunctionHasZeroGradient) {
  std::vector<Tensor<double>> params{Tensor<double>({2, 2}, 1.0)};
  auto g = grad<double>([](std::span<const Var<double>>) { return Var<double>::constant(Tensor<double>({1, 1}, 4.0)); },
                        std::span<const Tensor<double>>(params));
  for (double v : g[0].data()) EXPECT_EQ(v, 0.0);
}

TEST(Grad, NonScalarLossRejected) {
  auto x = Var<double>::leaf(Tensor<double>({2, 2}, 1.0));
  EXPECT_THROW(backward(x), ShapeError);
}

TEST(FiniteDiff, AnalyticDerivatives) {
  std::vector<Tensor<double>> x{Tensor<double>::row({1.0})};
  auto lin = finite_diff([](std::span<const Tensor<double>> p) { return 3.0 * p[0][0]; }, x, 1e-5);
  EXPECT_NEAR(lin[0][0], 3.0, 1e-9);
  std::vector<Tensor<double>> two{Tensor<double>::row({2.0})};
  auto cube = finite_diff([](std::span<const Tensor<double>> p) { return std::pow(p[0][0], 3); }, two, 1e-5);
  EXPECT_NEAR(cube[0][0], 12.0, 1e-5);
}

// Randomized compositions of differentiable ops, depth ≤ 4, compared
// against central differences.
TEST(Grad, RandomCompositionsMatchFiniteDifferences) {
  using V = Var<double>;
  using Op = std::function<V(const V&, const V&)>;
  const std::vector<std::pair<std::string, Op>> unary_ops = {
      {"swish", [](const V& a, const V&) { return swish(a); }},
      {"gelu", [](const V& a, const V&) { return gelu(a); }},
      {"group_norm", [](const V& a, const V&) { return group_norm(a, 2, 1e-12); }},
      {"causal_softmax", [](const V& a, const V&) { return causal_softmax(a); }},
      {"rotate", [](const V& a, const V&) { return apply_xpos(a, 3, +1); }},
      {"matmul", [](const V& a, const V& w) { return matmul(a, w); }},
      {"hadamard", [](const V& a, const V& w) { return hadamard(a, matmul(a, w)); }},
      {"clamp", [](const V& a, const V& w) { return clamp_rows(a, scale(row_sum(matmul(a, w)), 3.0)); }},
      {"affine", [](const V& a, const V& w) { return affine(a, slice_rows(w, 0, 1), slice_rows(w, 1, 2)); }},
  };
  Rng rng(77);
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<std::size_t> chain;
    const std::size_t depth = 1 + rng.below(4);
    for (std::size_t i = 0; i < depth; ++i) chain.push_back(rng.below(unary_ops.size()));
    std::vector<Tensor<double>> params{random_uniform<double>(rng, 4, 8), random_uniform<double>(rng, 8, 8)};
    auto f = [&](std::span<const V> p) {
      V x = p[0];
      for (auto c : chain) x = unary_ops[c].second(x, p[1]);
      std::vector<int> tg{0, 1, 2, 3};
      return cross_entropy(x, std::span<const int>(tg));
    };
    auto g = grad<double>(f, std::span<const Tensor<double>>(params));
    auto fd = finite_diff(
        [&](std::span<const Tensor<double>> p) {
          std::vector<V> c{V::constant(p[0]), V::constant(p[1])};
          return f(c).value().item();
        },
        params, 1e-5);
    std::string desc;
    for (auto c : chain) desc += unary_ops[c].first + " ";
    for (std::size_t k = 0; k < 2; ++k)
      for (std::size_t i = 0; i < g[k].size(); ++i)
        EXPECT_LE(relative_error(g[k][i], fd[k][i]), 1e-5) << desc << " param " << k << " index " << i;
  }
}

TEST(Grad, CrossEntropyOfOneLayerModel) {
  using V = Var<double>;
  Rng rng(12);
  std::vector<Tensor<double>> params{random_normal<double>(rng, 6, 8, 0.5), random_normal<double>(rng, 8, 6, 0.5),
                                     Tensor<double>({1, 8}, 1.0), Tensor<double>({1, 8})};
  const std::vector<int> tokens{0, 3, 5, 1, 2};
  const std::vector<int> targets{3, 5, 1, 2, 4};
  auto f = [&](std::span<const V> p) {
    V x = embedding(p[0], std::span<const int>(tokens));
    V h = affine(layer_norm(x, 1e-12), p[2], p[3]);
    return cross_entropy(matmul(gelu(h), p[1]), std::span<const int>(targets));
  };
  auto g = grad<double>(f, std::span<const Tensor<double>>(params));
  auto fd = finite_diff(
      [&](std::span<const Tensor<double>> p) {
        std::vector<V> c;
        for (const auto& t : p) c.push_back(V::constant(t));
        return f(c).value().item();
      },
      params, 1e-5);
  for (std::size_t k = 0; k < params.size(); ++k)
    for (std::size_t i = 0; i < g[k].size(); ++i) EXPECT_LE(relative_error(g[k][i], fd[k][i]), 1e-6) << k << ":" << i;
}
