#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "xdc/error.hpp"
#include "xdc/tensor.hpp"

#include "gradient_cases.hpp"

using namespace xdc;
using namespace gradcases;

TEST(Gradients, EveryOpMatchesCentralDifferences) {
  std::mt19937_64 rng(2024);
  for (const auto& c : op_cases()) {
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) worst = std::max(worst, check(c, rng));
    EXPECT_LT(worst, 1e-4) << c.name;
  }
}

TEST(Ops, SoftmaxProperties) {
  auto c = Tensor::full({1, 7}, 2.5);
  auto s = ops::softmax(c, 1);
  for (double v : s.data()) EXPECT_NEAR(v, 1.0 / 7, 1e-15);
  std::mt19937_64 rng(1);
  auto r = ops::softmax(Tensor::randn({4, 9}, 3.0, rng), 1);
  for (int i = 0; i < 4; ++i) {
    double acc = 0;
    for (int j = 0; j < 9; ++j) acc += r[i * 9 + j];
    EXPECT_NEAR(acc, 1.0, 1e-12);
  }
  auto sg = ops::sigmoid(Tensor::from({3}, {-30, 0, 30}));
  for (double v : sg.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Ops, IdentityConv) {
  std::mt19937_64 rng(2);
  auto x = Tensor::randn({1, 20}, 1.0, rng);
  auto w = Tensor::from({1, 1, 5}, {0, 0, 1, 0, 0});
  auto y = ops::conv1d(x, w, Tensor(), 1, 2, 2);
  EXPECT_EQ(y.data(), x.data());
}

TEST(Ops, MatmulGradIdentities) {
  std::mt19937_64 rng(3);
  auto a = Tensor::randn({4, 3}, 1.0, rng, true);
  auto b = Tensor::randn({3, 5}, 1.0, rng, true);
  auto dc = Tensor::randn({4, 5}, 1.0, rng);
  ops::sum(ops::mul(ops::matmul(a, b), dc)).backward();
  for (int i = 0; i < 4; ++i)
    for (int k = 0; k < 3; ++k) {
      double acc = 0;
      for (int j = 0; j < 5; ++j) acc += dc[i * 5 + j] * b[k * 5 + j];
      EXPECT_NEAR(a.grad()[i * 3 + k], acc, 1e-12);
    }
  for (int k = 0; k < 3; ++k)
    for (int j = 0; j < 5; ++j) {
      double acc = 0;
      for (int i = 0; i < 4; ++i) acc += a[i * 3 + k] * dc[i * 5 + j];
      EXPECT_NEAR(b.grad()[k * 5 + j], acc, 1e-12);
    }
}

TEST(Ops, SumAxisDistributesOnes) {
  auto x = Tensor::zeros({2, 3, 4}, true);
  ops::sum(ops::sum_axis(x, 2)).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Ops, ShapeErrors) {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({3, 2});
  EXPECT_THROW(ops::add(a, b), Error);
  EXPECT_THROW(ops::matmul(a, a), Error);
  EXPECT_THROW(ops::softmax(a, 2), Error);
  try {
    ops::sum_axis(a, 5);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::UnsupportedAxis);
  }
  EXPECT_THROW(ops::conv1d(Tensor::zeros({1, 3}), Tensor::zeros({1, 1, 8}), Tensor(), 1, 0, 0), Error);
}

TEST(Ops, DeterministicBackward) {
  auto run = [] {
    std::mt19937_64 rng(9);
    auto q = Tensor::randn({6, 8}, 1.0, rng, true);
    auto k = Tensor::randn({6, 8}, 1.0, rng, true);
    auto out = ops::sum(ops::gelu(ops::attention(q, k, k, 2)));
    out.backward();
    auto g = q.grad();
    g.insert(g.end(), k.grad().begin(), k.grad().end());
    g.push_back(out.item());
    return g;
  };
  EXPECT_EQ(run(), run());
}

TEST(Ops, SharedSubgraphAccumulates) {
  auto x = Tensor::from({2}, {1.5, -2.0}, true);
  auto y = ops::mul(x, x);  // x used twice
  ops::sum(ops::add(y, x)).backward();
  EXPECT_NEAR(x.grad()[0], 2 * 1.5 + 1, 1e-15);
  EXPECT_NEAR(x.grad()[1], 2 * -2.0 + 1, 1e-15);
}
