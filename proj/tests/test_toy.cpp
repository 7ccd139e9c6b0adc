#include <gtest/gtest.h>

#include <cmath>

#include "emo/toy.hpp"

using namespace emo;

TEST(ToyData, BalancedAndDeterministic) {
  auto a = ToyDataset::generate(30, 5), b = ToyDataset::generate(30, 5), c = ToyDataset::generate(30, 6);
  ASSERT_EQ(a.size(), 32);
  int counts[4] = {};
  for (auto y : a.labels) ++counts[y];
  for (int k = 0; k < 4; ++k) EXPECT_EQ(counts[k], 8);
  bool differs = false;
  for (std::int64_t i = 0; i < a.images.numel(); ++i) {
    ASSERT_EQ(a.images[i], b.images[i]);
    differs |= a.images[i] != c.images[i];
  }
  EXPECT_TRUE(differs);
}

TEST(ToyData, BatchSelectsRows) {
  auto d = ToyDataset::generate(8, 1);
  auto [x, y] = d.batch({5, 2});
  EXPECT_EQ(x.shape(), (Shape{2, 3, 32, 32}));
  EXPECT_EQ(y[0], d.labels[5]);
  const auto per = 3 * 32 * 32;
  for (std::int64_t i = 0; i < per; ++i) ASSERT_EQ(x[per + i], d.images[2 * per + i]);
}

TEST(ToyModel, SmallAndValid) {
  auto c = toy_config();
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(Model(c, 0).param_count(), 12456);
}

TEST(ToyTrain, ShortRunDeterministic) {
  TrainOptions o;
  o.steps = 30;
  o.seed = 3;
  auto a = train_toy(o), b = train_toy(o);
  ASSERT_EQ(a.losses.size(), 30u);
  for (std::size_t i = 0; i < a.losses.size(); ++i) EXPECT_EQ(a.losses[i], b.losses[i]);
  EXPECT_EQ(a.final_loss, b.final_loss);
  for (auto l : a.losses) EXPECT_TRUE(std::isfinite(l));
}

TEST(ToyTrain, RejectsBadOptions) {
  TrainOptions o;
  o.steps = 0;
  EXPECT_THROW(train_toy(o), std::invalid_argument);
  o.steps = 1;
  o.batch = 0;
  EXPECT_THROW(train_toy(o), std::invalid_argument);
}
