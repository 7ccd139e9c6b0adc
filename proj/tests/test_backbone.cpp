#include <gtest/gtest.h>

#include <random>

#include "emo/backbone.hpp"

using namespace emo;

namespace {

Tensor image(std::int64_t n, std::int64_t res, std::uint64_t seed) {
  std::mt19937_64 r(seed);
  std::normal_distribution<double> nd;
  std::vector<double> d(n * 3 * res * res);
  for (auto& v : d) v = nd(r);
  return Tensor({n, 3, res, res}, d);
}

}  // namespace

TEST(Backbone, PresetsValidate) {
  for (const auto& n : preset_names()) EXPECT_NO_THROW(preset(n).validate()) << n;
  EXPECT_THROW(preset("emov2-3m"), std::invalid_argument);
}

TEST(Backbone, PlanLayout) {
  auto plan = plan_blocks(preset("emov2-5m"));
  ASSERT_EQ(plan.size(), 18u);
  EXPECT_EQ(plan[0].name, "stage1.block0");
  EXPECT_EQ(plan[3].spec.stride, 2);
  EXPECT_EQ(plan[3].spec.op, Operator::dwconv);
  EXPECT_EQ(plan[3].spec.expansion, Ratio(6));
  EXPECT_EQ(plan[7].spec.op, Operator::cascade);
  EXPECT_TRUE(plan[7].spec.spanning());
  EXPECT_FALSE(plan[6].spec.has_attention());  // downsampling block of stage 3
}

TEST(Backbone, StageShapesAt224) {
  Model m(preset("emov2-5m"), 0);
  NoGradGuard ng;
  auto f = m.forward_features(image(1, 224, 1), Mode::eval);
  EXPECT_EQ(f[0].shape(), (Shape{1, 48, 56, 56}));
  EXPECT_EQ(f[1].shape(), (Shape{1, 72, 28, 28}));
  EXPECT_EQ(f[2].shape(), (Shape{1, 160, 14, 14}));
  EXPECT_EQ(f[3].shape(), (Shape{1, 288, 7, 7}));
  EXPECT_EQ(m.head(f[3]).shape(), (Shape{1, 1000}));
}

TEST(Backbone, BatchedLogits) {
  Model m(preset("emov2-1m"), 0);
  NoGradGuard ng;
  EXPECT_EQ(m.classify(image(2, 64, 2), Mode::eval).shape(), (Shape{2, 1000}));
}

TEST(Backbone, StrictModeRejectsIndivisibleInput) {
  Model m(preset("emov2-1m"), 0);
  EXPECT_THROW(m.forward_features(image(1, 225, 3), Mode::eval), ShapeError);
  EXPECT_THROW(m.forward_features(Tensor::zeros({1, 1, 32, 32}), Mode::eval), ShapeError);
}

TEST(Backbone, PadModeAcceptsRaggedInput) {
  auto cfg = preset("emov2-1m");
  cfg.fit = WindowFit::pad;
  for (auto& s : cfg.stages) s.window = {4, 4};
  Model m(cfg, 0);
  NoGradGuard ng;
  auto f = m.forward_features(image(1, 100, 4), Mode::eval);
  EXPECT_EQ(f[2].shape(), (Shape{1, 80, 7, 7}));
  EXPECT_EQ(f[3].shape(), (Shape{1, 180, 4, 4}));
}

TEST(Backbone, DeterministicForSeed) {
  NoGradGuard ng;
  auto x = image(1, 64, 5);
  auto a = Model(preset("emov2-1m"), 7).classify(x, Mode::eval);
  auto b = Model(preset("emov2-1m"), 7).classify(x, Mode::eval);
  auto c = Model(preset("emov2-1m"), 8).classify(x, Mode::eval);
  bool differs = false;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    EXPECT_EQ(a[i], b[i]);
    differs |= a[i] != c[i];
  }
  EXPECT_TRUE(differs);
}

TEST(Backbone, SpanningToggleIsParameterFree) {
  Model m(preset("emov2-2m"), 0);
  const auto n = m.param_count();
  m.set_spanning(false);
  EXPECT_EQ(m.param_count(), n);
  for (const auto& b : m.blocks()) EXPECT_FALSE(b.spec().spanning());
  m.set_spanning(true);
  EXPECT_EQ(m.param_count(), n);
}

TEST(Backbone, ParameterNamesUnique) {
  Model m(preset("emov2-1m"), 0);
  std::set<std::string> names;
  for (const auto& p : m.parameters()) EXPECT_TRUE(names.insert(p.name).second) << p.name;
  EXPECT_TRUE(names.count("head.fc.weight"));
  EXPECT_TRUE(names.count("stage3.block1.attn.qk.weight"));
}
