#pragma once

// Synthetic 4-class image dataset and a plain-SGD trainer for a shrunk
// i2RMB backbone.

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "emo/backbone.hpp"

namespace emo {

enum class ToyClass { stripes = 0, checker = 1, blob = 2, gradient = 3 };

struct ToyDataset {
  static constexpr std::int64_t kSide = 32;
  static constexpr int kClasses = 4;

  Tensor images;            // [N,3,32,32]
  std::vector<int> labels;  // balanced, class i at positions n % 4 == i

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }

  /// Rows `idx` as a batch.
  std::pair<Tensor, std::vector<int>> batch(const std::vector<std::int64_t>& idx) const {
    const auto per = 3 * kSide * kSide;
    std::vector<double> d;
    d.reserve(idx.size() * static_cast<std::size_t>(per));
    std::vector<int> y;
    for (auto i : idx) {
      auto src = images.data().subspan(static_cast<std::size_t>(i * per), static_cast<std::size_t>(per));
      d.insert(d.end(), src.begin(), src.end());
      y.push_back(labels[static_cast<std::size_t>(i)]);
    }
    return {Tensor({static_cast<std::int64_t>(idx.size()), 3, kSide, kSide}, std::move(d)), y};
  }

  /// `n` images (rounded up to a multiple of 4), bit-identical per seed.
  static ToyDataset generate(std::int64_t n, std::uint64_t seed) {
    n = (n + kClasses - 1) / kClasses * kClasses;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 0.1);
    constexpr auto S = kSide;
    std::vector<double> d(static_cast<std::size_t>(n * 3 * S * S));
    ToyDataset ds;
    for (std::int64_t i = 0; i < n; ++i) {
      const auto cls = static_cast<ToyClass>(i % kClasses);
      ds.labels.push_back(static_cast<int>(cls));
      double tint[3];
      for (auto& t : tint) t = 0.5 + 0.5 * u(rng);
      // Pattern parameters.
      const double angle = u(rng) * std::numbers::pi;
      const double freq = 2.0 + 3.0 * u(rng);
      const double phase = u(rng) * 2.0 * std::numbers::pi;
      const std::int64_t cell = 3 + static_cast<std::int64_t>(u(rng) * 4.0);
      const double cy = 8.0 + 16.0 * u(rng), cx = 8.0 + 16.0 * u(rng), sigma = 3.0 + 4.0 * u(rng);
      for (std::int64_t y = 0; y < S; ++y)
        for (std::int64_t x = 0; x < S; ++x) {
          const double fy = static_cast<double>(y) / S, fx = static_cast<double>(x) / S;
          double v = 0.0;
          switch (cls) {
            case ToyClass::stripes: {
              const bool vertical = angle < std::numbers::pi / 2;
              v = std::sin(2.0 * std::numbers::pi * freq * (vertical ? fx : fy) + phase);
              break;
            }
            case ToyClass::checker:
              v = (((y / cell) + (x / cell)) % 2 == 0) ? 1.0 : -1.0;
              break;
            case ToyClass::blob: {
              const double r2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
              v = 2.0 * std::exp(-r2 / (2.0 * sigma * sigma)) - 1.0;
              break;
            }
            case ToyClass::gradient:
              v = 2.0 * (std::cos(angle * 2.0) * (fx - 0.5) + std::sin(angle * 2.0) * (fy - 0.5));
              break;
          }
          for (std::int64_t c = 0; c < 3; ++c)
            d[static_cast<std::size_t>(((i * 3 + c) * S + y) * S + x)] = tint[c] * v + noise(rng);
        }
    }
    ds.images = Tensor({n, 3, S, S}, std::move(d));
    return ds;
  }
};

/// dims [8,12,16,24], depths [1,1,2,1], attention (spanning) at stages 3-4.
inline BackboneConfig toy_config() {
  BackboneConfig c;
  c.name = "toy";
  const std::int64_t depth[4] = {1, 1, 2, 1}, dim[4] = {8, 12, 16, 24};
  for (std::size_t i = 0; i < 4; ++i) {
    auto& s = c.stages[i];
    s.depth = depth[i];
    s.dim = dim[i];
    s.expansion = Ratio(2);
    s.attention = s.spanning = i >= 2;
    s.head_dim = 8;
    s.kernel = 5;
    s.drop_path = 0.0;
  }
  c.classes = ToyDataset::kClasses;
  c.resolution = ToyDataset::kSide;
  return c;
}

struct TrainOptions {
  std::int64_t steps = 200;
  double lr = 0.05;
  std::uint64_t seed = 0;
  std::int64_t batch = 16;
  std::int64_t dataset_size = 128;
};

struct TrainResult {
  std::vector<double> losses;  // minibatch loss before each update
  double initial_loss = 0.0;   // full-dataset loss before training
  double final_loss = 0.0;     // full-dataset loss after training
  std::int64_t params = 0;
};

/// Eval-mode cross-entropy over the whole dataset, without recording.
inline double dataset_loss(const Model& m, const ToyDataset& ds) {
  NoGradGuard ng;
  std::vector<std::int64_t> all(static_cast<std::size_t>(ds.size()));
  for (std::int64_t i = 0; i < ds.size(); ++i) all[static_cast<std::size_t>(i)] = i;
  auto [x, y] = ds.batch(all);
  return cross_entropy(m.classify(x, Mode::eval), y).item();
}

/// Plain SGD (no momentum, no weight decay). Throws NumericError on divergence.
inline TrainResult train_toy(const TrainOptions& opt, Model* out_model = nullptr) {
  if (opt.steps < 1) throw std::invalid_argument("steps must be >= 1");
  if (opt.batch < 1) throw std::invalid_argument("batch must be >= 1");
  Model m(toy_config(), opt.seed);
  const auto ds = ToyDataset::generate(opt.dataset_size, opt.seed + 1);
  std::mt19937_64 rng(opt.seed + 2);
  TrainResult res;
  res.params = m.param_count();
  auto params = m.parameters();

  std::vector<std::int64_t> order(static_cast<std::size_t>(ds.size()));
  for (std::int64_t i = 0; i < ds.size(); ++i) order[static_cast<std::size_t>(i)] = i;
  std::size_t cursor = order.size();

  // Warm the running statistics so the eval-mode baseline is meaningful.
  {
    NoGradGuard ng;
    auto [x, y] = ds.batch(order);
    (void)m.classify(x, Mode::train);
  }
  res.initial_loss = dataset_loss(m, ds);

  for (std::int64_t step = 0; step < opt.steps; ++step) {
    std::vector<std::int64_t> idx;
    while (static_cast<std::int64_t>(idx.size()) < opt.batch) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    auto [x, y] = ds.batch(idx);
    auto loss = cross_entropy(m.classify(x, Mode::train), y);
    const double l = loss.item();
    if (!std::isfinite(l)) throw NumericError("training diverged at step " + std::to_string(step));
    res.losses.push_back(l);
    backward(loss);
    for (auto& p : params) {
      if (!p.learnable || !p.tensor.has_grad()) continue;
      auto w = p.tensor;
      auto g = w.grad();
      auto v = w.mutable_data();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= opt.lr * g[i];
      w.zero_grad();
    }
  }
  res.final_loss = dataset_loss(m, ds);
  if (!std::isfinite(res.final_loss)) throw NumericError("training diverged");
  if (out_model) *out_model = std::move(m);
  return res;
}

}  // namespace emo
