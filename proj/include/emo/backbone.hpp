#pragma once

// Four-stage EMOv2 backbone built only from Meta Mobile Blocks.
//
// stem (stride 4) -> stage1 (s4) -> stage2 (s8) -> stage3 (s16) -> stage4 (s32)
// -> global average pool -> linear.

#include <array>
#include <random>
#include <string>
#include <vector>

#include "emo/block.hpp"

namespace emo {

struct StageConfig {
  std::int64_t depth = 1;
  std::int64_t dim = 32;
  Ratio expansion{2};
  bool attention = false;
  bool spanning = false;
  WindowSpec window = kAutoWindow;
  std::int64_t head_dim = 32;
  std::int64_t kernel = 5;
  double drop_path = 0.05;

  friend bool operator==(const StageConfig& a, const StageConfig& b) {
    return a.depth == b.depth && a.dim == b.dim && a.expansion == b.expansion && a.attention == b.attention &&
           a.spanning == b.spanning && a.window.h == b.window.h && a.window.w == b.window.w &&
           a.head_dim == b.head_dim && a.kernel == b.kernel && a.drop_path == b.drop_path;
  }
};

struct BackboneConfig {
  std::string name = "custom";
  std::array<StageConfig, 4> stages{};
  std::int64_t stem_width = 0;  // 0: half of stage-1 dim
  std::int64_t classes = 1000;
  std::int64_t resolution = 224;
  WindowFit fit = WindowFit::strict;
  /// Expansion multiplier of the first (downsampling) block of stages 2-4.
  Ratio downsample_expansion{2};

  std::int64_t effective_stem_width() const { return stem_width > 0 ? stem_width : std::max<std::int64_t>(1, stages[0].dim / 2); }

  void validate() const {
    for (std::size_t i = 0; i < 4; ++i) {
      const auto& s = stages[i];
      const std::string at = "stage" + std::to_string(i + 1);
      if (s.depth < 1) throw std::invalid_argument(at + ".depth must be >= 1");
      if (s.dim < 1) throw std::invalid_argument(at + ".dim must be >= 1");
      if (s.expansion.num == 0) throw std::invalid_argument(at + ".exp_ratio must be positive");
      if (i > 0 && s.dim < stages[i - 1].dim) throw std::invalid_argument(at + ".dim must be non-decreasing");
      if (s.spanning && !s.attention) throw std::invalid_argument(at + ".spanning requires attention");
      if (s.attention && (s.head_dim < 1 || s.dim % s.head_dim != 0))
        throw std::invalid_argument(at + ".dim not divisible by head_dim");
      if (s.kernel < 1 || s.kernel % 2 == 0) throw std::invalid_argument(at + ".kernel must be odd");
      if (!(s.drop_path >= 0.0 && s.drop_path < 1.0)) throw std::invalid_argument(at + ".drop_path out of range");
      if (s.window.h < 0 || s.window.w < 0) throw std::invalid_argument(at + ".window must be non-negative");
    }
    if (classes < 1) throw std::invalid_argument("head.classes must be >= 1");
    if (resolution < 1) throw std::invalid_argument("resolution must be >= 1");
  }

  friend bool operator==(const BackboneConfig& a, const BackboneConfig& b) {
    return a.stages == b.stages && a.effective_stem_width() == b.effective_stem_width() && a.classes == b.classes &&
           a.resolution == b.resolution && a.fit == b.fit && a.downsample_expansion == b.downsample_expansion;
  }
};

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"emov2-1m", "emov2-2m", "emov2-5m", "emov2-20m", "emov2-50m"};
  return names;
}

/// Stage tables of the published variants. Attention (spanning) only at
/// stages 3 and 4.
inline BackboneConfig preset(const std::string& name) {
  struct Row {
    std::array<std::int64_t, 4> depth, dim;
    std::array<Ratio, 4> exp;
    std::int64_t head_dim;
  };
  Row r;
  if (name == "emov2-1m")
    r = {{2, 2, 8, 3}, {32, 48, 80, 180}, {Ratio(2), Ratio(5, 2), Ratio(3), Ratio(7, 2)}, 20};
  else if (name == "emov2-2m")
    r = {{3, 3, 9, 3}, {32, 48, 120, 200}, {Ratio(2), Ratio(5, 2), Ratio(3), Ratio(7, 2)}, 20};
  else if (name == "emov2-5m")
    r = {{3, 3, 9, 3}, {48, 72, 160, 288}, {Ratio(2), Ratio(3), Ratio(4), Ratio(4)}, 32};
  else if (name == "emov2-20m")
    r = {{3, 3, 13, 3}, {64, 128, 320, 448}, {Ratio(2), Ratio(3), Ratio(4), Ratio(4)}, 32};
  else if (name == "emov2-50m")
    r = {{5, 8, 20, 7}, {64, 128, 384, 512}, {Ratio(2), Ratio(3), Ratio(4), Ratio(4)}, 32};
  else
    throw std::invalid_argument("unknown preset '" + name + "'");
  BackboneConfig c;
  c.name = name;
  for (std::size_t i = 0; i < 4; ++i) {
    auto& s = c.stages[i];
    s.depth = r.depth[i];
    s.dim = r.dim[i];
    s.expansion = r.exp[i];
    s.attention = s.spanning = i >= 2;
    s.head_dim = r.head_dim;
  }
  return c;
}

/// One block of the network with its hierarchical name.
struct BlockPlan {
  std::string name;
  MetaMobileBlockSpec spec;
};

/// Expands a config into its block list. The first block of stages 2-4
/// downsamples (stride 2, expansion multiplied by downsample_expansion, no
/// attention, no residual).
inline std::vector<BlockPlan> plan_blocks(const BackboneConfig& cfg) {
  cfg.validate();
  std::vector<BlockPlan> plan;
  std::int64_t cin = cfg.stages[0].dim;
  for (std::size_t si = 0; si < 4; ++si) {
    const auto& st = cfg.stages[si];
    for (std::int64_t j = 0; j < st.depth; ++j) {
      const bool down = si > 0 && j == 0;
      MetaMobileBlockSpec b;
      b.in_channels = cin;
      b.out_channels = st.dim;
      b.expansion = down ? st.expansion * cfg.downsample_expansion : st.expansion;
      b.stride = down ? 2 : 1;
      b.kernel = st.kernel;
      b.drop_path = st.drop_path;
      if (st.attention && !down) {
        b.op = Operator::cascade;
        b.norm = NormKind::layernorm_tokens;
        b.attn.head_dim = st.head_dim;
        b.attn.window = st.window;
        b.attn.fit = cfg.fit;
        b.attn.mode = st.spanning ? AttentionMode::spanning : AttentionMode::neighbor;
        b.attn.order = AttentionOrder::post;
        b.attn.v_activation = Activation::gelu;
        b.attn.v_groups = 1;
      } else {
        b.op = Operator::dwconv;
        b.norm = NormKind::batchnorm2d;
        b.expand_activation = Activation::silu;
      }
      plan.push_back({"stage" + std::to_string(si + 1) + ".block" + std::to_string(j), b});
      cin = st.dim;
    }
  }
  return plan;
}

/// conv3x3/s2 (3 -> w) BN SiLU, depthwise 3x3/s2 BN SiLU, pointwise w -> dim1 BN.
struct Stem {
  Conv2d conv;
  Norm bn1;
  Conv2d dw;
  Norm bn2;
  Conv2d pw;
  Norm bn3;

  Stem() = default;
  Stem(std::int64_t width, std::int64_t dim, std::mt19937_64& rng)
      : conv({3, width, 3, 2, 1, 1, 1}, rng),
        bn1(NormSpec::batchnorm(width)),
        dw({width, width, 3, 2, 1, 1, width}, rng),
        bn2(NormSpec::batchnorm(width)),
        pw(ConvSpec::pointwise(width, dim), rng),
        bn3(NormSpec::batchnorm(dim)) {}

  Tensor operator()(const Tensor& x, Mode mode) const {
    auto y = silu(bn1(conv(x), mode));
    y = silu(bn2(dw(y), mode));
    return bn3(pw(y), mode);
  }

  void collect(const std::string& p, ParamList& out) const {
    conv.collect(p + ".conv", out);
    bn1.collect(p + ".bn1", out);
    dw.collect(p + ".dw", out);
    bn2.collect(p + ".bn2", out);
    pw.collect(p + ".pw", out);
    bn3.collect(p + ".bn3", out);
  }
};

class Model {
 public:
  Model() = default;

  /// Deterministic initialization from `seed`.
  Model(const BackboneConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    std::mt19937_64 rng(seed);
    auto plan = plan_blocks(cfg_);
    stem_ = Stem(cfg_.effective_stem_width(), cfg_.stages[0].dim, rng);
    for (auto& p : plan) {
      names_.push_back(p.name);
      blocks_.emplace_back(p.spec, rng);
    }
    head_ = Linear(cfg_.stages[3].dim, cfg_.classes, rng);
  }

  const BackboneConfig& config() const { return cfg_; }
  const std::vector<MetaMobileBlock>& blocks() const { return blocks_; }
  std::vector<MetaMobileBlock>& mutable_blocks() { return blocks_; }

  void check_input(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != 3) throw ShapeError("model input must be [N,3,H,W], got " + to_string(x.shape()));
    if (cfg_.fit == WindowFit::strict && (x.dim(2) % 32 != 0 || x.dim(3) % 32 != 0))
      throw ShapeError("input resolution " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                       " is not divisible by 32 (strict window mode)");
  }

  /// Outputs of the four stages (strides 4, 8, 16, 32).
  std::array<Tensor, 4> forward_features(const Tensor& x, Mode mode) const {
    check_input(x);
    std::array<Tensor, 4> feats;
    auto y = stem_(x, mode);
    std::size_t bi = 0;
    for (std::size_t si = 0; si < 4; ++si) {
      for (std::int64_t j = 0; j < cfg_.stages[si].depth; ++j) y = blocks_[bi++].forward(y, mode);
      feats[si] = y;
    }
    return feats;
  }

  Tensor classify(const Tensor& x, Mode mode) const { return head(forward_features(x, mode)[3]); }

  /// Pooling and classifier on the stage-4 map.
  Tensor head(const Tensor& stage4) const { return head_(global_avg_pool(stage4)); }

  void collect(ParamList& out) const {
    stem_.collect("stem", out);
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(names_[i], out);
    head_.collect("head.fc", out);
  }

  ParamList parameters() const {
    ParamList ps;
    collect(ps);
    return ps;
  }

  std::int64_t param_count() const { return count_learnable(parameters()); }

  /// Switches spanning on/off in every attention block. Parameter-free.
  void set_spanning(bool on) {
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      auto& s = blocks_[i].mutable_spec();
      if (s.has_attention()) s.attn.mode = on ? AttentionMode::spanning : AttentionMode::neighbor;
    }
    for (auto& st : cfg_.stages) st.spanning = st.attention && on;
  }

 private:
  BackboneConfig cfg_;
  Stem stem_;
  std::vector<std::string> names_;
  std::vector<MetaMobileBlock> blocks_;
  Linear head_;
};

inline Model build(const BackboneConfig& cfg, std::uint64_t seed) { return Model(cfg, seed); }

/// Eval-mode logits without graph recording.
inline Tensor classify(const Model& m, const Tensor& x) {
  NoGradGuard ng;
  return m.classify(x, Mode::eval);
}

}  // namespace emo
