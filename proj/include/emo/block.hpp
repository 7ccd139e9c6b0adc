#pragma once

// One-residual Meta Mobile Block:
//   X_e = MLP_e(X), X_f = F(X_e), X_s = MLP_s(X_f), Y = X + drop_path(X_s).
// With attention on, MLP_e is the V projection of the attention operator and
// Q, K are computed from the unexpanded input.

#include <numeric>
#include <optional>
#include <random>
#include <string>

#include "emo/window.hpp"

namespace emo {

/// Non-negative rational number, always reduced.
struct Ratio {
  std::int64_t num = 1;
  std::int64_t den = 1;

  Ratio() = default;
  Ratio(std::int64_t n, std::int64_t d = 1) : num(n), den(d) {
    if (d <= 0 || n < 0) throw std::invalid_argument("ratio must be non-negative with positive denominator");
    auto g = std::gcd(num, den);
    if (g > 1) {
      num /= g;
      den /= g;
    }
  }

  /// Parses "4", "2.5", "7/2".
  static Ratio parse(const std::string& s) {
    auto bad = [&] { return std::invalid_argument("invalid ratio '" + s + "'"); };
    if (s.empty()) throw bad();
    if (auto slash = s.find('/'); slash != std::string::npos) {
      try {
        std::size_t a = 0, b = 0;
        auto n = std::stoll(s.substr(0, slash), &a);
        auto d = std::stoll(s.substr(slash + 1), &b);
        if (a != slash || b != s.size() - slash - 1) throw bad();
        return Ratio(n, d);
      } catch (const std::logic_error&) {
        throw bad();
      }
    }
    std::int64_t n = 0, d = 1;
    bool dot = false, digits = false;
    for (char c : s) {
      if (c == '.' && !dot) {
        dot = true;
      } else if (c >= '0' && c <= '9') {
        if (n > (INT64_MAX / 10) - 10 || (dot && d > INT64_MAX / 10)) throw bad();
        n = n * 10 + (c - '0');
        if (dot) d *= 10;
        digits = true;
      } else {
        throw bad();
      }
    }
    if (!digits) throw bad();
    return Ratio(n, d);
  }

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }

  /// round(ratio * c), ties to even.
  std::int64_t apply(std::int64_t c) const {
    const std::int64_t p = num * c;
    std::int64_t q = p / den;
    const std::int64_t r = p % den;
    if (2 * r > den || (2 * r == den && (q % 2) == 1)) ++q;
    return q;
  }

  std::string str() const {
    if (den == 1) return std::to_string(num) + ".0";
    // terminating decimal when den = 2^a 5^b
    std::int64_t d = den, scale = 1;
    while (d % 2 == 0) d /= 2;
    while (d % 5 == 0) d /= 5;
    if (d == 1) {
      int places = 0;
      while ((scale * num) % den != 0) {
        scale *= 10;
        ++places;
      }
      auto v = scale * num / den;
      auto s = std::to_string(v);
      while (static_cast<int>(s.size()) <= places) s = "0" + s;
      return s.substr(0, s.size() - places) + "." + s.substr(s.size() - places);
    }
    return std::to_string(num) + "/" + std::to_string(den);
  }

  friend bool operator==(const Ratio&, const Ratio&) = default;
  friend Ratio operator*(const Ratio& a, const Ratio& b) { return Ratio(a.num * b.num, a.den * b.den); }
};

enum class Operator {
  identity,   // FFN
  dwconv,     // IRB
  attention,  // MHSA-like, no local conv
  cascade,    // DW-Conv(attention(.))
  parallel,   // attention || DW-Conv on channel halves
};

inline const char* name_of(Operator op) {
  switch (op) {
    case Operator::identity: return "identity";
    case Operator::dwconv: return "dwconv";
    case Operator::attention: return "attention";
    case Operator::cascade: return "cascade";
    case Operator::parallel: return "parallel";
  }
  return "?";
}

struct MetaMobileBlockSpec {
  std::int64_t in_channels = 1;
  std::int64_t out_channels = 1;
  Ratio expansion{1};
  Operator op = Operator::dwconv;
  std::int64_t stride = 1;
  std::int64_t kernel = 5;
  double drop_path = 0.0;
  bool input_norm = true;
  NormKind norm = NormKind::batchnorm2d;
  Activation expand_activation = Activation::silu;  // used when attention is off
  AttentionConfig attn;                              // used when attention is on

  bool has_attention() const {
    return op == Operator::attention || op == Operator::cascade || op == Operator::parallel;
  }
  bool has_dwconv() const { return op == Operator::dwconv || op == Operator::cascade || op == Operator::parallel; }
  bool spanning() const { return has_attention() && attn.mode == AttentionMode::spanning; }
  bool residual() const { return stride == 1 && in_channels == out_channels; }
  std::int64_t expanded() const { return expansion.apply(in_channels); }
  /// Channels seen by the attention branch and the DW-Conv branch.
  std::int64_t attention_width() const { return op == Operator::parallel ? expanded() / 2 : expanded(); }
  std::int64_t dwconv_width() const { return op == Operator::parallel ? expanded() / 2 : expanded(); }

  /// Attention config with the block's channel widths filled in.
  AttentionConfig attention_config() const {
    AttentionConfig c = attn;
    c.channels = in_channels;
    c.v_channels = attention_width();
    return c;
  }

  void validate() const {
    if (in_channels <= 0 || out_channels <= 0) throw ShapeError("block: non-positive channels");
    if (stride != 1 && stride != 2) throw ShapeError("block: stride must be 1 or 2");
    if (expanded() <= 0) throw ShapeError("block: expanded width is zero");
    if (stride == 2 && !has_dwconv()) throw ShapeError("block: stride 2 needs a DW-Conv to carry it");
    if (op == Operator::parallel) {
      if (expanded() % 2 != 0)
        throw ShapeError("parallel layout needs an even expanded width, got " + std::to_string(expanded()));
      if (stride != 1) throw ShapeError("parallel layout does not support stride 2");
      if (attn.order != AttentionOrder::post) throw ShapeError("parallel layout requires post-attention");
    }
    if (has_attention()) attention_config().validate();
    if (!(drop_path >= 0.0 && drop_path < 1.0)) throw std::invalid_argument("block: drop_path out of range");
  }

  // --- instantiations ---------------------------------------------------

  /// Transformer FFN: lambda = 4, F = identity.
  static MetaMobileBlockSpec ffn(std::int64_t c, Ratio lambda = Ratio(4)) {
    MetaMobileBlockSpec s;
    s.in_channels = s.out_channels = c;
    s.expansion = lambda;
    s.op = Operator::identity;
    s.norm = NormKind::layernorm_tokens;
    s.expand_activation = Activation::gelu;
    return s;
  }

  /// MobileNetV2-style inverted residual: F = DW-Conv with BN+SiLU.
  static MetaMobileBlockSpec irb(std::int64_t cin, std::int64_t cout, Ratio lambda, std::int64_t kernel = 3,
                                 std::int64_t stride = 1) {
    MetaMobileBlockSpec s;
    s.in_channels = cin;
    s.out_channels = cout;
    s.expansion = lambda;
    s.op = Operator::dwconv;
    s.kernel = kernel;
    s.stride = stride;
    return s;
  }

  /// MHSA: lambda = 1, F = attention with identity V activation.
  static MetaMobileBlockSpec mhsa(std::int64_t c, std::int64_t head_dim, WindowSpec window) {
    MetaMobileBlockSpec s;
    s.in_channels = s.out_channels = c;
    s.op = Operator::attention;
    s.norm = NormKind::layernorm_tokens;
    s.attn.head_dim = head_dim;
    s.attn.window = window;
    s.attn.mode = AttentionMode::neighbor;
    s.attn.v_activation = Activation::identity;
    return s;
  }

  /// iRMB: F = DW-Conv_3(EW-MHSA), pre-attention, grouped expansion.
  static MetaMobileBlockSpec irmb(std::int64_t cin, std::int64_t cout, Ratio lambda, std::int64_t head_dim,
                                  WindowSpec window, std::int64_t stride = 1) {
    MetaMobileBlockSpec s;
    s.in_channels = cin;
    s.out_channels = cout;
    s.expansion = lambda;
    s.op = Operator::cascade;
    s.kernel = 3;
    s.stride = stride;
    s.norm = NormKind::layernorm_tokens;
    s.attn.head_dim = head_dim;
    s.attn.window = window;
    s.attn.mode = AttentionMode::neighbor;
    s.attn.order = AttentionOrder::pre;
    s.attn.v_activation = Activation::identity;
    s.attn.v_groups = cin / head_dim;
    return s;
  }

  /// i2RMB: F = DW-Conv_5(SEW-MHSA), post-attention with GeLU on V.
  static MetaMobileBlockSpec i2rmb(std::int64_t cin, std::int64_t cout, Ratio lambda, std::int64_t head_dim,
                                   WindowSpec window, std::int64_t stride = 1) {
    MetaMobileBlockSpec s;
    s.in_channels = cin;
    s.out_channels = cout;
    s.expansion = lambda;
    s.op = Operator::cascade;
    s.kernel = 5;
    s.stride = stride;
    s.norm = NormKind::layernorm_tokens;
    s.attn.head_dim = head_dim;
    s.attn.window = window;
    s.attn.mode = AttentionMode::spanning;
    s.attn.order = AttentionOrder::post;
    s.attn.v_activation = Activation::gelu;
    s.attn.v_groups = 1;
    return s;
  }
};

class MetaMobileBlock {
 public:
  MetaMobileBlock() = default;
  MetaMobileBlock(const MetaMobileBlockSpec& spec, std::mt19937_64& rng) : spec_(spec), drop_rng_(rng()) {
    spec_.validate();
    const auto C = spec_.in_channels, E = spec_.expanded();
    if (spec_.input_norm)
      norm_ = Norm(spec_.norm == NormKind::batchnorm2d ? NormSpec::batchnorm(C) : NormSpec::layernorm(C));
    if (spec_.has_attention()) {
      const auto cfg = spec_.attention_config();
      qk_ = Conv2d(ConvSpec::pointwise(C, 2 * C), rng);
      mlp_e_ = Conv2d(ConvSpec::pointwise(C, E, cfg.v_groups), rng);
    } else {
      mlp_e_ = Conv2d(ConvSpec::pointwise(C, E), rng);
    }
    if (spec_.has_dwconv()) {
      dw_ = Conv2d(ConvSpec::depthwise(spec_.dwconv_width(), spec_.kernel, spec_.stride), rng);
      dw_norm_ = Norm(NormSpec::batchnorm(spec_.dwconv_width()));
    }
    mlp_s_ = Conv2d(ConvSpec::pointwise(E, spec_.out_channels), rng);
  }

  const MetaMobileBlockSpec& spec() const { return spec_; }
  MetaMobileBlockSpec& mutable_spec() { return spec_; }

  /// Expanded-stream output X_f = F(X_e), before MLP_s.
  Tensor operator_output(const Tensor& x, Mode mode, std::vector<Tensor>* maps = nullptr) const {
    if (x.rank() != 4 || x.dim(1) != spec_.in_channels)
      throw ShapeError("block: input " + to_string(x.shape()) + " expected channels " +
                       std::to_string(spec_.in_channels));
    const auto xn = spec_.input_norm ? norm_(x, mode) : x;
    switch (spec_.op) {
      case Operator::identity:
        return activate(mlp_e_(xn), spec_.expand_activation);
      case Operator::dwconv:
        return local(activate(mlp_e_(xn), spec_.expand_activation), mode);
      case Operator::attention:
        return attention(xn, maps);
      case Operator::cascade:
        return local(attention(xn, maps), mode);
      case Operator::parallel: {
        const auto cfg = spec_.attention_config();
        const auto half = spec_.expanded() / 2;
        auto qkx = qk_(xn);
        auto q = slice_channels(qkx, 0, spec_.in_channels);
        auto k = slice_channels(qkx, spec_.in_channels, 2 * spec_.in_channels);
        auto vx = activate(mlp_e_(xn), cfg.v_activation);
        auto a = attend(q, k, slice_channels(vx, 0, half), cfg, maps);
        auto b = local(slice_channels(vx, half, 2 * half), mode);
        return concat_channels(a, b);
      }
    }
    return x;
  }

  Tensor forward(const Tensor& x, Mode mode, std::vector<Tensor>* maps = nullptr) const {
    auto xs = mlp_s_(operator_output(x, mode, maps));
    if (!spec_.residual()) return xs;
    return add(x, drop_path(xs, spec_.drop_path, mode, drop_rng_));
  }

  Tensor operator()(const Tensor& x, Mode mode) const { return forward(x, mode); }

  void collect(const std::string& prefix, ParamList& out) const {
    if (spec_.input_norm) norm_.collect(prefix + ".norm", out);
    if (spec_.has_attention()) {
      qk_.collect(prefix + ".attn.qk", out);
      mlp_e_.collect(prefix + ".attn.v", out);
    } else {
      mlp_e_.collect(prefix + ".mlp_e", out);
    }
    if (spec_.has_dwconv()) {
      dw_.collect(prefix + ".dw", out);
      dw_norm_.collect(prefix + ".dw_norm", out);
    }
    mlp_s_.collect(prefix + ".mlp_s", out);
  }

  ParamList parameters() const {
    ParamList ps;
    collect("block", ps);
    return ps;
  }

  // Sub-layers, exposed for weight surgery in tests and tools.
  Norm& norm() { return norm_; }
  Conv2d& qk() { return qk_; }
  Conv2d& mlp_e() { return mlp_e_; }
  Conv2d& dw() { return dw_; }
  Norm& dw_norm() { return dw_norm_; }
  Conv2d& mlp_s() { return mlp_s_; }

 private:
  Tensor attention(const Tensor& xn, std::vector<Tensor>* maps) const {
    const auto cfg = spec_.attention_config();
    auto qkx = qk_(xn);
    auto q = slice_channels(qkx, 0, spec_.in_channels);
    auto k = slice_channels(qkx, spec_.in_channels, 2 * spec_.in_channels);
    if (cfg.order == AttentionOrder::pre) return activate(mlp_e_(attend(q, k, xn, cfg, maps)), cfg.v_activation);
    return attend(q, k, activate(mlp_e_(xn), cfg.v_activation), cfg, maps);
  }

  // DW-Conv with BN+SiLU.
  Tensor local(const Tensor& x, Mode mode) const { return silu(dw_norm_(dw_(x), mode)); }

  MetaMobileBlockSpec spec_;
  Norm norm_;
  Conv2d qk_;
  Conv2d mlp_e_;
  Conv2d dw_;
  Norm dw_norm_;
  Conv2d mlp_s_;
  mutable std::mt19937_64 drop_rng_;
};

}  // namespace emo
