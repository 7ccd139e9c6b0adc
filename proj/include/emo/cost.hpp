#pragma once

// Analytic parameter / FLOPs / maximum-path-length accounting, the executed-op
// tracer entry point, and reachability-based receptive-field analysis.
//
// Conventions: FLOPs = 2 x multiply-accumulates (+3 per softmax element);
// bias adds, norms and activations are excluded from FLOPs and bias adds are
// reported separately. Symbols: C channels, L = W^2 tokens, l = w^2 window
// length, k kernel, G groups.

#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "emo/backbone.hpp"

namespace emo {

enum class CostKind { mhsa, w_mhsa, sew_mhsa, conv, dwconv, norm, linear };

inline const char* name_of(CostKind k) {
  switch (k) {
    case CostKind::mhsa: return "mhsa";
    case CostKind::w_mhsa: return "w_mhsa";
    case CostKind::sew_mhsa: return "sew_mhsa";
    case CostKind::conv: return "conv";
    case CostKind::dwconv: return "dwconv";
    case CostKind::norm: return "norm";
    case CostKind::linear: return "linear";
  }
  return "?";
}

struct Symbols {
  std::int64_t C = 0;         // input channels
  std::int64_t C_out = 0;     // output channels (conv/linear); 0 means C
  Ratio lambda{1};            // attention V expansion
  std::int64_t L = 1;         // (output) token count
  std::int64_t l = 1;         // window length
  std::int64_t k = 1;         // kernel
  std::int64_t G = 1;         // groups (conv) or V-projection groups (attention)
  std::int64_t heads = 1;
  std::int64_t W = 0;         // map side
  std::int64_t w = 0;         // window side

  std::int64_t out() const { return C_out > 0 ? C_out : C; }
};

namespace detail {
inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}
inline void check_attention(const Symbols& s) {
  require(s.C > 0 && s.L > 0 && s.l > 0 && s.heads > 0 && s.G > 0, "attention symbols must be positive");
  require(s.C % s.G == 0 && s.lambda.apply(s.C) % s.G == 0, "attention: channels not divisible by V groups");
}
}  // namespace detail

/// Q,K projection plus grouped V expansion: 2(C+1)C + (C/G+1) lambda C.
inline std::int64_t attention_core_params(const Symbols& s) {
  const auto E = s.lambda.apply(s.C);
  return 2 * (s.C + 1) * s.C + (s.C / s.G + 1) * E;
}

/// Learnable scalars. Attention kinds include the output projection
/// (lambda C -> C), so lambda = 1 gives 4(C+1)C.
inline std::int64_t params_of(CostKind kind, const Symbols& s) {
  switch (kind) {
    case CostKind::mhsa:
    case CostKind::w_mhsa:
    case CostKind::sew_mhsa: {
      detail::check_attention(s);
      const auto E = s.lambda.apply(s.C);
      return attention_core_params(s) + (E + 1) * s.C;
    }
    case CostKind::conv:
      detail::require(s.C > 0 && s.out() > 0 && s.G > 0 && s.k > 0, "conv symbols must be positive");
      detail::require(s.C % s.G == 0 && s.out() % s.G == 0, "conv: channels not divisible by groups");
      return (s.C * s.k * s.k / s.G + 1) * s.out();
    case CostKind::dwconv:
      detail::require(s.C > 0 && s.k > 0, "dwconv symbols must be positive");
      return (s.k * s.k + 1) * s.C;
    case CostKind::norm:
      detail::require(s.C > 0, "norm channels must be positive");
      return 2 * s.C;
    case CostKind::linear:
      detail::require(s.C > 0 && s.out() > 0, "linear symbols must be positive");
      return (s.C + 1) * s.out();
  }
  return 0;
}

/// Attention products only (Q^T K and M V) per branch, in MACs.
inline std::int64_t attention_product_macs(const Symbols& s) {
  const auto E = s.lambda.apply(s.C);
  return s.C * s.L * s.l + E * s.L * s.l;
}

inline std::int64_t softmax_elements(const Symbols& s) { return s.L * s.l * s.heads; }

/// FLOPs (2 x MAC, softmax 3 per element). For lambda = 1, heads = 1 the
/// attention kinds reduce to 8C^2L + 4CLl + 3Ll (l = L for global MHSA).
inline std::int64_t flops_of(CostKind kind, const Symbols& s) {
  switch (kind) {
    case CostKind::mhsa:
    case CostKind::w_mhsa:
    case CostKind::sew_mhsa: {
      detail::check_attention(s);
      Symbols t = s;
      if (kind == CostKind::mhsa) t.l = t.L;
      const auto E = t.lambda.apply(t.C);
      const std::int64_t proj = 2 * t.C * t.C * t.L + t.C / t.G * E * t.L + E * t.C * t.L;
      const std::int64_t branches = kind == CostKind::sew_mhsa ? 2 : 1;
      return 2 * proj + branches * (2 * attention_product_macs(t) + 3 * softmax_elements(t));
    }
    case CostKind::conv:
      detail::require(s.C % s.G == 0, "conv: channels not divisible by groups");
      return 2 * s.C * s.k * s.k / s.G * s.L * s.out();
    case CostKind::dwconv:
      return 2 * s.k * s.k * s.L * s.C;
    case CostKind::norm:
      return 0;
    case CostKind::linear:
      return 2 * s.C * s.out();
  }
  return 0;
}

// ---------------------------------------------------------------------------
// maximum path length

struct MplClass {
  enum class Kind { constant, infinite, linear, none } kind = Kind::none;
  double layers = 0.0;  // numeric value where defined
  std::string symbol;   // e.g. "O(2W/(k-1))"

  std::string str() const {
    if (kind == Kind::none || kind == Kind::infinite || kind == Kind::constant) return symbol;
    std::ostringstream os;
    os << symbol << "=" << layers;
    return os.str();
  }
};

inline MplClass mpl_of(CostKind kind, const Symbols& s) {
  using K = MplClass::Kind;
  switch (kind) {
    case CostKind::mhsa: return {K::constant, 1, "O(1)"};
    case CostKind::w_mhsa:
      if (s.l >= s.L && s.L > 0) return {K::constant, 1, "O(1)"};
      return {K::infinite, 0, "O(Inf)"};
    case CostKind::sew_mhsa: return {K::constant, 2, "O(1)"};
    case CostKind::conv:
    case CostKind::dwconv:
      if (s.k <= 1) return {K::infinite, 0, "O(Inf)"};
      return {K::linear, 2.0 * static_cast<double>(s.W) / static_cast<double>(s.k - 1), "O(2W/(k-1))"};
    case CostKind::norm:
    case CostKind::linear: break;
  }
  return {K::none, 0, "-"};
}

/// Cascaded window attention + DW-Conv: O(2W/(k-1+2w)).
inline MplClass mpl_cascade(std::int64_t W, std::int64_t k, std::int64_t w) {
  return {MplClass::Kind::linear, 2.0 * static_cast<double>(W) / static_cast<double>(k - 1 + 2 * w),
          "O(2W/(k-1+2w))"};
}

// ---------------------------------------------------------------------------
// per-layer report

struct CostRow {
  std::string name;
  CostKind kind = CostKind::conv;
  std::int64_t params = 0;
  std::int64_t conv_macs = 0;
  std::int64_t attn_macs = 0;
  std::int64_t softmax_elems = 0;
  std::int64_t bias_adds = 0;
  MplClass mpl;

  std::int64_t macs() const { return conv_macs + attn_macs; }
  std::int64_t flops() const { return 2 * macs() + 3 * softmax_elems; }
};

struct CostReport {
  std::vector<CostRow> rows;

  std::int64_t params() const { return sum(&CostRow::params); }
  std::int64_t conv_macs() const { return sum(&CostRow::conv_macs); }
  std::int64_t attn_macs() const { return sum(&CostRow::attn_macs); }
  std::int64_t softmax_elems() const { return sum(&CostRow::softmax_elems); }
  std::int64_t bias_adds() const { return sum(&CostRow::bias_adds); }
  std::int64_t macs() const { return conv_macs() + attn_macs(); }
  std::int64_t flops() const { return 2 * macs() + 3 * softmax_elems(); }
  std::int64_t conv_flops() const { return 2 * conv_macs(); }
  std::int64_t attn_flops() const { return 2 * attn_macs() + 3 * softmax_elems(); }

  /// UTF-8 CSV: name,kind,params,flops,mpl and a final TOTAL row.
  std::string csv() const {
    std::ostringstream os;
    os << "name,kind,params,flops,mpl\n";
    for (const auto& r : rows) os << r.name << ',' << name_of(r.kind) << ',' << r.params << ',' << r.flops() << ',' << r.mpl.str() << '\n';
    os << "TOTAL,,"  << params() << ',' << flops() << ",\n";
    return os.str();
  }

 private:
  std::int64_t sum(std::int64_t CostRow::*field) const {
    std::int64_t s = 0;
    for (const auto& r : rows) s += r.*field;
    return s;
  }
};

namespace detail {

struct ReportBuilder {
  CostReport report;

  void conv(const std::string& name, const ConvSpec& c, std::int64_t H, std::int64_t W) {
    const auto Ho = c.out_extent(H), Wo = c.out_extent(W);
    Symbols s;
    s.C = c.in_channels;
    s.C_out = c.out_channels;
    s.k = c.kernel;
    s.G = c.groups;
    s.L = Ho * Wo;
    s.W = std::max(H, W);
    const bool dw = c.groups == c.in_channels && c.groups == c.out_channels && c.kernel > 1;
    CostRow r;
    r.name = name;
    r.kind = dw ? CostKind::dwconv : CostKind::conv;
    r.params = params_of(r.kind, s);
    r.conv_macs = flops_of(r.kind, s) / 2;
    r.bias_adds = c.out_channels * s.L;
    r.mpl = mpl_of(r.kind, s);
    report.rows.push_back(r);
  }

  void norm(const std::string& name, std::int64_t C) {
    Symbols s;
    s.C = C;
    report.rows.push_back({name, CostKind::norm, params_of(CostKind::norm, s), 0, 0, 0, 0, mpl_of(CostKind::norm, s)});
  }

  void linear(const std::string& name, std::int64_t C, std::int64_t K) {
    Symbols s;
    s.C = C;
    s.C_out = K;
    CostRow r{name, CostKind::linear, params_of(CostKind::linear, s), flops_of(CostKind::linear, s) / 2, 0, 0, K,
              mpl_of(CostKind::linear, s)};
    report.rows.push_back(r);
  }

  // Parameter-free attention products of one block.
  void attention(const std::string& name, const MetaMobileBlockSpec& b, std::int64_t H, std::int64_t W) {
    const auto cfg = b.attention_config();
    const auto ws = resolve_window(cfg.window, H, W);
    std::int64_t Hp = H, Wp = W;
    if (cfg.fit == WindowFit::pad) {
      Hp = (H + ws.h - 1) / ws.h * ws.h;
      Wp = (W + ws.w - 1) / ws.w * ws.w;
    }
    Symbols s;
    s.C = cfg.channels;
    s.lambda = Ratio(cfg.order == AttentionOrder::pre ? cfg.channels : cfg.v_channels, cfg.channels);
    s.L = Hp * Wp;
    s.l = ws.patch_len();
    s.heads = cfg.heads();
    s.W = std::max(H, W);
    s.w = std::max(ws.h, ws.w);
    const std::int64_t branches = cfg.mode == AttentionMode::spanning ? 2 : 1;
    CostRow r;
    r.name = name;
    r.kind = cfg.mode == AttentionMode::spanning ? CostKind::sew_mhsa : CostKind::w_mhsa;
    r.params = 0;
    r.attn_macs = branches * attention_product_macs(s);
    r.softmax_elems = branches * softmax_elements(s);
    r.mpl = mpl_of(r.kind, s);
    if (cfg.mode == AttentionMode::distant && s.l < s.L) r.mpl = {MplClass::Kind::infinite, 0, "O(Inf)"};
    report.rows.push_back(r);
  }

  // Returns the output extent.
  std::pair<std::int64_t, std::int64_t> block(const std::string& p, const MetaMobileBlockSpec& b, std::int64_t H,
                                              std::int64_t W) {
    const auto C = b.in_channels, E = b.expanded();
    if (b.input_norm) norm(p + ".norm", C);
    if (b.has_attention()) {
      const auto cfg = b.attention_config();
      conv(p + ".attn.qk", ConvSpec::pointwise(C, 2 * C), H, W);
      conv(p + ".attn.v", ConvSpec::pointwise(C, E, cfg.v_groups), H, W);
      auto bb = b;
      bb.attn = cfg;
      attention(p + ".attn", bb, H, W);
    } else {
      conv(p + ".mlp_e", ConvSpec::pointwise(C, E), H, W);
    }
    std::int64_t Ho = H, Wo = W;
    if (b.has_dwconv()) {
      const auto dw = ConvSpec::depthwise(b.dwconv_width(), b.kernel, b.stride);
      conv(p + ".dw", dw, H, W);
      norm(p + ".dw_norm", b.dwconv_width());
      Ho = dw.out_extent(H);
      Wo = dw.out_extent(W);
    }
    conv(p + ".mlp_s", ConvSpec::pointwise(E, b.out_channels), Ho, Wo);
    return {Ho, Wo};
  }
};

}  // namespace detail

/// Analytic per-layer report for one block at an HxW input.
inline CostReport report_block(const MetaMobileBlockSpec& spec, std::int64_t H, std::int64_t W) {
  spec.validate();
  detail::ReportBuilder rb;
  rb.block("block", spec, H, W);
  return rb.report;
}

/// Analytic per-layer report of a whole backbone at resolution x resolution.
inline CostReport report_model(const BackboneConfig& cfg, std::int64_t resolution) {
  detail::ReportBuilder rb;
  const auto sw = cfg.effective_stem_width();
  const auto d1 = cfg.stages[0].dim;
  std::int64_t H = resolution, W = resolution;
  ConvSpec c1{3, sw, 3, 2, 1, 1, 1};
  rb.conv("stem.conv", c1, H, W);
  rb.norm("stem.bn1", sw);
  H = c1.out_extent(H);
  W = c1.out_extent(W);
  ConvSpec c2{sw, sw, 3, 2, 1, 1, sw};
  rb.conv("stem.dw", c2, H, W);
  rb.norm("stem.bn2", sw);
  H = c2.out_extent(H);
  W = c2.out_extent(W);
  rb.conv("stem.pw", ConvSpec::pointwise(sw, d1), H, W);
  rb.norm("stem.bn3", d1);
  for (const auto& p : plan_blocks(cfg)) std::tie(H, W) = rb.block(p.name, p.spec, H, W);
  rb.linear("head.fc", cfg.stages[3].dim, cfg.classes);
  return rb.report;
}

/// Counts of operations actually executed by an eval-mode forward pass.
inline OpCounts trace_flops(const Model& model, const Tensor& input) {
  TraceScope scope;
  {
    NoGradGuard ng;
    (void)model.classify(input, Mode::eval);
  }
  return scope.counts();
}

// ---------------------------------------------------------------------------
// reachability

struct LayerDesc {
  enum class Kind { dwconv, neighbor, distant, spanning } kind = Kind::dwconv;
  std::int64_t kernel = 3;
  WindowSpec window{1, 1};

  static LayerDesc dwconv(std::int64_t k) { return {Kind::dwconv, k, {1, 1}}; }
  static LayerDesc neighbor(std::int64_t h, std::int64_t w) { return {Kind::neighbor, 1, {h, w}}; }
  static LayerDesc distant(std::int64_t h, std::int64_t w) { return {Kind::distant, 1, {h, w}}; }
  static LayerDesc spanning(std::int64_t h, std::int64_t w) { return {Kind::spanning, 1, {h, w}}; }

  /// "dw3", "nb4x4", "dist4x4", "span4x4" (a single number means square).
  static LayerDesc parse(const std::string& s) {
    auto extent = [&](const std::string& t) -> WindowSpec {
      auto x = t.find('x');
      try {
        if (x == std::string::npos) {
          auto v = std::stoll(t);
          return {v, v};
        }
        return {std::stoll(t.substr(0, x)), std::stoll(t.substr(x + 1))};
      } catch (const std::logic_error&) {
        throw std::invalid_argument("bad layer descriptor '" + s + "'");
      }
    };
    auto starts = [&](const char* p) { return s.rfind(p, 0) == 0; };
    if (starts("dw")) {
      auto w = extent(s.substr(2));
      if (w.h < 1 || w.h % 2 == 0) throw std::invalid_argument("dwconv kernel must be odd: '" + s + "'");
      return dwconv(w.h);
    }
    if (starts("nb")) {
      auto w = extent(s.substr(2));
      return neighbor(w.h, w.w);
    }
    if (starts("dist")) {
      auto w = extent(s.substr(4));
      return distant(w.h, w.w);
    }
    if (starts("span")) {
      auto w = extent(s.substr(4));
      return spanning(w.h, w.w);
    }
    throw std::invalid_argument("bad layer descriptor '" + s + "'");
  }

  static std::vector<LayerDesc> parse_stack(const std::string& s) {
    std::vector<LayerDesc> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse(item));
    if (out.empty()) throw std::invalid_argument("empty layer stack");
    return out;
  }
};

/// Boolean influence relation: row p holds the input pixels that influence
/// output pixel p after the layers applied so far. Every layer keeps the
/// identity path, so rows only grow.
class Reachability {
 public:
  Reachability(std::int64_t H, std::int64_t W) : H_(H), W_(W), words_((H * W + 63) / 64) {
    if (H < 1 || W < 1) throw std::invalid_argument("reachability: empty map");
    rows_.assign(H * W, std::vector<std::uint64_t>(words_, 0));
    for (std::int64_t p = 0; p < H * W; ++p) set(rows_[p], p);
  }

  std::int64_t height() const { return H_; }
  std::int64_t width() const { return W_; }

  void apply(const LayerDesc& d) {
    std::vector<std::vector<std::int64_t>> src(H_ * W_);
    auto link_windows = [&](PartitionKind kind) {
      d.window.check_divides(H_, W_);
      const auto N = d.window.window_count(H_, W_), P = d.window.patch_len();
      for (std::int64_t win = 0; win < N; ++win) {
        std::vector<std::int64_t> members;
        for (std::int64_t s = 0; s < P; ++s) {
          auto pc = window_pixel(kind, d.window, H_, W_, win, s);
          members.push_back(pc.row * W_ + pc.col);
        }
        for (auto p : members) src[p].insert(src[p].end(), members.begin(), members.end());
      }
    };
    switch (d.kind) {
      case LayerDesc::Kind::dwconv: {
        const auto r = d.kernel / 2;
        for (std::int64_t y = 0; y < H_; ++y)
          for (std::int64_t x = 0; x < W_; ++x)
            for (std::int64_t dy = -r; dy <= r; ++dy)
              for (std::int64_t dx = -r; dx <= r; ++dx) {
                auto yy = y + dy, xx = x + dx;
                if (yy >= 0 && yy < H_ && xx >= 0 && xx < W_) src[y * W_ + x].push_back(yy * W_ + xx);
              }
        break;
      }
      case LayerDesc::Kind::neighbor: link_windows(PartitionKind::neighbor); break;
      case LayerDesc::Kind::distant: link_windows(PartitionKind::distant); break;
      case LayerDesc::Kind::spanning:
        link_windows(PartitionKind::neighbor);
        link_windows(PartitionKind::distant);
        break;
    }
    std::vector<std::vector<std::uint64_t>> next(H_ * W_, std::vector<std::uint64_t>(words_, 0));
    for (std::int64_t p = 0; p < H_ * W_; ++p) {
      next[p] = rows_[p];
      for (auto q : src[p])
        for (std::int64_t i = 0; i < words_; ++i) next[p][i] |= rows_[q][i];
    }
    rows_ = std::move(next);
  }

  bool influences(std::int64_t src_pixel, std::int64_t dst_pixel) const {
    return (rows_[dst_pixel][src_pixel / 64] >> (src_pixel % 64)) & 1U;
  }

  std::int64_t reached_count(std::int64_t dst_pixel) const {
    std::int64_t n = 0;
    for (auto w : rows_[dst_pixel]) n += __builtin_popcountll(w);
    return n;
  }

  double coverage(std::int64_t dst_pixel) const {
    return static_cast<double>(reached_count(dst_pixel)) / static_cast<double>(H_ * W_);
  }

  bool full() const {
    for (std::int64_t p = 0; p < H_ * W_; ++p)
      if (reached_count(p) != H_ * W_) return false;
    return true;
  }

  std::int64_t total_links() const {
    std::int64_t n = 0;
    for (std::int64_t p = 0; p < H_ * W_; ++p) n += reached_count(p);
    return n;
  }

 private:
  static void set(std::vector<std::uint64_t>& row, std::int64_t i) { row[i / 64] |= std::uint64_t{1} << (i % 64); }

  std::int64_t H_, W_, words_;
  std::vector<std::vector<std::uint64_t>> rows_;
};

/// Applies the stack cyclically; returns the 1-based index of the first layer
/// after which every pixel influences every pixel, or nullopt (infinite) once
/// a full cycle adds nothing.
inline std::optional<std::int64_t> layers_to_full_coverage(const std::vector<LayerDesc>& stack, std::int64_t H,
                                                           std::int64_t W) {
  if (stack.empty()) throw std::invalid_argument("empty layer stack");
  Reachability r(H, W);
  if (r.full()) return 0;
  std::int64_t applied = 0;
  while (true) {
    const auto before = r.total_links();
    for (const auto& d : stack) {
      r.apply(d);
      ++applied;
      if (r.full()) return applied;
    }
    if (r.total_links() == before) return std::nullopt;
  }
}

}  // namespace emo
