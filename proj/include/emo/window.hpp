#pragma once

// Neighbor / distant window partitioning and expanded-window attention.
//
// Layout after partitioning is [B*N, C, P]: N windows per image ordered
// row-major, P = h*w slots per window ordered row-major.

#include <cmath>
#include <memory>
#include <optional>
#include <string>

#include "emo/nn.hpp"

namespace emo {

enum class PartitionKind { neighbor, distant };

struct WindowSpec {
  std::int64_t h = 1;
  std::int64_t w = 1;

  std::int64_t patch_len() const { return h * w; }
  std::int64_t window_count(std::int64_t H, std::int64_t W) const { return (H / h) * (W / w); }

  void check_divides(std::int64_t H, std::int64_t W) const {
    if (h <= 0 || w <= 0) throw ShapeError("window extents must be positive");
    if (H % h != 0 || W % w != 0)
      throw ShapeError("window " + std::to_string(h) + "x" + std::to_string(w) + " does not divide map " +
                       std::to_string(H) + "x" + std::to_string(W));
  }
};

/// Window {0,0} requests the default: 7 per axis when it divides the map,
/// else the full extent. Explicit windows larger than the map are clamped.
inline constexpr WindowSpec kAutoWindow{0, 0};
inline constexpr std::int64_t kDefaultWindow = 7;
/// Extent that always clamps to the whole map.
inline constexpr std::int64_t kFullExtent = std::int64_t{1} << 30;
inline constexpr WindowSpec kFullWindow{kFullExtent, kFullExtent};

inline WindowSpec resolve_window(WindowSpec req, std::int64_t H, std::int64_t W) {
  if (req.h < 0 || req.w < 0) throw ShapeError("negative window extent");
  if (req.h == 0) req.h = H % kDefaultWindow == 0 ? kDefaultWindow : H;
  if (req.w == 0) req.w = W % kDefaultWindow == 0 ? kDefaultWindow : W;
  req.h = std::min(req.h, H);
  req.w = std::min(req.w, W);
  return req;
}

/// Source pixel (row, col) of slot `slot` in window `win` of an HxW map.
struct PixelCoord {
  std::int64_t row, col;
};

inline PixelCoord window_pixel(PartitionKind kind, const WindowSpec& ws, std::int64_t H, std::int64_t W,
                               std::int64_t win, std::int64_t slot) {
  const std::int64_t p = slot / ws.w, q = slot % ws.w;
  if (kind == PartitionKind::neighbor) {
    const std::int64_t nb = W / ws.w;
    const std::int64_t a = win / nb, b = win % nb;
    return {a * ws.h + p, b * ws.w + q};
  }
  const std::int64_t sh = H / ws.h, sw = W / ws.w;
  const std::int64_t u = win / sw, v = win % sw;
  return {u + p * sh, v + q * sw};
}

namespace detail {

// out[(b*N + win), c, slot] <- x[b, c, row, col]
inline std::shared_ptr<const std::vector<std::int64_t>> partition_index(PartitionKind kind, const WindowSpec& ws,
                                                                        std::int64_t B, std::int64_t C,
                                                                        std::int64_t H, std::int64_t W) {
  const auto N = ws.window_count(H, W), P = ws.patch_len();
  auto map = std::make_shared<std::vector<std::int64_t>>(B * C * H * W);
  std::vector<std::int64_t> pix(N * P);
  for (std::int64_t win = 0; win < N; ++win)
    for (std::int64_t s = 0; s < P; ++s) {
      auto pc = window_pixel(kind, ws, H, W, win, s);
      pix[win * P + s] = pc.row * W + pc.col;
    }
  std::size_t k = 0;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t win = 0; win < N; ++win)
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t s = 0; s < P; ++s) (*map)[k++] = (b * C + c) * H * W + pix[win * P + s];
  return map;
}

inline std::shared_ptr<const std::vector<std::int64_t>> invert(const std::vector<std::int64_t>& fwd) {
  auto inv = std::make_shared<std::vector<std::int64_t>>(fwd.size());
  for (std::size_t i = 0; i < fwd.size(); ++i) (*inv)[fwd[i]] = static_cast<std::int64_t>(i);
  return inv;
}

}  // namespace detail

/// [B,C,H,W] -> [B*H*W/P, C, P]
inline Tensor partition(const Tensor& x, PartitionKind kind, const WindowSpec& ws) {
  if (x.rank() != 4) throw ShapeError("partition expects NCHW, got " + to_string(x.shape()));
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  ws.check_divides(H, W);
  return gather(x, detail::partition_index(kind, ws, B, C, H, W), {B * ws.window_count(H, W), C, ws.patch_len()});
}

/// [B*H*W/P, C, P] -> [B,C,H,W]; exact inverse of `partition`.
inline Tensor reverse(const Tensor& xw, PartitionKind kind, const WindowSpec& ws, std::int64_t H, std::int64_t W) {
  ws.check_divides(H, W);
  const auto N = ws.window_count(H, W), P = ws.patch_len();
  if (xw.rank() != 3 || xw.dim(2) != P || xw.dim(0) % N != 0)
    throw ShapeError("reverse: windows " + to_string(xw.shape()) + " inconsistent with map " + std::to_string(H) + "x" +
                     std::to_string(W) + " and window " + std::to_string(ws.h) + "x" + std::to_string(ws.w));
  const auto B = xw.dim(0) / N, C = xw.dim(1);
  auto fwd = detail::partition_index(kind, ws, B, C, H, W);
  return gather(xw, detail::invert(*fwd), {B, C, H, W});
}

inline Tensor partition_neighbor(const Tensor& x, const WindowSpec& ws) {
  return partition(x, PartitionKind::neighbor, ws);
}
inline Tensor reverse_neighbor(const Tensor& xw, const WindowSpec& ws, std::int64_t H, std::int64_t W) {
  return reverse(xw, PartitionKind::neighbor, ws, H, W);
}
inline Tensor partition_distant(const Tensor& x, const WindowSpec& ws) {
  return partition(x, PartitionKind::distant, ws);
}
inline Tensor reverse_distant(const Tensor& xw, const WindowSpec& ws, std::int64_t H, std::int64_t W) {
  return reverse(xw, PartitionKind::distant, ws, H, W);
}

/// Zero-pads right/bottom up to multiples of (mh, mw).
inline Tensor pad_to_multiple(const Tensor& x, std::int64_t mh, std::int64_t mw) {
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto Hp = (H + mh - 1) / mh * mh, Wp = (W + mw - 1) / mw * mw;
  if (Hp == H && Wp == W) return x;
  auto map = std::make_shared<std::vector<std::int64_t>>(B * C * Hp * Wp);
  std::size_t k = 0;
  for (std::int64_t bc = 0; bc < B * C; ++bc)
    for (std::int64_t r = 0; r < Hp; ++r)
      for (std::int64_t c = 0; c < Wp; ++c) (*map)[k++] = (r < H && c < W) ? (bc * H + r) * W + c : -1;
  return gather(x, std::move(map), {B, C, Hp, Wp});
}

inline Tensor crop(const Tensor& x, std::int64_t H, std::int64_t W) {
  const auto B = x.dim(0), C = x.dim(1), Hp = x.dim(2), Wp = x.dim(3);
  if (H == Hp && W == Wp) return x;
  auto map = std::make_shared<std::vector<std::int64_t>>(B * C * H * W);
  std::size_t k = 0;
  for (std::int64_t bc = 0; bc < B * C; ++bc)
    for (std::int64_t r = 0; r < H; ++r)
      for (std::int64_t c = 0; c < W; ++c) (*map)[k++] = (bc * Hp + r) * Wp + c;
  return gather(x, std::move(map), {B, C, H, W});
}

// ---------------------------------------------------------------------------
// attention

enum class AttentionMode { neighbor, distant, spanning };
enum class AttentionOrder { pre, post };
enum class WindowFit { strict, pad };

inline const char* name_of(AttentionMode m) {
  switch (m) {
    case AttentionMode::neighbor: return "neighbor";
    case AttentionMode::distant: return "distant";
    case AttentionMode::spanning: return "spanning";
  }
  return "?";
}

struct AttentionConfig {
  std::int64_t channels = 1;   // C: width of Q and K
  std::int64_t v_channels = 1; // lambda*C: width of V
  std::int64_t head_dim = 32;
  AttentionMode mode = AttentionMode::neighbor;
  AttentionOrder order = AttentionOrder::post;
  Activation v_activation = Activation::gelu;
  std::int64_t v_groups = 1;  // groups of the expansion projection
  WindowSpec window{7, 7};
  WindowFit fit = WindowFit::strict;

  std::int64_t heads() const { return channels / head_dim; }

  void validate() const {
    if (head_dim <= 0 || channels % head_dim != 0)
      throw ShapeError("attention: channels " + std::to_string(channels) + " not divisible by head_dim " +
                       std::to_string(head_dim));
    if (v_channels % heads() != 0)
      throw ShapeError("attention: v channels " + std::to_string(v_channels) + " not divisible by heads " +
                       std::to_string(heads()));
    if (order == AttentionOrder::pre && v_groups != heads())
      throw ShapeError("pre-attention requires expansion groups == heads (" + std::to_string(v_groups) + " vs " +
                       std::to_string(heads()) + ")");
  }
};

/// Windowed multi-head attention on already-projected q, k [B,C,H,W] and
/// v [B,Cv,H,W] for one partition kind. Returns [B,Cv,H,W]. When `maps` is
/// non-null, the softmax maps [B*N*heads, P, P] are stored there.
inline Tensor window_attention(const Tensor& q, const Tensor& k, const Tensor& v, PartitionKind kind,
                               const WindowSpec& ws, std::int64_t heads, Tensor* maps = nullptr) {
  const auto H = q.dim(2), W = q.dim(3), C = q.dim(1), Cv = v.dim(1);
  const auto P = ws.patch_len();
  const auto dh = C / heads, dv = Cv / heads;
  auto qw = partition(q, kind, ws);
  auto kw = partition(k, kind, ws);
  auto vw = partition(v, kind, ws);
  const auto BN = qw.dim(0);
  auto qh = transpose_last(reshape(qw, {BN * heads, dh, P}));  // [BNh, P, dh]
  auto kh = reshape(kw, {BN * heads, dh, P});
  auto logits = scale(matmul_batched(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
  auto m = softmax(logits, -1);  // row i: weights of query slot i over key slots
  if (maps) *maps = m;
  auto vh = reshape(vw, {BN * heads, dv, P});
  auto out = matmul_batched(vh, transpose_last(m));  // out[d,i] = sum_j v[d,j] M[i,j]
  return reverse(reshape(out, {BN, Cv, P}), kind, ws, H, W);
}

/// Attention over the configured mode; spanning fuses neighbor and distant
/// branches (sharing q, k, v) by elementwise mean. Handles window fitting.
inline Tensor attend(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionConfig& cfg,
                     std::vector<Tensor>* maps = nullptr) {
  const auto H = q.dim(2), W = q.dim(3);
  const WindowSpec ws = resolve_window(cfg.window, H, W);
  Tensor qq = q, kk = k, vv = v;
  if (cfg.fit == WindowFit::pad) {
    qq = pad_to_multiple(q, ws.h, ws.w);
    kk = pad_to_multiple(k, ws.h, ws.w);
    vv = pad_to_multiple(v, ws.h, ws.w);
  } else {
    ws.check_divides(H, W);
  }
  Tensor m1, m2;
  Tensor out;
  switch (cfg.mode) {
    case AttentionMode::neighbor:
      out = window_attention(qq, kk, vv, PartitionKind::neighbor, ws, cfg.heads(), &m1);
      break;
    case AttentionMode::distant:
      out = window_attention(qq, kk, vv, PartitionKind::distant, ws, cfg.heads(), &m1);
      break;
    case AttentionMode::spanning: {
      auto a = window_attention(qq, kk, vv, PartitionKind::neighbor, ws, cfg.heads(), &m1);
      auto b = window_attention(qq, kk, vv, PartitionKind::distant, ws, cfg.heads(), &m2);
      out = scale(add(a, b), 0.5);
      break;
    }
  }
  if (maps) {
    maps->push_back(m1);
    if (m2.defined()) maps->push_back(m2);
  }
  return crop(out, H, W);
}

/// EW-MHSA / SEW-MHSA parameters: the Q,K projection (C -> 2C) and the
/// expansion projection V (C -> lambda*C), shared by both spanning branches.
struct WindowAttention {
  AttentionConfig cfg;
  Conv2d qk;
  Conv2d v;

  WindowAttention() = default;
  WindowAttention(const AttentionConfig& c, std::mt19937_64& rng) : cfg(c) {
    cfg.validate();
    qk = Conv2d(ConvSpec::pointwise(cfg.channels, 2 * cfg.channels), rng);
    v = Conv2d(ConvSpec::pointwise(cfg.channels, cfg.v_channels, cfg.v_groups), rng);
  }

  /// x: [B,C,H,W] (already normalized) -> [B,lambda*C,H,W].
  Tensor operator()(const Tensor& x, std::vector<Tensor>* maps = nullptr) const {
    auto qkx = qk(x);
    auto q = slice_channels(qkx, 0, cfg.channels);
    auto k = slice_channels(qkx, cfg.channels, 2 * cfg.channels);
    if (cfg.order == AttentionOrder::pre) {
      // M applied to the unexpanded stream, then the grouped expansion.
      auto mixed = attend(q, k, x, cfg, maps);
      return activate(v(mixed), cfg.v_activation);
    }
    auto vx = activate(v(x), cfg.v_activation);
    return attend(q, k, vx, cfg, maps);
  }

  std::int64_t param_count() const { return qk.spec.param_count() + v.spec.param_count(); }

  void collect(const std::string& prefix, ParamList& out) const {
    qk.collect(prefix + ".qk", out);
    v.collect(prefix + ".v", out);
  }
};

/// ew_mhsa: neighbor-window attention; the config's mode is overridden.
inline Tensor ew_mhsa(const Tensor& x, const WindowAttention& attn) {
  auto a = attn;
  a.cfg.mode = AttentionMode::neighbor;
  return a(x);
}

/// sew_mhsa: spanning attention with the same parameters.
inline Tensor sew_mhsa(const Tensor& x, const WindowAttention& attn) {
  auto a = attn;
  a.cfg.mode = AttentionMode::spanning;
  return a(x);
}

}  // namespace emo
