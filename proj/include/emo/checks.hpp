#pragma once

// Invariant suites behind `emov2 check`. Each line is machine readable:
//   PASS <suite>.<name> <detail>
//   FAIL <suite>.<name> <detail>
// Failing property checks name the smallest failing case (shape + seed).

#include <chrono>
#include <functional>
#include <future>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "emo/config.hpp"
#include "emo/cost.hpp"
#include "emo/gradcheck.hpp"
#include "emo/io.hpp"
#include "emo/toy.hpp"

namespace emo {

struct CheckLine {
  std::string suite;
  std::string name;
  bool pass = false;
  std::string detail;

  std::string str() const { return std::string(pass ? "PASS " : "FAIL ") + suite + "." + name + " " + detail; }
};

using CheckReport = std::vector<CheckLine>;

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

inline Tensor random_tensor(const Shape& s, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<double> d(static_cast<std::size_t>(numel_of(s)));
  for (auto& v : d) v = nd(rng);
  return Tensor(s, std::move(d));
}

inline void randomize(Tensor t, std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& v : t.mutable_data()) v = u(rng);
}

inline std::vector<std::int64_t> divisors(std::int64_t n) {
  std::vector<std::int64_t> d;
  for (std::int64_t i = 1; i <= n; ++i)
    if (n % i == 0) d.push_back(i);
  return d;
}

// Tracks the smallest failing case of a property.
struct FailureLog {
  std::int64_t count = 0;
  std::int64_t best_size = -1;
  std::string best;

  void add(std::int64_t size, const std::string& what) {
    ++count;
    if (best_size < 0 || size < best_size) {
      best_size = size;
      best = what;
    }
  }
  std::string summary(std::int64_t trials) const {
    if (count == 0) return std::to_string(trials) + " cases";
    return std::to_string(count) + "/" + std::to_string(trials) + " failed; smallest: " + best;
  }
};

}  // namespace detail

// ---------------------------------------------------------------------------

/// Partition/reverse round trips and exact pixel coverage on random divisible
/// geometries with H, W in [4, 64].
inline CheckReport check_partition(std::uint64_t seed, std::int64_t trials = 500) {
  std::mt19937_64 rng(seed);
  detail::FailureLog rt, cov;
  std::uniform_int_distribution<std::int64_t> side(4, 64);
  for (std::int64_t t = 0; t < trials; ++t) {
    const auto case_seed = rng();
    std::mt19937_64 r(case_seed);
    const auto H = side(r), W = side(r);
    auto dh = detail::divisors(H), dw = detail::divisors(W);
    const WindowSpec ws{dh[r() % dh.size()], dw[r() % dw.size()]};
    const std::int64_t B = 1 + static_cast<std::int64_t>(r() % 2), C = 1 + static_cast<std::int64_t>(r() % 3);
    auto x = detail::random_tensor({B, C, H, W}, r);
    std::ostringstream what;
    what << "x=" << to_string(x.shape()) << " window=" << ws.h << "x" << ws.w << " seed=" << case_seed;
    for (auto kind : {PartitionKind::neighbor, PartitionKind::distant}) {
      auto y = reverse(partition(x, kind, ws), kind, ws, H, W);
      bool same = y.shape() == x.shape();
      for (std::int64_t i = 0; same && i < x.numel(); ++i) same = std::bit_cast<std::uint64_t>(x[i]) == std::bit_cast<std::uint64_t>(y[i]);
      if (!same) rt.add(x.numel(), what.str() + (kind == PartitionKind::neighbor ? " neighbor" : " distant"));
      // every pixel lands in exactly one (window, slot)
      std::vector<int> hits(static_cast<std::size_t>(H * W), 0);
      for (std::int64_t n = 0; n < ws.window_count(H, W); ++n)
        for (std::int64_t s = 0; s < ws.patch_len(); ++s) {
          auto p = window_pixel(kind, ws, H, W, n, s);
          if (p.row >= 0 && p.row < H && p.col >= 0 && p.col < W) ++hits[static_cast<std::size_t>(p.row * W + p.col)];
        }
      bool exact = true;
      for (int h : hits) exact = exact && h == 1;
      if (!exact) cov.add(H * W, what.str() + (kind == PartitionKind::neighbor ? " neighbor" : " distant"));
    }
  }
  return {{"partition", "roundtrip_bit_exact", rt.count == 0, rt.summary(trials)},
          {"partition", "pixel_coverage_exact", cov.count == 0, cov.summary(trials)}};
}

// ---------------------------------------------------------------------------

struct EquivalenceCase {
  AttentionConfig pre;
  AttentionConfig post;
  std::int64_t B = 1, H = 4, W = 4;
  std::uint64_t seed = 0;
  std::string describe() const {
    std::ostringstream os;
    os << "x=[" << B << "," << pre.channels << "," << H << "," << W << "] heads=" << pre.heads()
       << " v=" << pre.v_channels << " window=" << pre.window.h << "x" << pre.window.w << " mode=" << name_of(pre.mode)
       << " seed=" << seed;
    return os.str();
  }
};

inline EquivalenceCase random_equivalence_case(std::uint64_t seed, Activation act) {
  std::mt19937_64 r(seed);
  EquivalenceCase c;
  c.seed = seed;
  const std::int64_t heads = std::int64_t{1} << (r() % 3), dh = std::int64_t{2} << (r() % 3);
  const std::int64_t lambda = 1 + static_cast<std::int64_t>(r() % 3);
  const std::int64_t sides[] = {4, 6, 8, 12};
  c.B = 1 + static_cast<std::int64_t>(r() % 2);
  c.H = sides[r() % 4];
  c.W = sides[r() % 4];
  auto dhs = detail::divisors(c.H), dws = detail::divisors(c.W);
  AttentionConfig a;
  a.channels = heads * dh;
  a.v_channels = lambda * a.channels;
  a.head_dim = dh;
  a.mode = static_cast<AttentionMode>(r() % 3);
  // A 1x1 window makes M the identity, so at least two slots are drawn.
  do {
    a.window = {dhs[r() % dhs.size()], dws[r() % dws.size()]};
  } while (a.window.patch_len() < 2);
  a.v_activation = act;
  a.v_groups = heads;
  c.pre = a;
  c.pre.order = AttentionOrder::pre;
  c.post = a;
  c.post.order = AttentionOrder::post;
  return c;
}

/// Max |pre - post| and the relative error max|pre - post| / max|post| of one case.
inline std::pair<double, double> equivalence_gap(const EquivalenceCase& c) {
  std::mt19937_64 r(c.seed ^ 0x9E3779B97F4A7C15ULL);
  WindowAttention pre(c.pre, r);
  detail::randomize(pre.qk.weight, r, 1.0);
  detail::randomize(pre.qk.bias, r, 0.5);
  detail::randomize(pre.v.weight, r, 1.0);
  detail::randomize(pre.v.bias, r, 0.5);
  WindowAttention post = pre;
  post.cfg = c.post;
  auto x = detail::random_tensor({c.B, c.pre.channels, c.H, c.W}, r);
  NoGradGuard ng;
  auto a = pre(x), b = post(x);
  double diff = 0.0, mag = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    mag = std::max(mag, std::abs(b[i]));
  }
  return {diff, diff / std::max(mag, 1e-300)};
}

inline CheckReport check_equivalence(std::uint64_t seed, std::int64_t cases = 100) {
  std::mt19937_64 rng(seed);
  detail::FailureLog eq, neq;
  double worst = 0.0, weakest = 1e300;
  for (std::int64_t t = 0; t < cases; ++t) {
    const auto s = rng();
    auto c = random_equivalence_case(s, Activation::identity);
    auto [diff, rel] = equivalence_gap(c);
    worst = std::max(worst, rel);
    if (!(rel < 1e-5)) eq.add(c.B * c.pre.channels * c.H * c.W, c.describe());
    auto g = random_equivalence_case(s, Activation::gelu);
    auto [gdiff, grel] = equivalence_gap(g);
    (void)grel;
    weakest = std::min(weakest, gdiff);
    if (!(gdiff > 1e-3)) neq.add(g.B * g.pre.channels * g.H * g.W, g.describe());
  }
  return {{"equivalence", "identity_pre_equals_post", eq.count == 0,
           "max_rel_err=" + detail::fmt(worst) + " tol=1e-5 " + eq.summary(cases)},
          {"equivalence", "gelu_breaks_equivalence", neq.count == 0,
           "min_max_abs_diff=" + detail::fmt(weakest) + " threshold=1e-3 " + neq.summary(cases)}};
}

// ---------------------------------------------------------------------------

struct GradCase {
  std::string name;
  std::function<GradCheckResult()> run;
};

inline std::vector<GradCase> grad_cases(std::uint64_t seed) {
  using T = Tensor;
  std::vector<GradCase> cs;
  auto rt = [seed](const Shape& s, std::uint64_t salt, double scale = 1.0) {
    std::mt19937_64 r(seed * 1000003 + salt);
    return detail::random_tensor(s, r, scale);
  };
  auto simple = [&](std::string name, std::function<T(const std::vector<T>&)> f, std::vector<T> in) {
    cs.push_back({std::move(name), [f, in] {
                    auto args = in;
                    return gradcheck([f, args] { return f(args); }, args);
                  }});
  };
  simple("add_broadcast", [](auto& a) { return add(a[0], a[1]); }, {rt({2, 3, 4}, 1), rt({3, 1}, 2)});
  simple("sub", [](auto& a) { return sub(a[0], a[1]); }, {rt({2, 5}, 3), rt({2, 5}, 4)});
  simple("mul_broadcast", [](auto& a) { return mul(a[0], a[1]); }, {rt({2, 3, 4}, 5), rt({4}, 6)});
  simple("scale", [](auto& a) { return scale(a[0], -1.7); }, {rt({7}, 7)});
  simple("silu", [](auto& a) { return silu(a[0]); }, {rt({3, 5}, 8, 2.0)});
  simple("gelu", [](auto& a) { return gelu(a[0]); }, {rt({3, 5}, 9, 2.0)});
  simple("sum", [](auto& a) { return sum(a[0]); }, {rt({3, 4}, 10)});
  simple("mean", [](auto& a) { return mean(a[0]); }, {rt({3, 4}, 11)});
  simple("softmax_last", [](auto& a) { return softmax(a[0], -1); }, {rt({2, 3, 5}, 12)});
  simple("softmax_mid", [](auto& a) { return softmax(a[0], 1); }, {rt({2, 3, 5}, 13)});
  simple("matmul_batched", [](auto& a) { return matmul_batched(a[0], a[1]); }, {rt({2, 3, 4}, 14), rt({2, 4, 5}, 15)});
  simple("reshape", [](auto& a) { return mul(reshape(a[0], {4, 3}), a[1]); }, {rt({2, 6}, 16), rt({4, 3}, 17)});
  simple("permute", [](auto& a) { return permute(a[0], {2, 0, 1}); }, {rt({2, 3, 4}, 18)});
  simple("transpose_last", [](auto& a) { return transpose_last(a[0]); }, {rt({2, 3, 4}, 19)});
  simple("slice_concat", [](auto& a) { return concat_channels(slice_channels(a[0], 1, 3), a[1]); },
         {rt({1, 4, 2, 2}, 20), rt({1, 2, 2, 2}, 21)});
  simple("partition_neighbor", [](auto& a) { return partition_neighbor(a[0], {2, 3}); }, {rt({1, 2, 4, 6}, 22)});
  simple("partition_distant", [](auto& a) { return partition_distant(a[0], {2, 3}); }, {rt({1, 2, 4, 6}, 23)});
  simple("reverse_distant", [](auto& a) { return reverse_distant(a[0], {2, 2}, 4, 4); }, {rt({4, 3, 4}, 24)});
  simple("pad_crop", [](auto& a) { return crop(scale(pad_to_multiple(a[0], 4, 4), 2.0), 3, 5); },
         {rt({1, 2, 3, 5}, 25)});
  simple("cross_entropy", [](auto& a) { return cross_entropy(a[0], {2, 0, 1}); }, {rt({3, 4}, 26)});
  simple("global_avg_pool", [](auto& a) { return global_avg_pool(a[0]); }, {rt({2, 3, 3, 4}, 27)});
  simple("linear", [](auto& a) { return linear(a[0], a[1], a[2]); }, {rt({2, 5}, 28), rt({3, 5}, 29), rt({3}, 30)});
  auto conv_case = [&](std::string name, ConvSpec spec, std::int64_t H, std::int64_t W, std::uint64_t salt) {
    simple(std::move(name), [spec](auto& a) { return conv2d(a[0], spec, a[1], a[2]); },
           {rt({2, spec.in_channels, H, W}, salt), rt(spec.weight_shape(), salt + 1), rt({spec.out_channels}, salt + 2)});
  };
  conv_case("conv2d_3x3", {3, 4, 3, 1, 1, 1, 1}, 5, 4, 40);
  conv_case("conv2d_strided", {2, 3, 3, 2, 1, 1, 1}, 5, 6, 43);
  conv_case("conv2d_grouped", {4, 6, 3, 1, 1, 1, 2}, 4, 4, 46);
  conv_case("conv2d_dilated", {2, 2, 3, 1, 2, 2, 1}, 6, 5, 49);
  conv_case("conv2d_pointwise", ConvSpec::pointwise(3, 5), 3, 3, 52);
  conv_case("conv2d_depthwise_k5", ConvSpec::depthwise(3, 5, 2), 6, 7, 55);
  simple("batchnorm2d_train",
         [](auto& a) {
           RunningStats st{std::vector<double>(3, 0.0), std::vector<double>(3, 1.0)};
           return batchnorm2d(a[0], NormSpec::batchnorm(3), a[1], a[2], st, Mode::train);
         },
         {rt({2, 3, 3, 2}, 60), rt({3}, 61), rt({3}, 62)});
  simple("batchnorm2d_eval",
         [](auto& a) {
           RunningStats st{{0.1, -0.2, 0.3}, {1.5, 0.7, 2.0}};
           return batchnorm2d(a[0], NormSpec::batchnorm(3), a[1], a[2], st, Mode::eval);
         },
         {rt({2, 3, 3, 2}, 63), rt({3}, 64), rt({3}, 65)});
  simple("layernorm_tokens",
         [](auto& a) { return layernorm_tokens(a[0], NormSpec::layernorm(4), a[1], a[2]); },
         {rt({2, 4, 3, 2}, 66), rt({4}, 67), rt({4}, 68)});
  for (auto mode : {AttentionMode::neighbor, AttentionMode::distant, AttentionMode::spanning}) {
    AttentionConfig cfg;
    cfg.channels = 4;
    cfg.v_channels = 8;
    cfg.head_dim = 2;
    cfg.mode = mode;
    cfg.window = {2, 2};
    simple(std::string("attend_") + name_of(mode), [cfg](auto& a) { return attend(a[0], a[1], a[2], cfg); },
           {rt({1, 4, 4, 4}, 70), rt({1, 4, 4, 4}, 71), rt({1, 8, 4, 4}, 72)});
  }
  {
    AttentionConfig cfg;
    cfg.channels = 2;
    cfg.v_channels = 2;
    cfg.head_dim = 2;
    cfg.mode = AttentionMode::spanning;
    cfg.window = {2, 2};
    cfg.fit = WindowFit::pad;
    simple("attend_padded", [cfg](auto& a) { return attend(a[0], a[1], a[2], cfg); },
           {rt({1, 2, 3, 5}, 73), rt({1, 2, 3, 5}, 74), rt({1, 2, 3, 5}, 75)});
  }
  // Full blocks: the input and every learnable parameter.
  auto block_case = [&](std::string name, MetaMobileBlockSpec spec, Mode mode, std::int64_t H, std::uint64_t salt) {
    cs.push_back({std::move(name), [=] {
                    std::mt19937_64 r(seed + salt);
                    MetaMobileBlock blk(spec, r);
                    std::vector<T> in{rt({2, spec.in_channels, H, H}, salt)};
                    for (auto& p : blk.parameters())
                      if (p.learnable) {
                        detail::randomize(p.tensor, r, 0.5);
                        in.push_back(p.tensor);
                      }
                    const auto x = in[0];
                    GradCheckOptions o;
                    o.max_probes = 24;
                    o.seed = salt;
                    return gradcheck([blk, x, mode] { return blk.forward(x, mode); }, in, o);
                  }});
  };
  {
    auto s = MetaMobileBlockSpec::i2rmb(8, 8, Ratio(2), 4, {2, 2});
    s.kernel = 3;
    s.drop_path = 0.0;
    block_case("i2rmb_block_train", s, Mode::train, 4, 80);
    block_case("i2rmb_block_eval", s, Mode::eval, 4, 81);
  }
  {
    auto s = MetaMobileBlockSpec::irmb(8, 8, Ratio(2), 4, {2, 2});
    s.drop_path = 0.0;
    block_case("irmb_block_train", s, Mode::train, 4, 82);
  }
  {
    MetaMobileBlockSpec s = MetaMobileBlockSpec::irb(4, 6, Ratio(2), 3, 2);
    s.drop_path = 0.0;
    block_case("irb_downsample_train", s, Mode::train, 4, 83);
  }
  // Whole toy network, spot-checked.
  cs.push_back({"toy_network", [seed] {
                  Model m(toy_config(), seed);
                  std::mt19937_64 r(seed + 90);
                  auto x = detail::random_tensor({2, 3, 32, 32}, r);
                  std::vector<T> in{x};
                  for (auto& p : m.parameters())
                    if (p.learnable) in.push_back(p.tensor);
                  GradCheckOptions o;
                  o.max_probes = 3;
                  o.seed = 91;
                  return gradcheck([&m, x] { return cross_entropy(m.classify(x, Mode::train), {1, 3}); }, in, o);
                }});
  return cs;
}

inline CheckReport check_grads(std::uint64_t seed, double tol = 1e-4) {
  CheckReport out;
  for (auto& c : grad_cases(seed)) {
    auto r = c.run();
    out.push_back({"grads", c.name, r.max_error < tol,
                   "max_rel_err=" + detail::fmt(r.max_error) + " tol=" + detail::fmt(tol) + " probes=" +
                       std::to_string(r.probes) + (r.max_error < tol ? "" : " worst=" + r.worst + " seed=" + std::to_string(seed))});
  }
  return out;
}

// ---------------------------------------------------------------------------

struct PresetTarget {
  const char* name;
  double params;
  double macs;  // 0: no published value
};

inline const std::vector<PresetTarget>& preset_targets() {
  static const std::vector<PresetTarget> t{{"emov2-1m", 1.4e6, 285e6},
                                           {"emov2-2m", 2.3e6, 487e6},
                                           {"emov2-5m", 5.1e6, 1035e6},
                                           {"emov2-20m", 20.1e6, 4.0e9},
                                           {"emov2-50m", 49.8e6, 0}};
  return t;
}

inline double rel_diff(double a, double b) { return std::abs(a - b) / std::abs(b); }

/// Parameter and FLOPs accounting. `trace` adds executed-op comparisons at
/// 224 (slow for the large presets).
inline CheckReport check_cost(bool trace = true) {
  CheckReport out;
  for (const auto& t : preset_targets()) {
    const auto cfg = preset(t.name);
    const auto rep = report_model(cfg, 224);
    const Model m(cfg, 0);
    const auto enumerated = m.param_count();
    out.push_back({"cost", std::string(t.name) + ".params_analytic_equals_enumerated", rep.params() == enumerated,
                   "analytic=" + std::to_string(rep.params()) + " enumerated=" + std::to_string(enumerated)});
    const double pd = rel_diff(static_cast<double>(enumerated), t.params);
    out.push_back({"cost", std::string(t.name) + ".params_within_5pct", pd <= 0.05,
                   "params=" + std::to_string(enumerated) + " target=" + detail::fmt(t.params) + " rel=" + detail::fmt(pd)});
    if (t.macs > 0) {
      const double fd = rel_diff(static_cast<double>(rep.macs()), t.macs);
      out.push_back({"cost", std::string(t.name) + ".macs_within_10pct", fd <= 0.10,
                     "macs=" + std::to_string(rep.macs()) + " flops(2xMAC)=" + std::to_string(rep.flops()) +
                         " target=" + detail::fmt(t.macs) + " rel=" + detail::fmt(fd)});
    }
    if (trace && t.macs > 0) {
      const auto tr = trace_flops(m, Tensor::zeros({1, 3, 224, 224}));
      const double cd = rel_diff(static_cast<double>(tr.conv_flops()), static_cast<double>(rep.conv_flops()));
      const double ad = rel_diff(static_cast<double>(tr.attn_flops()), static_cast<double>(rep.attn_flops()));
      out.push_back({"cost", std::string(t.name) + ".traced_conv_within_1pct", cd <= 0.01,
                     "traced=" + std::to_string(tr.conv_flops()) + " analytic=" + std::to_string(rep.conv_flops())});
      out.push_back({"cost", std::string(t.name) + ".traced_attention_within_5pct", ad <= 0.05,
                     "traced=" + std::to_string(tr.attn_flops()) + " analytic=" + std::to_string(rep.attn_flops())});
    }
    // Spanning is parameter-free but not FLOPs-free.
    Model off(cfg, 0);
    off.set_spanning(false);
    const auto dp = enumerated - off.param_count();
    const auto rep_off = report_model(off.config(), 224);
    out.push_back({"cost", std::string(t.name) + ".spanning_parameter_free", dp == 0,
                   "param_delta=" + std::to_string(dp) +
                       " flops_delta=" + std::to_string(rep.flops() - rep_off.flops())});
  }
  // Closed forms.
  Symbols s;
  s.C = 48;
  s.k = 5;
  out.push_back({"cost", "dwconv_params_C48_k5", params_of(CostKind::dwconv, s) == 1248,
                 "got=" + std::to_string(params_of(CostKind::dwconv, s))});
  Symbols a;
  a.C = 64;
  out.push_back({"cost", "mhsa_params_4C2", params_of(CostKind::mhsa, a) == 4 * 65 * 64,
                 "got=" + std::to_string(params_of(CostKind::mhsa, a))});
  Symbols w;
  w.C = 160;
  w.L = 196;
  w.l = 49;
  const auto wf = flops_of(CostKind::w_mhsa, w);
  const auto wref = 8 * 160 * 160 * 196 + 4 * 160 * 196 * 49 + 3 * 196 * 49;
  out.push_back({"cost", "w_mhsa_flops_formula", wf == wref, "got=" + std::to_string(wf) + " formula=" + std::to_string(wref)});
  return out;
}

// ---------------------------------------------------------------------------

inline CheckReport check_erf() {
  CheckReport out;
  {
    auto r = layers_to_full_coverage({LayerDesc::neighbor(4, 4)}, 16, 16);
    Reachability st(16, 16);
    for (int i = 0; i < 4; ++i) st.apply(LayerDesc::neighbor(4, 4));
    const double cov = st.coverage(8 * 16 + 8);
    out.push_back({"erf", "neighbor_only_unreachable", !r.has_value() && cov == 1.0 / 16.0,
                   std::string("layers=") + (r ? std::to_string(*r) : "inf") + " center_coverage=" + detail::fmt(cov)});
  }
  {
    // Divisible geometries where the window side covers the distant stride.
    std::int64_t cases = 0, worst = 0;
    std::string bad;
    for (std::int64_t H = 4; H <= 24; ++H)
      for (std::int64_t W = 4; W <= 24; W += 4)
        for (auto h : detail::divisors(H))
          for (auto w : detail::divisors(W)) {
            if (h * h < H || w * w < W || h == H || w == W) continue;
            ++cases;
            auto r = layers_to_full_coverage({LayerDesc::spanning(h, w)}, H, W);
            const auto n = r ? *r : 1000;
            if (n > worst) {
              worst = n;
              if (n > 2) bad = std::to_string(H) + "x" + std::to_string(W) + " window " + std::to_string(h) + "x" + std::to_string(w);
            }
          }
    out.push_back({"erf", "spanning_full_within_2", worst <= 2,
                   std::to_string(cases) + " geometries, max_layers=" + std::to_string(worst) + (bad.empty() ? "" : " at " + bad)});
  }
  {
    std::string detail_s;
    bool ok = true;
    for (std::int64_t W : {5, 9, 17})
      for (std::int64_t k : {3, 5, 7}) {
        auto r = layers_to_full_coverage({LayerDesc::dwconv(k)}, W, W);
        Symbols s;
        s.W = W;
        s.k = k;
        const double formula = mpl_of(CostKind::dwconv, s).layers;
        const bool good = r && std::abs(static_cast<double>(*r) - formula) <= 1.0;
        ok = ok && good;
        detail_s += " W" + std::to_string(W) + "k" + std::to_string(k) + "=" + (r ? std::to_string(*r) : "inf") + "/" +
                    detail::fmt(formula);
      }
    out.push_back({"erf", "dwconv_matches_2W_over_k-1", ok, "layers/formula:" + detail_s});
  }
  {
    Reachability st(9, 9);
    st.apply(LayerDesc::dwconv(3));
    out.push_back({"erf", "dwconv_single_layer_3x3", st.reached_count(4 * 9 + 4) == 9,
                   "reached=" + std::to_string(st.reached_count(4 * 9 + 4))});
  }
  return out;
}

// ---------------------------------------------------------------------------

inline const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> n{"grads", "partition", "equivalence", "cost", "erf"};
  return n;
}

inline CheckReport run_suite(const std::string& name, std::uint64_t seed) {
  if (name == "grads") return check_grads(seed);
  if (name == "partition") return check_partition(seed);
  if (name == "equivalence") return check_equivalence(seed);
  if (name == "cost") return check_cost();
  if (name == "erf") return check_erf();
  throw std::invalid_argument("unknown check suite '" + name + "'");
}

/// Runs suites (possibly in parallel); the report keeps the given order.
inline CheckReport run_suites(const std::vector<std::string>& names, std::uint64_t seed, int threads = 1) {
  std::vector<CheckReport> parts(names.size());
  if (threads <= 1) {
    for (std::size_t i = 0; i < names.size(); ++i) parts[i] = run_suite(names[i], seed);
  } else {
    std::vector<std::future<CheckReport>> fs;
    std::size_t next = 0;
    while (next < names.size() || !fs.empty()) {
      while (next < names.size() && static_cast<int>(fs.size()) < threads) {
        fs.push_back(std::async(std::launch::async, [&, i = next] { return run_suite(names[i], seed); }));
        ++next;
      }
      // Collect in submission order.
      const auto done = next - fs.size();
      parts[done] = fs.front().get();
      fs.erase(fs.begin());
    }
  }
  CheckReport all;
  for (auto& p : parts) all.insert(all.end(), p.begin(), p.end());
  return all;
}

}  // namespace emo
