#pragma once

// Convolution, normalization, stochastic depth, pooling and the linear head.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "emo/ops.hpp"

namespace emo {

// ---------------------------------------------------------------------------
// conv2d

struct ConvSpec {
  std::int64_t in_channels = 1;
  std::int64_t out_channels = 1;
  std::int64_t kernel = 1;
  std::int64_t stride = 1;
  std::int64_t padding = 0;
  std::int64_t dilation = 1;
  std::int64_t groups = 1;

  static ConvSpec pointwise(std::int64_t cin, std::int64_t cout, std::int64_t groups = 1) {
    return {cin, cout, 1, 1, 0, 1, groups};
  }
  static ConvSpec depthwise(std::int64_t c, std::int64_t k, std::int64_t stride = 1, std::int64_t dilation = 1) {
    return {c, c, k, stride, dilation * (k - 1) / 2, dilation, c};
  }

  void validate() const {
    if (in_channels <= 0 || out_channels <= 0 || kernel <= 0 || stride <= 0 || dilation <= 0 || groups <= 0 ||
        padding < 0)
      throw ShapeError("conv: non-positive spec field");
    if (in_channels % groups != 0 || out_channels % groups != 0)
      throw ShapeError("conv: channels " + std::to_string(in_channels) + "->" + std::to_string(out_channels) +
                       " not divisible by groups " + std::to_string(groups));
  }
  std::int64_t out_extent(std::int64_t in) const {
    return (in + 2 * padding - dilation * (kernel - 1) - 1) / stride + 1;
  }
  Shape weight_shape() const { return {out_channels, in_channels / groups, kernel, kernel}; }
  /// Learnable scalars including bias: (C_in k^2 / G + 1) C_out.
  std::int64_t param_count() const { return (in_channels * kernel * kernel / groups + 1) * out_channels; }
};

namespace detail {

struct ConvGeom {
  ConvSpec spec;
  std::int64_t N, H, W, Ho, Wo;
  std::int64_t cin_g() const { return spec.in_channels / spec.groups; }
  std::int64_t cout_g() const { return spec.out_channels / spec.groups; }
  std::int64_t col_rows() const { return cin_g() * spec.kernel * spec.kernel; }
  std::int64_t col_cols() const { return Ho * Wo; }
  bool is_identity_lowering() const {
    return spec.kernel == 1 && spec.stride == 1 && spec.padding == 0;
  }
};

// cols[(c*k + i)*k + j, oy*Wo + ox] = x[c, oy*s - p + i*d, ox*s - p + j*d]
inline void im2col(const ConvGeom& g, const double* x, double* cols) {
  const auto k = g.spec.kernel, s = g.spec.stride, p = g.spec.padding, d = g.spec.dilation;
  for (std::int64_t c = 0; c < g.cin_g(); ++c)
    for (std::int64_t i = 0; i < k; ++i)
      for (std::int64_t j = 0; j < k; ++j) {
        double* row = cols + ((c * k + i) * k + j) * g.col_cols();
        const double* xc = x + c * g.H * g.W;
        for (std::int64_t oy = 0; oy < g.Ho; ++oy) {
          const std::int64_t iy = oy * s - p + i * d;
          for (std::int64_t ox = 0; ox < g.Wo; ++ox) {
            const std::int64_t ix = ox * s - p + j * d;
            row[oy * g.Wo + ox] = (iy >= 0 && iy < g.H && ix >= 0 && ix < g.W) ? xc[iy * g.W + ix] : 0.0;
          }
        }
      }
}

inline void col2im_add(const ConvGeom& g, const double* cols, double* dx) {
  const auto k = g.spec.kernel, s = g.spec.stride, p = g.spec.padding, d = g.spec.dilation;
  for (std::int64_t c = 0; c < g.cin_g(); ++c)
    for (std::int64_t i = 0; i < k; ++i)
      for (std::int64_t j = 0; j < k; ++j) {
        const double* row = cols + ((c * k + i) * k + j) * g.col_cols();
        double* xc = dx + c * g.H * g.W;
        for (std::int64_t oy = 0; oy < g.Ho; ++oy) {
          const std::int64_t iy = oy * s - p + i * d;
          if (iy < 0 || iy >= g.H) continue;
          for (std::int64_t ox = 0; ox < g.Wo; ++ox) {
            const std::int64_t ix = ox * s - p + j * d;
            if (ix >= 0 && ix < g.W) xc[iy * g.W + ix] += row[oy * g.Wo + ox];
          }
        }
      }
}

}  // namespace detail

/// Grouped 2-D cross-correlation, x [N,C_in,H,W], weight [C_out,C_in/G,k,k],
/// optional bias [C_out]. Lowered to GEMM per (sample, group).
inline Tensor conv2d(const Tensor& x, const ConvSpec& spec, const Tensor& weight, const Tensor& bias = {}) {
  spec.validate();
  if (x.rank() != 4 || x.dim(1) != spec.in_channels)
    throw ShapeError("conv2d: input " + to_string(x.shape()) + " vs in_channels " + std::to_string(spec.in_channels));
  if (weight.shape() != spec.weight_shape())
    throw ShapeError("conv2d: weight " + to_string(weight.shape()) + " expected " + to_string(spec.weight_shape()));
  if (bias.defined() && bias.shape() != Shape{spec.out_channels}) throw ShapeError("conv2d: bias shape");

  detail::ConvGeom g{spec, x.dim(0), x.dim(2), x.dim(3), spec.out_extent(x.dim(2)), spec.out_extent(x.dim(3))};
  if (g.Ho < 1 || g.Wo < 1)
    throw ShapeError("conv2d: non-positive output extent for input " + to_string(x.shape()));

  const auto G = spec.groups, R = g.col_rows(), L = g.col_cols();
  std::vector<double> out(g.N * spec.out_channels * L, 0.0);
  std::vector<double> cols(g.is_identity_lowering() ? 0 : R * L);
  auto xd = x.data();
  auto wd = weight.data();
  for (std::int64_t n = 0; n < g.N; ++n)
    for (std::int64_t gi = 0; gi < G; ++gi) {
      const double* xg = xd.data() + (n * spec.in_channels + gi * g.cin_g()) * g.H * g.W;
      const double* c = xg;
      if (!g.is_identity_lowering()) {
        detail::im2col(g, xg, cols.data());
        c = cols.data();
      }
      double* og = out.data() + (n * spec.out_channels + gi * g.cout_g()) * L;
      kernel::gemm_nn(g.cout_g(), L, R, wd.data() + gi * g.cout_g() * R, c, og);
    }
  if (bias.defined()) {
    auto bd = bias.data();
    for (std::int64_t n = 0; n < g.N; ++n)
      for (std::int64_t co = 0; co < spec.out_channels; ++co) {
        double* o = out.data() + (n * spec.out_channels + co) * L;
        for (std::int64_t i = 0; i < L; ++i) o[i] += bd[co];
      }
  }
  if (auto* t = detail::tracer()) {
    t->conv_macs += g.N * spec.out_channels * L * R;
    if (bias.defined()) t->bias_adds += g.N * spec.out_channels * L;
  }

  auto xi = x.impl();
  auto wi = weight.impl();
  const bool has_bias = bias.defined();
  return detail::make_result(
      {g.N, spec.out_channels, g.Ho, g.Wo}, std::move(out), {x, weight, bias}, "conv2d",
      [g, xi, wi, has_bias](std::span<const double> gy, std::vector<double*>& gin) {
        const auto& spec = g.spec;
        const auto G = spec.groups, R = g.col_rows(), L = g.col_cols();
        std::vector<double> cols(R * L);
        for (std::int64_t n = 0; n < g.N; ++n)
          for (std::int64_t gi = 0; gi < G; ++gi) {
            const double* gyg = gy.data() + (n * spec.out_channels + gi * g.cout_g()) * L;
            const double* xg = xi->data.data() + (n * spec.in_channels + gi * g.cin_g()) * g.H * g.W;
            if (gin[1]) {
              const double* c = xg;
              if (!g.is_identity_lowering()) {
                detail::im2col(g, xg, cols.data());
                c = cols.data();
              }
              kernel::gemm_nt(g.cout_g(), R, L, gyg, c, gin[1] + gi * g.cout_g() * R);
            }
            if (gin[0]) {
              double* dxg = gin[0] + (n * spec.in_channels + gi * g.cin_g()) * g.H * g.W;
              const double* wg = wi->data.data() + gi * g.cout_g() * R;
              if (g.is_identity_lowering()) {
                kernel::gemm_tn(R, L, g.cout_g(), wg, gyg, dxg);
              } else {
                std::fill(cols.begin(), cols.end(), 0.0);
                kernel::gemm_tn(R, L, g.cout_g(), wg, gyg, cols.data());
                detail::col2im_add(g, cols.data(), dxg);
              }
            }
          }
        if (has_bias && gin[2])
          for (std::int64_t n = 0; n < g.N; ++n)
            for (std::int64_t co = 0; co < spec.out_channels; ++co) {
              const double* o = gy.data() + (n * spec.out_channels + co) * L;
              double s = 0.0;
              for (std::int64_t i = 0; i < L; ++i) s += o[i];
              gin[2][co] += s;
            }
      });
}

// ---------------------------------------------------------------------------
// normalization

enum class Mode { train, eval };

enum class NormKind { batchnorm2d, layernorm_tokens };

struct NormSpec {
  NormKind kind = NormKind::batchnorm2d;
  std::int64_t channels = 1;
  double epsilon = 1e-5;
  double momentum = 0.1;

  static NormSpec batchnorm(std::int64_t c) { return {NormKind::batchnorm2d, c, 1e-5, 0.1}; }
  static NormSpec layernorm(std::int64_t c) { return {NormKind::layernorm_tokens, c, 1e-6, 0.0}; }
};

struct RunningStats {
  std::vector<double> mean;
  std::vector<double> var;
};

/// Train mode normalizes by (biased) batch statistics and updates `stats`
/// with the unbiased variance; eval mode uses `stats` only.
inline Tensor batchnorm2d(const Tensor& x, const NormSpec& spec, const Tensor& gamma, const Tensor& beta,
                          RunningStats& stats, Mode mode) {
  if (x.rank() != 4 || x.dim(1) != spec.channels)
    throw ShapeError("batchnorm2d: input " + to_string(x.shape()) + " vs channels " + std::to_string(spec.channels));
  const auto N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const double cnt = static_cast<double>(N * HW);
  if (static_cast<std::int64_t>(stats.mean.size()) != C) {
    stats.mean.assign(C, 0.0);
    stats.var.assign(C, 1.0);
  }
  auto xd = x.data();
  std::vector<double> mu(C), inv_std(C);
  const bool train = mode == Mode::train;
  for (std::int64_t c = 0; c < C; ++c) {
    if (train) {
      double s = 0.0;
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t i = 0; i < HW; ++i) s += xd[(n * C + c) * HW + i];
      double m = s / cnt;
      double v = 0.0;
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t i = 0; i < HW; ++i) {
          double d = xd[(n * C + c) * HW + i] - m;
          v += d * d;
        }
      v /= cnt;
      mu[c] = m;
      inv_std[c] = 1.0 / std::sqrt(v + spec.epsilon);
      const double unbiased = cnt > 1 ? v * cnt / (cnt - 1) : v;
      stats.mean[c] = (1 - spec.momentum) * stats.mean[c] + spec.momentum * m;
      stats.var[c] = (1 - spec.momentum) * stats.var[c] + spec.momentum * unbiased;
    } else {
      mu[c] = stats.mean[c];
      inv_std[c] = 1.0 / std::sqrt(stats.var[c] + spec.epsilon);
    }
  }
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  std::vector<double> out(x.numel());
  auto gd = gamma.data();
  auto bd = beta.data();
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t i = 0; i < HW; ++i) {
        auto k = (n * C + c) * HW + i;
        (*xhat)[k] = (xd[k] - mu[c]) * inv_std[c];
        out[k] = gd[c] * (*xhat)[k] + bd[c];
      }
  auto gi = gamma.impl();
  return detail::make_result(
      x.shape(), std::move(out), {x, gamma, beta}, "batchnorm2d",
      [=](std::span<const double> g, std::vector<double*>& gin) {
        const auto& gm = gi->data;
        for (std::int64_t c = 0; c < C; ++c) {
          double sg = 0.0, sgx = 0.0;
          for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t i = 0; i < HW; ++i) {
              auto k = (n * C + c) * HW + i;
              sg += g[k];
              sgx += g[k] * (*xhat)[k];
            }
          if (gin[1]) gin[1][c] += sgx;
          if (gin[2]) gin[2][c] += sg;
          if (!gin[0]) continue;
          for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t i = 0; i < HW; ++i) {
              auto k = (n * C + c) * HW + i;
              if (train)
                gin[0][k] += gm[c] * inv_std[c] * (g[k] - sg / cnt - (*xhat)[k] * sgx / cnt);
              else
                gin[0][k] += gm[c] * inv_std[c] * g[k];
            }
        }
      });
}

/// Per (n,h,w) token, normalizes across the C channel values, then affine.
inline Tensor layernorm_tokens(const Tensor& x, const NormSpec& spec, const Tensor& gamma, const Tensor& beta) {
  if (x.rank() != 4 || x.dim(1) != spec.channels)
    throw ShapeError("layernorm_tokens: input " + to_string(x.shape()) + " vs channels " +
                     std::to_string(spec.channels));
  const auto N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(N * HW);
  std::vector<double> out(x.numel());
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t i = 0; i < HW; ++i) {
      double m = 0.0;
      for (std::int64_t c = 0; c < C; ++c) m += xd[(n * C + c) * HW + i];
      m /= static_cast<double>(C);
      double v = 0.0;
      for (std::int64_t c = 0; c < C; ++c) {
        double d = xd[(n * C + c) * HW + i] - m;
        v += d * d;
      }
      v /= static_cast<double>(C);
      double is = 1.0 / std::sqrt(v + spec.epsilon);
      (*inv_std)[n * HW + i] = is;
      for (std::int64_t c = 0; c < C; ++c) {
        auto k = (n * C + c) * HW + i;
        (*xhat)[k] = (xd[k] - m) * is;
        out[k] = gd[c] * (*xhat)[k] + bd[c];
      }
    }
  auto gi = gamma.impl();
  return detail::make_result(x.shape(), std::move(out), {x, gamma, beta}, "layernorm_tokens",
                             [=](std::span<const double> g, std::vector<double*>& gin) {
                               const auto& gm = gi->data;
                               const double Cd = static_cast<double>(C);
                               for (std::int64_t n = 0; n < N; ++n)
                                 for (std::int64_t i = 0; i < HW; ++i) {
                                   double s1 = 0.0, s2 = 0.0;
                                   for (std::int64_t c = 0; c < C; ++c) {
                                     auto k = (n * C + c) * HW + i;
                                     double gh = g[k] * gm[c];
                                     s1 += gh;
                                     s2 += gh * (*xhat)[k];
                                     if (gin[1]) gin[1][c] += g[k] * (*xhat)[k];
                                     if (gin[2]) gin[2][c] += g[k];
                                   }
                                   if (!gin[0]) continue;
                                   const double is = (*inv_std)[n * HW + i];
                                   for (std::int64_t c = 0; c < C; ++c) {
                                     auto k = (n * C + c) * HW + i;
                                     gin[0][k] += is * (g[k] * gm[c] - s1 / Cd - (*xhat)[k] * s2 / Cd);
                                   }
                                 }
                             });
}

// ---------------------------------------------------------------------------
// stochastic depth, pooling, linear

/// Zeros the whole sample with probability `rate` in train mode and rescales
/// survivors by 1/(1-rate). Identity in eval mode or at rate 0.
inline Tensor drop_path(const Tensor& x, double rate, Mode mode, std::mt19937_64& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("drop_path: rate must be in [0,1)");
  if (mode == Mode::eval || rate == 0.0) return x;
  Shape ms(x.rank(), 1);
  ms[0] = x.dim(0);
  std::vector<double> mask(x.dim(0));
  std::bernoulli_distribution keep(1.0 - rate);
  for (auto& m : mask) m = keep(rng) ? 1.0 / (1.0 - rate) : 0.0;
  return mul(x, Tensor(ms, std::move(mask)));
}

/// [N,C,H,W] -> [N,C]
inline Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool expects NCHW, got " + to_string(x.shape()));
  const auto N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  std::vector<double> out(N * C, 0.0);
  auto xd = x.data();
  for (std::int64_t r = 0; r < N * C; ++r) {
    double s = 0.0;
    for (std::int64_t i = 0; i < HW; ++i) s += xd[r * HW + i];
    out[r] = s / static_cast<double>(HW);
  }
  return detail::make_result({N, C}, std::move(out), {x}, "global_avg_pool",
                             [=](std::span<const double> g, std::vector<double*>& gin) {
                               for (std::int64_t r = 0; r < N * C; ++r)
                                 for (std::int64_t i = 0; i < HW; ++i)
                                   gin[0][r * HW + i] += g[r] / static_cast<double>(HW);
                             });
}

/// x [N,C], weight [K,C], bias [K] -> [N,K]
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || weight.dim(1) != x.dim(1) || bias.shape() != Shape{weight.dim(0)})
    throw ShapeError("linear: x " + to_string(x.shape()) + " weight " + to_string(weight.shape()) + " bias " +
                     to_string(bias.shape()));
  const auto N = x.dim(0), C = x.dim(1), K = weight.dim(0);
  std::vector<double> out(N * K, 0.0);
  kernel::gemm_nt(N, K, C, x.data().data(), weight.data().data(), out.data());
  auto bd = bias.data();
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t k = 0; k < K; ++k) out[n * K + k] += bd[k];
  if (auto* t = detail::tracer()) {
    t->conv_macs += N * K * C;
    t->bias_adds += N * K;
  }
  auto xi = x.impl();
  auto wi = weight.impl();
  return detail::make_result({N, K}, std::move(out), {x, weight, bias}, "linear",
                             [=](std::span<const double> g, std::vector<double*>& gin) {
                               if (gin[0]) kernel::gemm_nn(N, C, K, g.data(), wi->data.data(), gin[0]);
                               if (gin[1]) kernel::gemm_tn(K, C, N, g.data(), xi->data.data(), gin[1]);
                               if (gin[2])
                                 for (std::int64_t n = 0; n < N; ++n)
                                   for (std::int64_t k = 0; k < K; ++k) gin[2][k] += g[n * K + k];
                             });
}

// ---------------------------------------------------------------------------
// Parameter registry and layer modules.

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool learnable = true;  // false for running statistics
};

using ParamList = std::vector<NamedTensor>;

/// Truncated normal (resampled beyond 2 sigma), std 0.02 by default.
inline Tensor trunc_normal(const Shape& s, std::mt19937_64& rng, double stddev = 0.02) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> d(numel_of(s));
  for (auto& v : d) {
    double z;
    do {
      z = nd(rng);
    } while (std::abs(z) > 2.0);
    v = z * stddev;
  }
  return Tensor(s, std::move(d), true);
}

struct Conv2d {
  ConvSpec spec;
  Tensor weight;
  Tensor bias;

  Conv2d() = default;
  Conv2d(const ConvSpec& s, std::mt19937_64& rng) : spec(s) {
    spec.validate();
    weight = trunc_normal(spec.weight_shape(), rng);
    bias = Tensor::zeros({spec.out_channels}, true);
  }
  Tensor operator()(const Tensor& x) const { return conv2d(x, spec, weight, bias); }
  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

/// BatchNorm2d or token LayerNorm with learnable scale/shift.
struct Norm {
  NormSpec spec;
  Tensor gamma;
  Tensor beta;
  // Running statistics live in tensors so checkpoints carry them.
  Tensor running_mean;
  Tensor running_var;

  Norm() = default;
  explicit Norm(const NormSpec& s) : spec(s) {
    gamma = Tensor::full({s.channels}, 1.0, true);
    beta = Tensor::zeros({s.channels}, true);
    if (s.kind == NormKind::batchnorm2d) {
      running_mean = Tensor::zeros({s.channels});
      running_var = Tensor::full({s.channels}, 1.0);
    }
  }

  Tensor operator()(const Tensor& x, Mode mode) const {
    if (spec.kind == NormKind::layernorm_tokens) return layernorm_tokens(x, spec, gamma, beta);
    RunningStats st{{running_mean.data().begin(), running_mean.data().end()},
                    {running_var.data().begin(), running_var.data().end()}};
    auto y = batchnorm2d(x, spec, gamma, beta, st, mode);
    if (mode == Mode::train) {
      auto rm = running_mean;  // handles share storage
      auto rv = running_var;
      std::copy(st.mean.begin(), st.mean.end(), rm.mutable_data().begin());
      std::copy(st.var.begin(), st.var.end(), rv.mutable_data().begin());
    }
    return y;
  }

  std::int64_t param_count() const { return 2 * spec.channels; }

  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".weight", gamma});
    out.push_back({prefix + ".bias", beta});
    if (spec.kind == NormKind::batchnorm2d) {
      out.push_back({prefix + ".running_mean", running_mean, false});
      out.push_back({prefix + ".running_var", running_var, false});
    }
  }
};

struct Linear {
  Tensor weight;
  Tensor bias;

  Linear() = default;
  Linear(std::int64_t in, std::int64_t out, std::mt19937_64& rng)
      : weight(trunc_normal({out, in}, rng)), bias(Tensor::zeros({out}, true)) {}
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

inline std::int64_t count_learnable(const ParamList& ps) {
  std::int64_t n = 0;
  for (const auto& p : ps)
    if (p.learnable) n += p.tensor.numel();
  return n;
}

}  // namespace emo
