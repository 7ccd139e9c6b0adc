#pragma once

// Differentiable tensor operations.

#include <cmath>
#include <memory>
#include <numbers>

#include "emo/tensor.hpp"

namespace emo {

namespace detail {

// Maps each flat index of `out` to the flat index of `b` under right-aligned
// broadcasting (b's extents equal out's or are 1).
struct BroadcastMap {
  bool same = false;
  bool scalar = false;
  Shape out;
  std::vector<std::int64_t> b_strides;  // per out axis, 0 where broadcast

  BroadcastMap(const Shape& a, const Shape& b) : out(a) {
    if (a == b) {
      same = true;
      return;
    }
    if (numel_of(b) == 1) {
      scalar = true;
      return;
    }
    if (b.size() > a.size()) throw ShapeError("cannot broadcast " + to_string(b) + " to " + to_string(a));
    b_strides.assign(a.size(), 0);
    std::int64_t stride = 1;
    for (std::size_t i = 0; i < b.size(); ++i) {
      std::size_t bi = b.size() - 1 - i;
      std::size_t ai = a.size() - 1 - i;
      if (b[bi] == a[ai]) {
        b_strides[ai] = stride;
      } else if (b[bi] != 1) {
        throw ShapeError("cannot broadcast " + to_string(b) + " to " + to_string(a));
      }
      stride *= b[bi];
    }
  }

  template <class F>
  void for_each(F&& f) const {
    const std::int64_t n = numel_of(out);
    if (same) {
      for (std::int64_t i = 0; i < n; ++i) f(i, i);
      return;
    }
    if (scalar) {
      for (std::int64_t i = 0; i < n; ++i) f(i, 0);
      return;
    }
    std::vector<std::int64_t> idx(out.size(), 0);
    std::int64_t bpos = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      f(i, bpos);
      for (std::size_t ax = out.size(); ax-- > 0;) {
        ++idx[ax];
        bpos += b_strides[ax];
        if (idx[ax] < out[ax]) break;
        bpos -= b_strides[ax] * idx[ax];
        idx[ax] = 0;
      }
    }
  }
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace detail

// --- elementwise -----------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::BroadcastMap bm(a.shape(), b.shape());
  std::vector<double> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  bm.for_each([&](std::int64_t i, std::int64_t j) { out[i] = ad[i] + bd[j]; });
  return detail::make_result(a.shape(), std::move(out), {a, b}, "add",
                             [bm](std::span<const double> g, std::vector<double*>& gin) {
                               if (gin[0])
                                 for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                               if (gin[1]) bm.for_each([&](std::int64_t i, std::int64_t j) { gin[1][j] += g[i]; });
                             });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::BroadcastMap bm(a.shape(), b.shape());
  std::vector<double> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  bm.for_each([&](std::int64_t i, std::int64_t j) { out[i] = ad[i] - bd[j]; });
  return detail::make_result(a.shape(), std::move(out), {a, b}, "sub",
                             [bm](std::span<const double> g, std::vector<double*>& gin) {
                               if (gin[0])
                                 for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                               if (gin[1]) bm.for_each([&](std::int64_t i, std::int64_t j) { gin[1][j] -= g[i]; });
                             });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::BroadcastMap bm(a.shape(), b.shape());
  std::vector<double> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  bm.for_each([&](std::int64_t i, std::int64_t j) { out[i] = ad[i] * bd[j]; });
  auto ai = a.impl();
  auto bi = b.impl();
  return detail::make_result(a.shape(), std::move(out), {a, b}, "mul",
                             [bm, ai, bi](std::span<const double> g, std::vector<double*>& gin) {
                               const auto& ad = ai->data;
                               const auto& bd = bi->data;
                               bm.for_each([&](std::int64_t i, std::int64_t j) {
                                 if (gin[0]) gin[0][i] += g[i] * bd[j];
                                 if (gin[1]) gin[1][j] += g[i] * ad[i];
                               });
                             });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  return detail::make_result(a.shape(), std::move(out), {a}, "scale",
                             [s](std::span<const double> g, std::vector<double*>& gin) {
                               for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += s * g[i];
                             });
}

inline Tensor silu(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * detail::sigmoid(ad[i]);
  auto ai = a.impl();
  return detail::make_result(a.shape(), std::move(out), {a}, "silu",
                             [ai](std::span<const double> g, std::vector<double*>& gin) {
                               const auto& x = ai->data;
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 double s = detail::sigmoid(x[i]);
                                 gin[0][i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
                               }
                             });
}

/// Exact (erf) GELU.
inline Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * ad[i] * (1.0 + std::erf(ad[i] * std::numbers::sqrt2 / 2));
  auto ai = a.impl();
  return detail::make_result(a.shape(), std::move(out), {a}, "gelu",
                             [ai](std::span<const double> g, std::vector<double*>& gin) {
                               const auto& x = ai->data;
                               const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 double cdf = 0.5 * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2));
                                 double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
                                 gin[0][i] += g[i] * (cdf + x[i] * pdf);
                               }
                             });
}

enum class Activation { identity, silu, gelu };

inline Tensor activate(const Tensor& x, Activation a) {
  switch (a) {
    case Activation::silu: return silu(x);
    case Activation::gelu: return gelu(x);
    case Activation::identity: break;
  }
  return x;
}

inline const char* name_of(Activation a) {
  switch (a) {
    case Activation::silu: return "silu";
    case Activation::gelu: return "gelu";
    case Activation::identity: break;
  }
  return "identity";
}

// --- reductions -------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  const auto n = a.numel();
  return detail::make_result({1}, {s}, {a}, "sum", [n](std::span<const double> g, std::vector<double*>& gin) {
    for (std::int64_t i = 0; i < n; ++i) gin[0][i] += g[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

inline Tensor square(const Tensor& a) { return mul(a, a); }

// --- softmax ----------------------------------------------------------------

namespace detail {
struct AxisSplit {
  std::int64_t outer = 1, len = 1, inner = 1;
};
inline AxisSplit split_axis(const Shape& s, int axis) {
  const int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis out of range for shape " + to_string(s));
  AxisSplit sp;
  for (int i = 0; i < axis; ++i) sp.outer *= s[i];
  sp.len = s[axis];
  for (int i = axis + 1; i < r; ++i) sp.inner *= s[i];
  return sp;
}
}  // namespace detail

/// Numerically stable softmax along `axis` (negative counts from the end).
inline Tensor softmax(const Tensor& a, int axis = -1) {
  auto sp = detail::split_axis(a.shape(), axis);
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t in = 0; in < sp.inner; ++in) {
      const std::int64_t base = o * sp.len * sp.inner + in;
      double mx = x[base];
      for (std::int64_t j = 1; j < sp.len; ++j) mx = std::max(mx, x[base + j * sp.inner]);
      double z = 0.0;
      for (std::int64_t j = 0; j < sp.len; ++j) {
        double e = std::exp(x[base + j * sp.inner] - mx);
        out[base + j * sp.inner] = e;
        z += e;
      }
      for (std::int64_t j = 0; j < sp.len; ++j) out[base + j * sp.inner] /= z;
    }
  }
  if (auto* t = detail::tracer()) t->softmax_elems += a.numel();
  auto result = detail::make_result(a.shape(), std::move(out), {a}, "softmax", nullptr);
  if (result.is_leaf()) return result;
  std::weak_ptr<TensorImpl> self = result.impl();
  result.impl()->node->backward = [sp, self](std::span<const double> g, std::vector<double*>& gin) {
    auto y = self.lock();
    const auto& yd = y->data;
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      for (std::int64_t in = 0; in < sp.inner; ++in) {
        const std::int64_t base = o * sp.len * sp.inner + in;
        double dot = 0.0;
        for (std::int64_t j = 0; j < sp.len; ++j) dot += g[base + j * sp.inner] * yd[base + j * sp.inner];
        for (std::int64_t j = 0; j < sp.len; ++j) {
          auto k = base + j * sp.inner;
          gin[0][k] += yd[k] * (g[k] - dot);
        }
      }
    }
  };
  return result;
}

// --- matmul -----------------------------------------------------------------

/// [B,M,K] x [B,K,N] -> [B,M,N].
inline Tensor matmul_batched(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3) throw ShapeError("matmul_batched expects rank-3 operands");
  const auto B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
  if (b.dim(0) != B || b.dim(1) != K)
    throw ShapeError("matmul_batched: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  std::vector<double> out(B * M * N, 0.0);
  auto ad = a.data();
  auto bd = b.data();
  for (std::int64_t i = 0; i < B; ++i)
    kernel::gemm_nn(M, N, K, ad.data() + i * M * K, bd.data() + i * K * N, out.data() + i * M * N);
  if (auto* t = detail::tracer()) t->attn_macs += B * M * N * K;
  auto ai = a.impl();
  auto bi = b.impl();
  return detail::make_result({B, M, N}, std::move(out), {a, b}, "matmul_batched",
                             [=](std::span<const double> g, std::vector<double*>& gin) {
                               for (std::int64_t i = 0; i < B; ++i) {
                                 const double* gi = g.data() + i * M * N;
                                 if (gin[0])  // dA = dY B^T
                                   kernel::gemm_nt(M, K, N, gi, bi->data.data() + i * K * N, gin[0] + i * M * K);
                                 if (gin[1])  // dB = A^T dY
                                   kernel::gemm_tn(K, N, M, ai->data.data() + i * M * K, gi, gin[1] + i * K * N);
                               }
                             });
}

// --- layout -----------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape s) {
  if (numel_of(s) != a.numel())
    throw ShapeError("reshape " + to_string(a.shape()) + " -> " + to_string(s) + " changes element count");
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::make_result(std::move(s), std::move(out), {a}, "reshape",
                             [](std::span<const double> g, std::vector<double*>& gin) {
                               for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                             });
}

namespace detail {
// For each output flat index, the input flat index under axis permutation.
inline std::vector<std::int64_t> permute_index(const Shape& in, const std::vector<int>& perm) {
  const std::size_t r = in.size();
  if (perm.size() != r) throw ShapeError("permutation rank mismatch");
  std::vector<bool> used(r, false);
  for (int p : perm) {
    if (p < 0 || static_cast<std::size_t>(p) >= r || used[p]) throw ShapeError("invalid axis permutation");
    used[p] = true;
  }
  std::vector<std::int64_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  Shape out(r);
  std::vector<std::int64_t> step(r);
  for (std::size_t i = 0; i < r; ++i) {
    out[i] = in[perm[i]];
    step[i] = in_strides[perm[i]];
  }
  const auto n = numel_of(in);
  std::vector<std::int64_t> map(n);
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t pos = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    map[i] = pos;
    for (std::size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      pos += step[ax];
      if (idx[ax] < out[ax]) break;
      pos -= step[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
  return map;
}
}  // namespace detail

/// Gathers `a` through an index map: out[i] = a[index[i]], or 0 where index[i] < 0.
/// Backward scatters-adds into the sources.
inline Tensor gather(const Tensor& a, std::shared_ptr<const std::vector<std::int64_t>> index, Shape out_shape) {
  if (static_cast<std::int64_t>(index->size()) != numel_of(out_shape))
    throw ShapeError("gather: index map size does not match output shape " + to_string(out_shape));
  auto ad = a.data();
  std::vector<double> out(index->size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto src = (*index)[i];
    if (src >= a.numel()) throw ShapeError("gather: index out of range");
    out[i] = src < 0 ? 0.0 : ad[src];
  }
  return detail::make_result(std::move(out_shape), std::move(out), {a}, "gather",
                             [index](std::span<const double> g, std::vector<double*>& gin) {
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 if ((*index)[i] >= 0) gin[0][(*index)[i]] += g[i];
                             });
}

inline Tensor permute(const Tensor& a, const std::vector<int>& perm) {
  Shape out(a.rank());
  auto map = std::make_shared<const std::vector<std::int64_t>>(detail::permute_index(a.shape(), perm));
  for (std::size_t i = 0; i < a.rank(); ++i) out[i] = a.dim(perm[i]);
  return gather(a, std::move(map), std::move(out));
}

/// Swaps the last two axes.
inline Tensor transpose_last(const Tensor& a) {
  std::vector<int> perm(a.rank());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(a, perm);
}

/// Channel slice [begin, end) of an NCHW-like tensor (axis 1).
inline Tensor slice_channels(const Tensor& a, std::int64_t begin, std::int64_t end) {
  if (a.rank() < 2 || begin < 0 || end > a.dim(1) || begin >= end) throw ShapeError("slice_channels: bad range");
  Shape out = a.shape();
  out[1] = end - begin;
  std::int64_t inner = 1;
  for (std::size_t i = 2; i < a.rank(); ++i) inner *= a.dim(i);
  auto map = std::make_shared<std::vector<std::int64_t>>();
  map->reserve(numel_of(out));
  for (std::int64_t n = 0; n < a.dim(0); ++n)
    for (std::int64_t c = begin; c < end; ++c)
      for (std::int64_t i = 0; i < inner; ++i) map->push_back((n * a.dim(1) + c) * inner + i);
  return gather(a, std::move(map), std::move(out));
}

/// Concatenation along axis 1.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || a.rank() < 2 || a.dim(0) != b.dim(0)) throw ShapeError("concat_channels: rank/batch mismatch");
  for (std::size_t i = 2; i < a.rank(); ++i)
    if (a.dim(i) != b.dim(i)) throw ShapeError("concat_channels: spatial mismatch");
  std::int64_t inner = 1;
  for (std::size_t i = 2; i < a.rank(); ++i) inner *= a.dim(i);
  const auto N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
  Shape out = a.shape();
  out[1] = Ca + Cb;
  std::vector<double> d;
  d.reserve(numel_of(out));
  for (std::int64_t n = 0; n < N; ++n) {
    d.insert(d.end(), a.data().begin() + n * Ca * inner, a.data().begin() + (n + 1) * Ca * inner);
    d.insert(d.end(), b.data().begin() + n * Cb * inner, b.data().begin() + (n + 1) * Cb * inner);
  }
  return detail::make_result(std::move(out), std::move(d), {a, b}, "concat_channels",
                             [=](std::span<const double> g, std::vector<double*>& gin) {
                               for (std::int64_t n = 0; n < N; ++n) {
                                 const double* src = g.data() + n * (Ca + Cb) * inner;
                                 if (gin[0])
                                   for (std::int64_t i = 0; i < Ca * inner; ++i) gin[0][n * Ca * inner + i] += src[i];
                                 if (gin[1])
                                   for (std::int64_t i = 0; i < Cb * inner; ++i)
                                     gin[1][n * Cb * inner + i] += src[Ca * inner + i];
                               }
                             });
}

// --- losses -----------------------------------------------------------------

/// Mean cross-entropy of logits [N,K] against integer labels.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != static_cast<std::int64_t>(labels.size()))
    throw ShapeError("cross_entropy: logits " + to_string(logits.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  const auto N = logits.dim(0), K = logits.dim(1);
  auto x = logits.data();
  auto probs = std::make_shared<std::vector<double>>(N * K);
  double loss = 0.0;
  for (std::int64_t n = 0; n < N; ++n) {
    if (labels[n] < 0 || labels[n] >= K) throw ShapeError("cross_entropy: label out of range");
    const double* row = x.data() + n * K;
    double mx = *std::max_element(row, row + K);
    double z = 0.0;
    for (std::int64_t k = 0; k < K; ++k) z += std::exp(row[k] - mx);
    for (std::int64_t k = 0; k < K; ++k) (*probs)[n * K + k] = std::exp(row[k] - mx) / z;
    loss += -(row[labels[n]] - mx - std::log(z));
  }
  loss /= static_cast<double>(N);
  return detail::make_result({1}, {loss}, {logits}, "cross_entropy",
                             [=](std::span<const double> g, std::vector<double*>& gin) {
                               for (std::int64_t n = 0; n < N; ++n)
                                 for (std::int64_t k = 0; k < K; ++k) {
                                   double d = (*probs)[n * K + k] - (k == labels[n] ? 1.0 : 0.0);
                                   gin[0][n * K + k] += g[0] * d / static_cast<double>(N);
                                 }
                             });
}

}  // namespace emo
