#pragma once

// Central-difference gradient checking against the tape.

#include <algorithm>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "emo/ops.hpp"

namespace emo {

struct GradCheckOptions {
  double eps = 1e-6;
  /// Elements probed per input; all of them when <= 0 or when the input is smaller.
  std::int64_t max_probes = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_error = 0.0;  // max |analytic - numeric| / max(1, |numeric|)
  std::string worst;       // "input i, element j"
  std::int64_t probes = 0;
};

/// Checks d(sum(f() * R))/d(inputs) for a fixed random projection R. `f` must
/// be deterministic and read the inputs' current values.
inline GradCheckResult gradcheck(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                                 const GradCheckOptions& opt = {}) {
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);

  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  auto out = f();
  std::vector<double> r(static_cast<std::size_t>(out.numel()));
  for (auto& v : r) v = uni(rng);
  const Tensor R(out.shape(), r);
  backward(sum(mul(out, R)));

  auto probe = [&]() {
    NoGradGuard ng;
    auto o = f();
    double s = 0.0;
    for (std::int64_t i = 0; i < o.numel(); ++i) s += o[i] * r[static_cast<std::size_t>(i)];
    return s;
  };

  GradCheckResult res;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& t = inputs[ti];
    const auto analytic = t.grad_tensor();
    std::vector<std::int64_t> idx(static_cast<std::size_t>(t.numel()));
    for (std::int64_t i = 0; i < t.numel(); ++i) idx[static_cast<std::size_t>(i)] = i;
    if (opt.max_probes > 0 && t.numel() > opt.max_probes) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(static_cast<std::size_t>(opt.max_probes));
    }
    auto data = t.mutable_data();
    for (auto i : idx) {
      const double orig = data[static_cast<std::size_t>(i)];
      data[static_cast<std::size_t>(i)] = orig + opt.eps;
      const double fp = probe();
      data[static_cast<std::size_t>(i)] = orig - opt.eps;
      const double fm = probe();
      data[static_cast<std::size_t>(i)] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.eps);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
      ++res.probes;
      if (err > res.max_error || res.worst.empty()) {
        res.max_error = std::max(res.max_error, err);
        res.worst = "input " + std::to_string(ti) + ", element " + std::to_string(i);
      }
    }
  }
  return res;
}

}  // namespace emo
