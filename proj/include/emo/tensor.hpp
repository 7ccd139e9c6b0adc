#pragma once

// Dense row-major tensor with tape-based reverse-mode autodiff.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace emo {

using Shape = std::vector<std::int64_t>;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) {
    if (d <= 0) throw ShapeError("non-positive extent in shape " + to_string(s));
    n *= d;
  }
  return n;
}

namespace detail {

// Process-wide switches. Set before spawning threads.
struct Flags {
  bool check_finite = false;
};
inline Flags& flags() {
  static Flags f;
  return f;
}

inline thread_local bool grad_enabled = true;

inline std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

}  // namespace detail

/// Enables NaN/Inf rejection at tensor creation and after every op.
inline void set_debug_finite_checks(bool on) { detail::flags().check_finite = on; }
inline bool debug_finite_checks() { return detail::flags().check_finite; }

/// RAII guard that stops graph recording on this thread.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_mode_enabled() { return detail::grad_enabled; }

// ---------------------------------------------------------------------------
// Operation tracer. Ops add their multiply-accumulate counts while a
// TraceScope is alive on the current thread.

struct OpCounts {
  std::int64_t conv_macs = 0;     // conv2d and linear
  std::int64_t attn_macs = 0;     // batched matmuls
  std::int64_t softmax_elems = 0;
  std::int64_t bias_adds = 0;

  std::int64_t macs() const { return conv_macs + attn_macs; }
  /// 2 FLOPs per MAC, 3 per softmax element, bias excluded.
  std::int64_t flops() const { return 2 * macs() + 3 * softmax_elems; }
  std::int64_t conv_flops() const { return 2 * conv_macs; }
  std::int64_t attn_flops() const { return 2 * attn_macs + 3 * softmax_elems; }
};

namespace detail {
inline thread_local OpCounts* active_counts = nullptr;
}

class TraceScope {
 public:
  TraceScope() : prev_(detail::active_counts) { detail::active_counts = &counts_; }
  ~TraceScope() { detail::active_counts = prev_; }
  TraceScope(const TraceScope&) = delete;
  TraceScope& operator=(const TraceScope&) = delete;
  const OpCounts& counts() const { return counts_; }

 private:
  OpCounts counts_;
  OpCounts* prev_;
};

namespace detail {
inline OpCounts* tracer() { return active_counts; }
}

// ---------------------------------------------------------------------------

struct TensorImpl;

/// One recorded operation. `backward` receives the output gradient and a
/// destination buffer per input (nullptr when that input needs no gradient).
struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(std::span<const double>, std::vector<double*>&)> backward;
  std::uint64_t seq = 0;
  const char* name = "";
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until populated
  bool requires_grad = false;
  std::shared_ptr<Node> node;  // null for leaves
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl>()) {
    auto n = numel_of(shape);
    if (static_cast<std::int64_t>(data.size()) != n)
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                       to_string(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
    if (debug_finite_checks()) check_finite("creation");
  }

  static Tensor zeros(const Shape& s, bool requires_grad = false) {
    return Tensor(s, std::vector<double>(numel_of(s), 0.0), requires_grad);
  }
  static Tensor full(const Shape& s, double v, bool requires_grad = false) {
    return Tensor(s, std::vector<double>(numel_of(s), v), requires_grad);
  }
  /// 0, 1, 2, ... in row-major order.
  static Tensor arange(const Shape& s) {
    std::vector<double> d(numel_of(s));
    std::iota(d.begin(), d.end(), 0.0);
    return Tensor(s, std::move(d));
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double operator[](std::int64_t i) const { return impl_->data[static_cast<std::size_t>(i)]; }
  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }
  Tensor grad_tensor() const {
    if (!has_grad()) return zeros(shape());
    return Tensor(shape(), impl_->grad);
  }

  bool is_leaf() const { return !impl_->node; }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

  /// Deep copy without graph attachment.
  Tensor detach() const { return Tensor(shape(), impl_->data); }

  void check_finite(const char* where) const {
    for (double v : impl_->data)
      if (!std::isfinite(v)) throw NumericError(std::string("non-finite value after ") + where);
  }

  static Tensor from_impl(std::shared_ptr<TensorImpl> p) {
    Tensor t;
    t.impl_ = std::move(p);
    return t;
  }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

namespace detail {

/// Builds an op result and records a graph node when any input requires grad.
template <class Backward>
Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                   const char* name, Backward&& bw) {
  Tensor out(std::move(shape), std::move(data));
  if (debug_finite_checks()) out.check_finite(name);
  if (!grad_enabled) return out;
  bool any = false;
  for (const auto& t : inputs) any = any || (t.defined() && t.requires_grad());
  if (!any) return out;
  auto node = std::make_shared<Node>();
  for (const auto& t : inputs) node->inputs.push_back(t.defined() ? t.impl() : nullptr);
  node->backward = std::forward<Backward>(bw);
  node->seq = next_seq();
  node->name = name;
  out.impl()->requires_grad = true;
  out.impl()->node = std::move(node);
  return out;
}

}  // namespace detail

/// Reverse pass over the recorded operations reachable from `loss`, visited in
/// reverse execution order. Leaf gradients accumulate across calls.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ShapeError("backward() needs a scalar loss, got " + to_string(loss.shape()));
  if (!loss.requires_grad()) throw std::invalid_argument("backward(): loss is not on the graph");

  std::vector<TensorImpl*> outputs;
  std::unordered_set<TensorImpl*> seen;
  std::vector<TensorImpl*> stack{loss.impl().get()};
  while (!stack.empty()) {
    auto* t = stack.back();
    stack.pop_back();
    if (!seen.insert(t).second) continue;
    if (!t->node) continue;
    outputs.push_back(t);
    for (auto& in : t->node->inputs)
      if (in && in->requires_grad) stack.push_back(in.get());
  }
  std::sort(outputs.begin(), outputs.end(),
            [](TensorImpl* a, TensorImpl* b) { return a->node->seq > b->node->seq; });

  std::unordered_map<TensorImpl*, std::vector<double>> interior;
  auto buffer_for = [&](TensorImpl* t) -> double* {
    if (!t->node) {
      if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
      return t->grad.data();
    }
    auto& g = interior[t];
    if (g.empty()) g.assign(t->data.size(), 0.0);
    return g.data();
  };

  if (loss.is_leaf()) {
    buffer_for(loss.impl().get())[0] += 1.0;
    return;
  }
  interior[loss.impl().get()] = {1.0};

  std::vector<double*> gin;
  for (auto* out : outputs) {
    auto it = interior.find(out);
    if (it == interior.end()) continue;
    std::vector<double> gout = std::move(it->second);
    interior.erase(it);
    gin.clear();
    for (auto& in : out->node->inputs)
      gin.push_back(in && in->requires_grad ? buffer_for(in.get()) : nullptr);
    out->node->backward(gout, gin);
  }
}

// ---------------------------------------------------------------------------
// GEMM kernels on raw row-major storage. C (+)= op(A) * op(B).

namespace kernel {

inline void gemm_nn(std::int64_t m, std::int64_t n, std::int64_t k, const double* a, const double* b,
                    double* c) {
  for (std::int64_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
inline void gemm_nt(std::int64_t m, std::int64_t n, std::int64_t k, const double* a, const double* b,
                    double* c) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::int64_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::int64_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] += s;
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
inline void gemm_tn(std::int64_t m, std::int64_t n, std::int64_t k, const double* a, const double* b,
                    double* c) {
  for (std::int64_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const double av = ap[i];
      if (av == 0.0) continue;
      double* ci = c + i * n;
      for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

}  // namespace kernel

}  // namespace emo
