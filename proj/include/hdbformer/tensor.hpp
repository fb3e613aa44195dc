#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hdbformer/errors.hpp"

namespace hdbf {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool& finite_check_mode() {
  thread_local bool enabled = false;
  return enabled;
}

inline std::vector<std::string>& name_stack() {
  thread_local std::vector<std::string> stack;
  return stack;
}

}  // namespace detail

/// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// While alive, every op validates its output and throws NumericError on
/// NaN/Inf, naming the op and the innermost NameScope.
class FiniteCheckGuard {
 public:
  FiniteCheckGuard() : prev_(detail::finite_check_mode()) {
    detail::finite_check_mode() = true;
  }
  ~FiniteCheckGuard() { detail::finite_check_mode() = prev_; }
  FiniteCheckGuard(const FiniteCheckGuard&) = delete;
  FiniteCheckGuard& operator=(const FiniteCheckGuard&) = delete;

 private:
  bool prev_;
};

/// Hierarchical module name used in diagnostics ("miim.stage3.iter1.gfa1").
class NameScope {
 public:
  explicit NameScope(std::string name) {
    detail::name_stack().push_back(std::move(name));
  }
  ~NameScope() { detail::name_stack().pop_back(); }
  NameScope(const NameScope&) = delete;
  NameScope& operator=(const NameScope&) = delete;

  static std::string current() {
    const auto& s = detail::name_stack();
    if (s.empty()) return "<root>";
    std::string path = s.front();
    for (std::size_t i = 1; i < s.size(); ++i) path += "." + s[i];
    return path;
  }
};

/// Multiply-accumulate counts per op kind, filled by kernels while a
/// CountingScope is active.
struct OpCounter {
  std::map<std::string, std::uint64_t> macs;

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (const auto& [k, v] : macs) t += v;
    return t;
  }
  std::uint64_t get(const std::string& kind) const {
    auto it = macs.find(kind);
    return it == macs.end() ? 0 : it->second;
  }
};

namespace detail {

inline OpCounter*& active_counter() {
  thread_local OpCounter* counter = nullptr;
  return counter;
}

inline void count_macs(const char* kind, std::uint64_t n) {
  if (auto* c = active_counter()) c->macs[kind] += n;
}

}  // namespace detail

class CountingScope {
 public:
  explicit CountingScope(OpCounter& counter) : prev_(detail::active_counter()) {
    detail::active_counter() = &counter;
  }
  ~CountingScope() { detail::active_counter() = prev_; }
  CountingScope(const CountingScope&) = delete;
  CountingScope& operator=(const CountingScope&) = delete;

 private:
  OpCounter* prev_;
};

template <typename T>
struct TensorImpl;

/// One recorded operation. `backward` receives the forward output values,
/// the upstream gradient and one accumulation buffer per input (nullptr
/// when that input does not need a gradient).
template <typename T>
struct GradNode {
  using BackwardFn = std::function<void(const std::vector<T>& out,
                                        std::span<const T> grad_out,
                                        std::span<std::vector<T>* const> grad_in)>;
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  BackwardFn backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::shared_ptr<GradNode<T>> node;
};

/// Dense row-major tensor handle. Copies share storage and graph history;
/// use detach() for an independent value.
template <typename T = float>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl<T>>()) {
    impl_->data.assign(numel_of(shape), fill);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl<T>>()) {
    if (numel_of(shape) != values.size()) {
      throw ShapeError("tensor shape " + to_string(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
    impl_->requires_grad = requires_grad;
  }

  static Tensor scalar(T value) { return Tensor(Shape{1}, value); }

  static Tensor from_impl(std::shared_ptr<TensorImpl<T>> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  const std::vector<T>& values() const { return impl_->data; }

  T& operator[](std::size_t i) { return impl_->data[i]; }
  T operator[](std::size_t i) const { return impl_->data[i]; }

  T item() const {
    if (numel() != 1) {
      throw ContractError("item() on non-scalar tensor " + to_string(shape()));
    }
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }

  bool is_leaf() const { return impl_->node == nullptr; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() { return impl_->grad; }

  /// Gradient as a detached tensor (zeros when nothing accumulated yet).
  Tensor grad_tensor() const {
    if (impl_->grad.empty()) return Tensor(shape());
    return Tensor(shape(), impl_->grad);
  }

  void zero_grad() {
    std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }

  Tensor detach() const { return Tensor(shape(), impl_->data); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(impl_->data.begin(), impl_->data.end());
    return Tensor<U>(shape(), std::move(out));
  }

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

template <typename T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(),
                     [](T v) { return std::isfinite(v); });
}

namespace detail {

/// Wraps a freshly computed buffer as an op output and, when any input
/// requires a gradient, attaches the backward rule.
template <typename T, typename Backward>
Tensor<T> record(const char* op, Shape shape, std::vector<T> data,
                 const std::vector<Tensor<T>>& inputs, Backward&& backward) {
  if (finite_check_mode() && !all_finite<T>(data)) {
    throw NumericError(std::string("non-finite output of ") + op + " " +
                       to_string(shape) + " in " + NameScope::current());
  }
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool needs_grad = false;
  if (grad_mode()) {
    for (const auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
  }
  if (needs_grad) {
    auto node = std::make_shared<GradNode<T>>();
    node->op = op;
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.impl());
    node->backward = std::forward<Backward>(backward);
    impl->requires_grad = true;
    impl->node = std::move(node);
  }
  return Tensor<T>::from_impl(std::move(impl));
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls; intermediate gradients live only for the duration of the sweep.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? to_string(loss.shape()) : "<undefined>"));
  }
  auto* root = loss.impl().get();
  if (!root->requires_grad) {
    throw ContractError("backward() on a loss that does not require grad");
  }
  if (!root->node) {
    if (root->grad.empty()) root->grad.assign(1, T(0));
    root->grad[0] += T(1);
    return;
  }

  // Post-order DFS: inputs precede the ops that consume them.
  std::vector<TensorImpl<T>*> order;
  std::unordered_set<TensorImpl<T>*> visited;
  std::vector<std::pair<TensorImpl<T>*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (impl->node && next < impl->node->inputs.size()) {
      auto* child = impl->node->inputs[next++].get();
      if (child->node && child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(impl);
      stack.pop_back();
    }
  }

  std::unordered_map<TensorImpl<T>*, std::vector<T>> pending;
  pending[root] = std::vector<T>{T(1)};
  std::vector<std::vector<T>*> grad_in;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl<T>* impl = *it;
    auto found = pending.find(impl);
    if (found == pending.end()) continue;
    std::vector<T> grad_out = std::move(found->second);
    pending.erase(found);

    const auto& node = *impl->node;
    grad_in.assign(node.inputs.size(), nullptr);
    for (std::size_t j = 0; j < node.inputs.size(); ++j) {
      TensorImpl<T>* in = node.inputs[j].get();
      if (!in->requires_grad) continue;
      std::vector<T>& buf = in->node ? pending[in] : in->grad;
      if (buf.empty()) buf.assign(in->data.size(), T(0));
      grad_in[j] = &buf;
    }
    node.backward(impl->data, grad_out, grad_in);
  }
}

template <typename T>
Tensor<T> random_uniform(Shape shape, T lo, T hi, std::mt19937_64& rng,
                         bool requires_grad = false) {
  std::uniform_real_distribution<double> dist(static_cast<double>(lo),
                                              static_cast<double>(hi));
  std::vector<T> v(numel_of(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
constexpr T default_fd_eps() {
  return sizeof(T) >= sizeof(double) ? T(1e-6) : T(1e-3);
}

/// Central differences of `eval` with respect to selected entries of
/// `values`, perturbed in place and restored afterwards.
template <typename T, typename Eval>
std::vector<T> central_difference(Eval&& eval, std::span<T> values,
                                  std::span<const std::size_t> indices,
                                  T eps = default_fd_eps<T>()) {
  std::vector<T> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) {
    const T orig = values[i];
    values[i] = orig + eps;
    const T plus = static_cast<T>(eval());
    values[i] = orig - eps;
    const T minus = static_cast<T>(eval());
    values[i] = orig;
    out.push_back((plus - minus) / (T(2) * eps));
  }
  return out;
}

template <typename T>
T scalar_value(const Tensor<T>& t) {
  return t.item();
}
template <typename T>
T scalar_value(T v) {
  return v;
}

/// Finite-difference gradient of a scalar function of one tensor.
/// `f` may return either T or a one-element Tensor<T>.
template <typename T, typename F>
Tensor<T> finite_diff_grad(F&& f, const Tensor<T>& x,
                           T eps = default_fd_eps<T>()) {
  NoGradGuard no_grad;
  Tensor<T> probe = x.detach();
  std::vector<std::size_t> all(probe.numel());
  std::iota(all.begin(), all.end(), std::size_t{0});
  auto g = central_difference<T>(
      [&] { return scalar_value<T>(f(static_cast<const Tensor<T>&>(probe))); },
      probe.data(), all, eps);
  return Tensor<T>(x.shape(), std::move(g));
}

}  // namespace hdbf
