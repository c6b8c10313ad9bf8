#pragma once

// Minimal reverse-mode autodiff tensor used by the whole network.
// Dense double storage, NCHW layout for 4-D tensors, dynamic tape.

#include <cassert>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace bsnet {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

struct TensorImpl;

// Global (thread-local) switch: when off, ops do not record the tape.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // sized lazily, same numel as data
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  // Propagates this node's grad into its parents' grads.
  std::function<void(TensorImpl&)> backward_fn;

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data.assign(static_cast<size_t>(shape_numel(impl->shape)), 0.0);
    return Tensor(impl);
  }
  static Tensor full(Shape shape, double v) {
    Tensor t = zeros(std::move(shape));
    for (auto& x : t.impl_->data) x = v;
    return t;
  }
  static Tensor scalar(double v) { return full({1}, v); }
  static Tensor from(Shape shape, std::vector<double> data) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      throw std::invalid_argument("Tensor::from: size mismatch for shape " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    return Tensor(impl);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t ndim() const { return static_cast<int64_t>(impl_->shape.size()); }
  int64_t numel() const { return impl_->numel(); }
  double* data() { return impl_->data.data(); }
  const double* data() const { return impl_->data.data(); }
  std::vector<double>& vec() { return impl_->data; }
  const std::vector<double>& vec() const { return impl_->data; }
  double item() const {
    if (numel() != 1) throw std::logic_error("item() on non-scalar tensor");
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    impl_->requires_grad = b;
    return *this;
  }
  std::vector<double>& grad() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }
  // Drops tape history; keeps values (used after an optimizer step).
  void detach_() {
    impl_->parents.clear();
    impl_->backward_fn = nullptr;
  }
  Tensor detach() const {
    Tensor t = Tensor::from(impl_->shape, impl_->data);
    return t;
  }

  std::shared_ptr<TensorImpl> impl() const { return impl_; }

  // Reverse sweep from this (scalar) tensor. Accumulates into .grad()
  // of every reachable tensor with requires_grad set.
  void backward() const {
    if (numel() != 1) throw std::logic_error("backward() expects a scalar loss");
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> seen;
    // iterative post-order DFS
    std::vector<std::pair<TensorImpl*, size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    seen.insert(impl_.get());
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        TensorImpl* p = node->parents[idx].get();
        ++idx;
        if (seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    impl_->ensure_grad();
    impl_->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TensorImpl* node = *it;
      if (node->backward_fn) {
        node->ensure_grad();
        node->backward_fn(*node);
      }
    }
  }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Helper for op authors: build a result node recording the tape when needed.
inline Tensor make_result(Shape shape, std::vector<double> data,
                          std::vector<Tensor> inputs,
                          std::function<void(TensorImpl&)> backward_fn) {
  Tensor out = Tensor::from(std::move(shape), std::move(data));
  bool need = false;
  if (grad_mode()) {
    for (const auto& t : inputs)
      if (t.requires_grad()) need = true;
  }
  if (need) {
    out.set_requires_grad(true);
    auto impl = out.impl();
    for (auto& t : inputs) impl->parents.push_back(t.impl());
    impl->backward_fn = std::move(backward_fn);
  }
  return out;
}

}  // namespace bsnet
