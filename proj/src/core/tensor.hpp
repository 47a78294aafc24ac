// Copyright 2026 the strl authors.
// Licensed under the Apache License, Version 2.0.

#pragma once

#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "core/common.hpp"

namespace strl {

using Shape = std::vector<int>;

inline size_t numel(const Shape& s) {
  size_t n = 1;
  for (int e : s) n *= static_cast<size_t>(e);
  return n;
}

std::string shape_str(const Shape& s);

// One vertex of the recorded computation graph. The backward closure owns no
// shared_ptr to its own node (the node owns the closure); parents are kept
// alive through the parents vector.
template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated on first use, same length as data
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void()> backward_fn;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

// Whether newly created ops record backward closures. Saved/restored by
// NoGradGuard; inference paths disable recording for speed.
bool autograd_enabled();

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  bool prev;
};

// Value-semantics handle to a graph node. Copies alias the same storage.
template <class T>
class TensorT {
 public:
  TensorT() = default;
  explicit TensorT(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

  static TensorT zeros(const Shape& shape, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = shape;
    n->data.assign(numel(shape), T(0));
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT full(const Shape& shape, T value) {
    TensorT t = zeros(shape);
    for (auto& v : t.node_->data) v = value;
    return t;
  }

  static TensorT from_data(const Shape& shape, std::vector<T> values) {
    if (values.size() != numel(shape))
      throw InvalidArgument("tensor: " + std::to_string(values.size()) +
                            " values do not fill shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = shape;
    n->data = std::move(values);
    return TensorT(std::move(n));
  }

  static TensorT scalar(T v) { return from_data({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  size_t size() const { return node_->data.size(); }

  T* data() { return node_->data.data(); }
  const T* data() const { return node_->data.data(); }
  std::vector<T>& vec() { return node_->data; }
  const std::vector<T>& vec() const { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }

  T* grad() {
    node_->ensure_grad();
    return node_->grad.data();
  }
  const std::vector<T>& grad_vec() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  T item() const {
    if (size() != 1) throw InvalidArgument("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  // Reverse-mode sweep from a scalar. Gradients accumulate into the grad
  // buffers of every reachable requires-grad node.
  void backward() const;

  std::shared_ptr<TensorNode<T>> node() const { return node_; }
  TensorNode<T>* raw() const { return node_.get(); }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

}  // namespace strl
