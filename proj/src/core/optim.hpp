// Copyright 2026 the strl authors.
// Licensed under the Apache License, Version 2.0.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "core/tensor.hpp"

namespace strl {

// Adaptive-moment optimizer. Parameters are registered once, in a fixed
// order; step() consumes the grad buffers and throws NumericError naming the
// parameter if a gradient is non-finite.
template <class T>
class AdamT {
 public:
  struct Entry {
    std::string name;
    TensorT<T> param;
    std::vector<T> m, v;
  };

  explicit AdamT(T lr, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8))
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void register_param(const std::string& name, const TensorT<T>& param);

  void step();
  void zero_grad();

  int64_t step_count() const { return step_; }
  void set_step_count(int64_t s) { step_ = s; }
  T learning_rate() const { return lr_; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  T lr_, beta1_, beta2_, eps_;
  int64_t step_ = 0;
  std::vector<Entry> entries_;
};

using Adam = AdamT<float>;

}  // namespace strl
