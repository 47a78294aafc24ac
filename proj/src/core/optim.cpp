// Copyright 2026 the strl authors.
// Licensed under the Apache License, Version 2.0.

#include "core/optim.hpp"

#include <cmath>

namespace strl {

template <class T>
void AdamT<T>::register_param(const std::string& name, const TensorT<T>& param) {
  for (const auto& e : entries_)
    if (e.name == name) throw InvalidArgument("adam: duplicate parameter " + name);
  Entry e;
  e.name = name;
  e.param = param;
  e.m.assign(param.size(), T(0));
  e.v.assign(param.size(), T(0));
  entries_.push_back(std::move(e));
}

template <class T>
void AdamT<T>::step() {
  ++step_;
  const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(step_));
  const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(step_));
  for (auto& e : entries_) {
    if (!e.param.has_grad()) continue;  // no gradient reached this parameter
    const std::vector<T>& g = e.param.grad_vec();
    T* p = e.param.data();
    for (size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i]))
        throw NumericError("adam: non-finite gradient for parameter " + e.name);
      e.m[i] = beta1_ * e.m[i] + (T(1) - beta1_) * g[i];
      e.v[i] = beta2_ * e.v[i] + (T(1) - beta2_) * g[i] * g[i];
      const T mhat = e.m[i] / bc1;
      const T vhat = e.v[i] / bc2;
      p[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

template <class T>
void AdamT<T>::zero_grad() {
  for (auto& e : entries_) e.param.zero_grad();
}

template class AdamT<float>;
template class AdamT<double>;

}  // namespace strl
