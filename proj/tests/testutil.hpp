// Copyright 2026 the strl authors.
// Licensed under the Apache License, Version 2.0.

#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "core/common.hpp"
#include "core/tensor.hpp"

namespace strl::test {

inline std::vector<double> random_values(Rng& rng, size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

inline TensorD random_tensor(Rng& rng, const Shape& shape, double lo = -1.0, double hi = 1.0,
                             bool requires_grad = true) {
  TensorD t = TensorD::from_data(shape, random_values(rng, numel(shape), lo, hi));
  t.set_requires_grad(requires_grad);
  return t;
}

// Central finite differences against the analytic gradient, 64-bit.
// `forward` must rebuild the graph from scratch each call (the perturbed
// tensor is reused as a leaf). Returns the worst relative error, where each
// element error is |a - n| / max(|a| + |n|, scale_floor).
struct GradCheckResult {
  double max_rel_err = 0.0;
  size_t checked = 0;
};

inline GradCheckResult finite_difference_check(
    const std::function<TensorD()>& forward, std::vector<TensorD> leaves, double h = 1e-4,
    double scale_floor = 1e-3) {
  // analytic pass
  for (auto& l : leaves) l.zero_grad();
  TensorD loss = forward();
  loss.backward();
  std::vector<std::vector<double>> analytic;
  for (auto& l : leaves) {
    analytic.emplace_back(l.grad_vec().empty() ? std::vector<double>(l.size(), 0.0)
                                               : l.grad_vec());
  }

  GradCheckResult r;
  for (size_t li = 0; li < leaves.size(); ++li) {
    TensorD& leaf = leaves[li];
    for (size_t i = 0; i < leaf.size(); ++i) {
      const double saved = leaf.data()[i];
      leaf.data()[i] = saved + h;
      const double up = forward().item();
      leaf.data()[i] = saved - h;
      const double dn = forward().item();
      leaf.data()[i] = saved;
      const double numeric = (up - dn) / (2.0 * h);
      const double a = analytic[li][i];
      const double err = std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric),
                                                          scale_floor);
      if (err > r.max_rel_err) r.max_rel_err = err;
      ++r.checked;
    }
  }
  return r;
}

// Scoped temporary directory under the system temp path.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("strl_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::string str() const { return path_.string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace strl::test
