// Copyright 2026 the strl authors.
// Licensed under the Apache License, Version 2.0.

#include "core/ops.hpp"

#include <algorithm>
#include <cmath>

namespace strl {

namespace {

template <class T>
void record(TensorT<T>& out, std::initializer_list<TensorT<T>> inputs, std::function<void()> fn) {
  if (!autograd_enabled()) return;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return;
  auto n = out.node();
  n->requires_grad = true;
  for (const auto& t : inputs) n->parents.push_back(t.node());
  n->backward_fn = std::move(fn);
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw InvalidArgument(msg);
}

// Valid output index range [lo,hi] such that lo*stride - pad + k stays inside
// [0, limit) for the given kernel offset k.
inline void valid_range(int limit, int out_extent, int stride, int pad, int k, int& lo, int& hi) {
  int a = pad - k;
  lo = a > 0 ? (a + stride - 1) / stride : 0;
  int b = limit - 1 + pad - k;
  hi = b >= 0 ? std::min(out_extent - 1, b / stride) : -1;
}

template <class T>
size_t plane(const TensorT<T>& t) {
  return static_cast<size_t>(t.dim(2)) * static_cast<size_t>(t.dim(3));
}

}  // namespace

// ---------------------------------------------------------------------------
// Pointwise

template <class T, class Fwd, class Bwd>
static TensorT<T> unary_op(const TensorT<T>& x, Fwd fwd, Bwd bwd) {
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  const T* xd = x.data();
  T* od = out.data();
  const size_t n = x.size();
  for (size_t i = 0; i < n; ++i) od[i] = fwd(xd[i]);
  auto* xn = x.raw();
  auto* on = out.raw();
  record(out, {x}, [xn, on, bwd]() {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < xn->data.size(); ++i)
      xn->grad[i] += bwd(xn->data[i], on->data[i]) * on->grad[i];
  });
  return out;
}

template <class T>
TensorT<T> relu(const TensorT<T>& x) {
  return unary_op(
      x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
static T stable_sigmoid(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  T e = std::exp(v);
  return e / (T(1) + e);
}

template <class T>
TensorT<T> sigmoid(const TensorT<T>& x) {
  return unary_op(
      x, [](T v) { return stable_sigmoid(v); },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
TensorT<T> tanh(const TensorT<T>& x) {
  return unary_op(
      x, [](T v) { return std::tanh(v); },
      [](T, T y) { return T(1) - y * y; });
}

template <class T>
TensorT<T> abs(const TensorT<T>& x) {
  return unary_op(
      x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <class T>
TensorT<T> log(const TensorT<T>& x) {
  for (size_t i = 0; i < x.size(); ++i)
    if (!(x.data()[i] > T(0))) throw NumericError("log: non-positive input");
  return unary_op(
      x, [](T v) { return std::log(v); },
      [](T v, T) { return T(1) / v; });
}

template <class T>
TensorT<T> scale(const TensorT<T>& x, T c) {
  return unary_op(
      x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <class T>
TensorT<T> add_const(const TensorT<T>& x, T c) {
  return unary_op(
      x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

namespace {

// Shared binary elementwise machinery with scalar broadcast on either side.
template <class T, class Fwd, class DA, class DB>
TensorT<T> binary_op(const TensorT<T>& a, const TensorT<T>& b, const char* name, Fwd fwd, DA da,
                     DB db) {
  const bool a_scalar = a.size() == 1;
  const bool b_scalar = b.size() == 1;
  if (!a_scalar && !b_scalar)
    require(a.shape() == b.shape(), std::string(name) + ": shape mismatch " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
  const Shape& out_shape = a_scalar ? b.shape() : a.shape();
  TensorT<T> out = TensorT<T>::zeros(out_shape);
  const T* ad = a.data();
  const T* bd = b.data();
  T* od = out.data();
  const size_t n = out.size();
  for (size_t i = 0; i < n; ++i) od[i] = fwd(ad[a_scalar ? 0 : i], bd[b_scalar ? 0 : i]);
  auto* an = a.raw();
  auto* bn = b.raw();
  auto* on = out.raw();
  record(out, {a, b}, [an, bn, on, a_scalar, b_scalar, da, db]() {
    const size_t n = on->data.size();
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < n; ++i) {
        T av = an->data[a_scalar ? 0 : i];
        T bv = bn->data[b_scalar ? 0 : i];
        an->grad[a_scalar ? 0 : i] += da(av, bv) * on->grad[i];
      }
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < n; ++i) {
        T av = an->data[a_scalar ? 0 : i];
        T bv = bn->data[b_scalar ? 0 : i];
        bn->grad[b_scalar ? 0 : i] += db(av, bv) * on->grad[i];
      }
    }
  });
  return out;
}

}  // namespace

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_op(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_op(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_op(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <class T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_op(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

// ---------------------------------------------------------------------------
// Convolution

template <class T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& weight, const TensorT<T>& bias,
                  int stride, int padding) {
  require(input.rank() == 4, "conv2d: input must be 4-D, got " + shape_str(input.shape()));
  require(weight.rank() == 4, "conv2d: weight must be 4-D, got " + shape_str(weight.shape()));
  const int B = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int Cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  require(weight.dim(1) == Cin, "conv2d: input has " + std::to_string(Cin) +
                                    " channels but weight " + shape_str(weight.shape()) +
                                    " expects " + std::to_string(weight.dim(1)));
  require(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel extents must be odd");
  require(stride >= 1 && padding >= 0, "conv2d: bad stride/padding");
  require(bias.rank() == 1 && bias.dim(0) == Cout,
          "conv2d: bias must have shape [" + std::to_string(Cout) + "]");
  const int Ho = (H + 2 * padding - kh) / stride + 1;
  const int Wo = (W + 2 * padding - kw) / stride + 1;
  require(Ho >= 1 && Wo >= 1, "conv2d: output would be empty for input " + shape_str(input.shape()));

  TensorT<T> out = TensorT<T>::zeros({B, Cout, Ho, Wo});
  const T* xd = input.data();
  const T* wd = weight.data();
  const T* bd = bias.data();
  T* yd = out.data();
  const size_t xplane = static_cast<size_t>(H) * W;
  const size_t yplane = static_cast<size_t>(Ho) * Wo;
  const bool heavy = static_cast<long long>(B) * Cout * Cin * Ho * Wo * kh * kw > (1 << 18);

#pragma omp parallel for collapse(2) if (heavy)
  for (int b = 0; b < B; ++b) {
    for (int co = 0; co < Cout; ++co) {
      T* yp = yd + (static_cast<size_t>(b) * Cout + co) * yplane;
      std::fill(yp, yp + yplane, bd[co]);
      for (int ci = 0; ci < Cin; ++ci) {
        const T* xp = xd + (static_cast<size_t>(b) * Cin + ci) * xplane;
        const T* wrow = wd + ((static_cast<size_t>(co) * Cin + ci) * kh) * kw;
        for (int i = 0; i < kh; ++i) {
          for (int j = 0; j < kw; ++j) {
            const T wv = wrow[i * kw + j];
            int oh_lo, oh_hi, ow_lo, ow_hi;
            valid_range(H, Ho, stride, padding, i, oh_lo, oh_hi);
            valid_range(W, Wo, stride, padding, j, ow_lo, ow_hi);
            for (int oh = oh_lo; oh <= oh_hi; ++oh) {
              const int ih = oh * stride - padding + i;
              const T* xr = xp + static_cast<size_t>(ih) * W - padding + j;
              T* yr = yp + static_cast<size_t>(oh) * Wo;
              if (stride == 1) {
                for (int ow = ow_lo; ow <= ow_hi; ++ow) yr[ow] += wv * xr[ow];
              } else {
                for (int ow = ow_lo; ow <= ow_hi; ++ow) yr[ow] += wv * xr[ow * stride];
              }
            }
          }
        }
      }
    }
  }

  auto* xn = input.raw();
  auto* wn = weight.raw();
  auto* bn = bias.raw();
  auto* on = out.raw();
  record(out, {input, weight, bias}, [=]() {
    const T* gy = on->grad.data();
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int b = 0; b < B; ++b)
        for (int co = 0; co < Cout; ++co) {
          const T* gp = gy + (static_cast<size_t>(b) * Cout + co) * yplane;
          T s = T(0);
          for (size_t p = 0; p < yplane; ++p) s += gp[p];
          bn->grad[static_cast<size_t>(co)] += s;
        }
    }
    if (wn->requires_grad) {
      wn->ensure_grad();
      T* gw = wn->grad.data();
#pragma omp parallel for if (heavy)
      for (int co = 0; co < Cout; ++co) {
        for (int b = 0; b < B; ++b) {
          const T* gp = gy + (static_cast<size_t>(b) * Cout + co) * yplane;
          for (int ci = 0; ci < Cin; ++ci) {
            const T* xp = xn->data.data() + (static_cast<size_t>(b) * Cin + ci) * xplane;
            T* gwrow = gw + ((static_cast<size_t>(co) * Cin + ci) * kh) * kw;
            for (int i = 0; i < kh; ++i) {
              for (int j = 0; j < kw; ++j) {
                int oh_lo, oh_hi, ow_lo, ow_hi;
                valid_range(H, Ho, stride, padding, i, oh_lo, oh_hi);
                valid_range(W, Wo, stride, padding, j, ow_lo, ow_hi);
                T s = T(0);
                for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                  const int ih = oh * stride - padding + i;
                  const T* xr = xp + static_cast<size_t>(ih) * W - padding + j;
                  const T* gr = gp + static_cast<size_t>(oh) * Wo;
                  for (int ow = ow_lo; ow <= ow_hi; ++ow) s += gr[ow] * xr[ow * stride];
                }
                gwrow[i * kw + j] += s;
              }
            }
          }
        }
      }
    }
    if (xn->requires_grad) {
      xn->ensure_grad();
      T* gx = xn->grad.data();
#pragma omp parallel for collapse(2) if (heavy)
      for (int b = 0; b < B; ++b) {
        for (int ci = 0; ci < Cin; ++ci) {
          T* gxp = gx + (static_cast<size_t>(b) * Cin + ci) * xplane;
          for (int co = 0; co < Cout; ++co) {
            const T* gp = gy + (static_cast<size_t>(b) * Cout + co) * yplane;
            const T* wrow = wn->data.data() + ((static_cast<size_t>(co) * Cin + ci) * kh) * kw;
            for (int i = 0; i < kh; ++i) {
              for (int j = 0; j < kw; ++j) {
                const T wv = wrow[i * kw + j];
                int oh_lo, oh_hi, ow_lo, ow_hi;
                valid_range(H, Ho, stride, padding, i, oh_lo, oh_hi);
                valid_range(W, Wo, stride, padding, j, ow_lo, ow_hi);
                for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                  const int ih = oh * stride - padding + i;
                  T* gxr = gxp + static_cast<size_t>(ih) * W - padding + j;
                  const T* gr = gp + static_cast<size_t>(oh) * Wo;
                  for (int ow = ow_lo; ow <= ow_hi; ++ow) gxr[ow * stride] += wv * gr[ow];
                }
              }
            }
          }
        }
      }
    }
  });
  return out;
}

template <class T>
TensorT<T> transpose_conv2d(const TensorT<T>& input, const TensorT<T>& weight,
                            const TensorT<T>& bias, int stride, int padding) {
  require(input.rank() == 4, "transpose_conv2d: input must be 4-D");
  require(weight.rank() == 4, "transpose_conv2d: weight must be 4-D");
  const int B = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int kh = weight.dim(2), kw = weight.dim(3);
  const int Cout = weight.dim(1);
  require(weight.dim(0) == Cin, "transpose_conv2d: input has " + std::to_string(Cin) +
                                    " channels but weight " + shape_str(weight.shape()) +
                                    " expects " + std::to_string(weight.dim(0)));
  require(stride >= 1 && padding >= 0, "transpose_conv2d: bad stride/padding");
  require(bias.rank() == 1 && bias.dim(0) == Cout,
          "transpose_conv2d: bias must have shape [" + std::to_string(Cout) + "]");
  const int Ho = (H - 1) * stride - 2 * padding + kh;
  const int Wo = (W - 1) * stride - 2 * padding + kw;
  require(Ho >= 1 && Wo >= 1, "transpose_conv2d: output would be empty");

  TensorT<T> out = TensorT<T>::zeros({B, Cout, Ho, Wo});
  const T* xd = input.data();
  const T* wd = weight.data();
  const T* bd = bias.data();
  T* yd = out.data();
  const size_t xplane = static_cast<size_t>(H) * W;
  const size_t yplane = static_cast<size_t>(Ho) * Wo;
  const bool heavy = static_cast<long long>(B) * Cout * Cin * H * W * kh * kw > (1 << 18);

#pragma omp parallel for collapse(2) if (heavy)
  for (int b = 0; b < B; ++b) {
    for (int co = 0; co < Cout; ++co) {
      T* yp = yd + (static_cast<size_t>(b) * Cout + co) * yplane;
      std::fill(yp, yp + yplane, bd[co]);
      for (int ci = 0; ci < Cin; ++ci) {
        const T* xp = xd + (static_cast<size_t>(b) * Cin + ci) * xplane;
        const T* wrow = wd + ((static_cast<size_t>(ci) * Cout + co) * kh) * kw;
        for (int i = 0; i < kh; ++i) {
          for (int j = 0; j < kw; ++j) {
            const T wv = wrow[i * kw + j];
            int ih_lo, ih_hi, iw_lo, iw_hi;
            valid_range(Ho, H, stride, padding, i, ih_lo, ih_hi);
            valid_range(Wo, W, stride, padding, j, iw_lo, iw_hi);
            for (int ih = ih_lo; ih <= ih_hi; ++ih) {
              const int oh = ih * stride - padding + i;
              const T* xr = xp + static_cast<size_t>(ih) * W;
              T* yr = yp + static_cast<size_t>(oh) * Wo - padding + j;
              for (int iw = iw_lo; iw <= iw_hi; ++iw) yr[iw * stride] += wv * xr[iw];
            }
          }
        }
      }
    }
  }

  auto* xn = input.raw();
  auto* wn = weight.raw();
  auto* bn = bias.raw();
  auto* on = out.raw();
  record(out, {input, weight, bias}, [=]() {
    const T* gy = on->grad.data();
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int b = 0; b < B; ++b)
        for (int co = 0; co < Cout; ++co) {
          const T* gp = gy + (static_cast<size_t>(b) * Cout + co) * yplane;
          T s = T(0);
          for (size_t p = 0; p < yplane; ++p) s += gp[p];
          bn->grad[static_cast<size_t>(co)] += s;
        }
    }
    if (wn->requires_grad) {
      wn->ensure_grad();
      T* gw = wn->grad.data();
#pragma omp parallel for if (heavy)
      for (int ci = 0; ci < Cin; ++ci) {
        for (int co = 0; co < Cout; ++co) {
          T* gwrow = gw + ((static_cast<size_t>(ci) * Cout + co) * kh) * kw;
          for (int b = 0; b < B; ++b) {
            const T* xp = xn->data.data() + (static_cast<size_t>(b) * Cin + ci) * xplane;
            const T* gp = gy + (static_cast<size_t>(b) * Cout + co) * yplane;
            for (int i = 0; i < kh; ++i) {
              for (int j = 0; j < kw; ++j) {
                int ih_lo, ih_hi, iw_lo, iw_hi;
                valid_range(Ho, H, stride, padding, i, ih_lo, ih_hi);
                valid_range(Wo, W, stride, padding, j, iw_lo, iw_hi);
                T s = T(0);
                for (int ih = ih_lo; ih <= ih_hi; ++ih) {
                  const int oh = ih * stride - padding + i;
                  const T* xr = xp + static_cast<size_t>(ih) * W;
                  const T* gr = gp + static_cast<size_t>(oh) * Wo - padding + j;
                  for (int iw = iw_lo; iw <= iw_hi; ++iw) s += xr[iw] * gr[iw * stride];
                }
                gwrow[i * kw + j] += s;
              }
            }
          }
        }
      }
    }
    if (xn->requires_grad) {
      xn->ensure_grad();
      T* gx = xn->grad.data();
#pragma omp parallel for collapse(2) if (heavy)
      for (int b = 0; b < B; ++b) {
        for (int ci = 0; ci < Cin; ++ci) {
          T* gxp = gx + (static_cast<size_t>(b) * Cin + ci) * xplane;
          for (int co = 0; co < Cout; ++co) {
            const T* gp = gy + (static_cast<size_t>(b) * Cout + co) * yplane;
            const T* wrow = wn->data.data() + ((static_cast<size_t>(ci) * Cout + co) * kh) * kw;
            for (int i = 0; i < kh; ++i) {
              for (int j = 0; j < kw; ++j) {
                const T wv = wrow[i * kw + j];
                int ih_lo, ih_hi, iw_lo, iw_hi;
                valid_range(Ho, H, stride, padding, i, ih_lo, ih_hi);
                valid_range(Wo, W, stride, padding, j, iw_lo, iw_hi);
                for (int ih = ih_lo; ih <= ih_hi; ++ih) {
                  const int oh = ih * stride - padding + i;
                  T* gxr = gxp + static_cast<size_t>(ih) * W;
                  const T* gr = gp + static_cast<size_t>(oh) * Wo - padding + j;
                  for (int iw = iw_lo; iw <= iw_hi; ++iw) gxr[iw] += wv * gr[iw * stride];
                }
              }
            }
          }
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization

template <class T>
TensorT<T> batch_norm(const TensorT<T>& input, const TensorT<T>& scale_t, const TensorT<T>& shift_t,
                      BnStats<T>& stats, BnMode mode, bool update_running, T momentum, T eps) {
  require(input.rank() == 4, "batch_norm: input must be 4-D, got " + shape_str(input.shape()));
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  require(scale_t.rank() == 1 && scale_t.dim(0) == C, "batch_norm: scale must have shape [C]");
  require(shift_t.rank() == 1 && shift_t.dim(0) == C, "batch_norm: shift must have shape [C]");
  require(static_cast<int>(stats.mean.size()) == C, "batch_norm: running stats size mismatch");
  const size_t pl = static_cast<size_t>(H) * W;
  const size_t n_per_c = static_cast<size_t>(B) * pl;
  if (mode == BnMode::train)
    require(n_per_c >= 2, "batch_norm: train mode needs B*H*W >= 2 per channel");

  TensorT<T> out = TensorT<T>::zeros(input.shape());
  const T* xd = input.data();
  const T* gamma = scale_t.data();
  const T* beta = shift_t.data();
  T* yd = out.data();

  // closure state
  auto normalized = std::make_shared<std::vector<T>>();
  auto invstd = std::make_shared<std::vector<T>>(static_cast<size_t>(C));

  if (mode == BnMode::train) {
    normalized->assign(input.size(), T(0));
    for (int c = 0; c < C; ++c) {
      T mean = T(0);
      for (int b = 0; b < B; ++b) {
        const T* xp = xd + (static_cast<size_t>(b) * C + c) * pl;
        for (size_t p = 0; p < pl; ++p) mean += xp[p];
      }
      mean /= static_cast<T>(n_per_c);
      T var = T(0);
      for (int b = 0; b < B; ++b) {
        const T* xp = xd + (static_cast<size_t>(b) * C + c) * pl;
        for (size_t p = 0; p < pl; ++p) {
          T d = xp[p] - mean;
          var += d * d;
        }
      }
      var /= static_cast<T>(n_per_c);
      const T is = T(1) / std::sqrt(var + eps);
      (*invstd)[static_cast<size_t>(c)] = is;
      for (int b = 0; b < B; ++b) {
        const size_t off = (static_cast<size_t>(b) * C + c) * pl;
        for (size_t p = 0; p < pl; ++p) {
          T xh = (xd[off + p] - mean) * is;
          (*normalized)[off + p] = xh;
          yd[off + p] = gamma[c] * xh + beta[c];
        }
      }
      if (update_running) {
        const T unbiased = var * static_cast<T>(n_per_c) / static_cast<T>(n_per_c - 1);
        stats.mean[static_cast<size_t>(c)] =
            (T(1) - momentum) * stats.mean[static_cast<size_t>(c)] + momentum * mean;
        stats.var[static_cast<size_t>(c)] =
            (T(1) - momentum) * stats.var[static_cast<size_t>(c)] + momentum * unbiased;
      }
    }
  } else {
    normalized->assign(input.size(), T(0));
    for (int c = 0; c < C; ++c) {
      const T is = T(1) / std::sqrt(stats.var[static_cast<size_t>(c)] + eps);
      const T mean = stats.mean[static_cast<size_t>(c)];
      (*invstd)[static_cast<size_t>(c)] = is;
      for (int b = 0; b < B; ++b) {
        const size_t off = (static_cast<size_t>(b) * C + c) * pl;
        for (size_t p = 0; p < pl; ++p) {
          T xh = (xd[off + p] - mean) * is;
          (*normalized)[off + p] = xh;
          yd[off + p] = gamma[c] * xh + beta[c];
        }
      }
    }
  }

  auto* xn = input.raw();
  auto* gn = scale_t.raw();
  auto* bn = shift_t.raw();
  auto* on = out.raw();
  const bool train = mode == BnMode::train;
  record(out, {input, scale_t, shift_t}, [=]() {
    const T* gy = on->grad.data();
    const std::vector<T>& xh = *normalized;
    if (gn->requires_grad || bn->requires_grad) {
      gn->ensure_grad();
      bn->ensure_grad();
      for (int c = 0; c < C; ++c) {
        T dg = T(0), db = T(0);
        for (int b = 0; b < B; ++b) {
          const size_t off = (static_cast<size_t>(b) * C + c) * pl;
          for (size_t p = 0; p < pl; ++p) {
            dg += gy[off + p] * xh[off + p];
            db += gy[off + p];
          }
        }
        if (gn->requires_grad) gn->grad[static_cast<size_t>(c)] += dg;
        if (bn->requires_grad) bn->grad[static_cast<size_t>(c)] += db;
      }
    }
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (int c = 0; c < C; ++c) {
        const T g = gn->data[static_cast<size_t>(c)];
        const T is = (*invstd)[static_cast<size_t>(c)];
        if (train) {
          T sum_gy = T(0), sum_gy_xh = T(0);
          for (int b = 0; b < B; ++b) {
            const size_t off = (static_cast<size_t>(b) * C + c) * pl;
            for (size_t p = 0; p < pl; ++p) {
              sum_gy += gy[off + p];
              sum_gy_xh += gy[off + p] * xh[off + p];
            }
          }
          const T inv_n = T(1) / static_cast<T>(n_per_c);
          for (int b = 0; b < B; ++b) {
            const size_t off = (static_cast<size_t>(b) * C + c) * pl;
            for (size_t p = 0; p < pl; ++p)
              xn->grad[off + p] +=
                  g * is * (gy[off + p] - inv_n * sum_gy - xh[off + p] * inv_n * sum_gy_xh);
          }
        } else {
          for (int b = 0; b < B; ++b) {
            const size_t off = (static_cast<size_t>(b) * C + c) * pl;
            for (size_t p = 0; p < pl; ++p) xn->grad[off + p] += g * is * gy[off + p];
          }
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Shape plumbing

template <class T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b) {
  require(a.rank() == 4 && b.rank() == 4, "concat_channels: inputs must be 4-D");
  require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "concat_channels: batch/spatial mismatch " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
  const int B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
  TensorT<T> out = TensorT<T>::zeros({B, Ca + Cb, H, W});
  const size_t pl = static_cast<size_t>(H) * W;
  for (int bi = 0; bi < B; ++bi) {
    std::copy_n(a.data() + static_cast<size_t>(bi) * Ca * pl, static_cast<size_t>(Ca) * pl,
                out.data() + static_cast<size_t>(bi) * (Ca + Cb) * pl);
    std::copy_n(b.data() + static_cast<size_t>(bi) * Cb * pl, static_cast<size_t>(Cb) * pl,
                out.data() + (static_cast<size_t>(bi) * (Ca + Cb) + Ca) * pl);
  }
  auto* an = a.raw();
  auto* bn = b.raw();
  auto* on = out.raw();
  record(out, {a, b}, [=]() {
    const T* gy = on->grad.data();
    if (an->requires_grad) {
      an->ensure_grad();
      for (int bi = 0; bi < B; ++bi) {
        const T* src = gy + static_cast<size_t>(bi) * (Ca + Cb) * pl;
        T* dst = an->grad.data() + static_cast<size_t>(bi) * Ca * pl;
        for (size_t i = 0; i < static_cast<size_t>(Ca) * pl; ++i) dst[i] += src[i];
      }
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int bi = 0; bi < B; ++bi) {
        const T* src = gy + (static_cast<size_t>(bi) * (Ca + Cb) + Ca) * pl;
        T* dst = bn->grad.data() + static_cast<size_t>(bi) * Cb * pl;
        for (size_t i = 0; i < static_cast<size_t>(Cb) * pl; ++i) dst[i] += src[i];
      }
    }
  });
  return out;
}

template <class T>
TensorT<T> global_average_pool(const TensorT<T>& input, const TensorT<T>* mask,
                               bool divide_by_area) {
  require(input.rank() == 4, "global_average_pool: input must be 4-D");
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const size_t pl = static_cast<size_t>(H) * W;
  std::vector<T> denom(static_cast<size_t>(B), static_cast<T>(pl));
  if (mask) {
    require(mask->rank() == 4 && mask->dim(0) == B && mask->dim(1) == 1 && mask->dim(2) == H &&
                mask->dim(3) == W,
            "global_average_pool: mask must have shape [B,1,H,W]");
    for (int b = 0; b < B; ++b) {
      const T* mp = mask->data() + static_cast<size_t>(b) * pl;
      T count = T(0);
      for (size_t p = 0; p < pl; ++p) {
        require(mp[p] == T(0) || mp[p] == T(1), "global_average_pool: mask values must be 0 or 1");
        count += mp[p];
      }
      if (count == T(0))
        throw InvalidArgument("global_average_pool: empty mask for batch item " + std::to_string(b));
      denom[static_cast<size_t>(b)] = divide_by_area ? static_cast<T>(pl) : count;
    }
  }

  TensorT<T> out = TensorT<T>::zeros({B, C});
  const T* xd = input.data();
  T* yd = out.data();
  for (int b = 0; b < B; ++b) {
    const T* mp = mask ? mask->data() + static_cast<size_t>(b) * pl : nullptr;
    for (int c = 0; c < C; ++c) {
      const T* xp = xd + (static_cast<size_t>(b) * C + c) * pl;
      T s = T(0);
      if (mp) {
        for (size_t p = 0; p < pl; ++p) s += xp[p] * mp[p];
      } else {
        for (size_t p = 0; p < pl; ++p) s += xp[p];
      }
      yd[static_cast<size_t>(b) * C + c] = s / denom[static_cast<size_t>(b)];
    }
  }

  auto* xn = input.raw();
  auto* on = out.raw();
  std::shared_ptr<TensorNode<T>> mask_node = mask ? mask->node() : nullptr;
  record(out, {input}, [=]() {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T* gy = on->grad.data();
    for (int b = 0; b < B; ++b) {
      const T* mp = mask_node ? mask_node->data.data() + static_cast<size_t>(b) * pl : nullptr;
      const T inv = T(1) / denom[static_cast<size_t>(b)];
      for (int c = 0; c < C; ++c) {
        T* gxp = xn->grad.data() + (static_cast<size_t>(b) * C + c) * pl;
        const T g = gy[static_cast<size_t>(b) * C + c] * inv;
        if (mp) {
          for (size_t p = 0; p < pl; ++p) gxp[p] += g * mp[p];
        } else {
          for (size_t p = 0; p < pl; ++p) gxp[p] += g;
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Warping

template <class T>
TensorT<T> warp_bilinear(const TensorT<T>& img, const TensorT<T>& flow) {
  require(img.rank() == 4, "warp_bilinear: image must be 4-D");
  require(flow.rank() == 4 && flow.dim(1) == 2, "warp_bilinear: flow must have shape [B,2,H,W]");
  const int B = img.dim(0), C = img.dim(1), H = img.dim(2), W = img.dim(3);
  require(flow.dim(0) == B && flow.dim(2) == H && flow.dim(3) == W,
          "warp_bilinear: flow extent mismatch " + shape_str(flow.shape()));
  const size_t pl = static_cast<size_t>(H) * W;

  TensorT<T> out = TensorT<T>::zeros(img.shape());
  const T* id = img.data();
  const T* fd = flow.data();
  T* od = out.data();
  for (int b = 0; b < B; ++b) {
    const T* fx = fd + (static_cast<size_t>(b) * 2 + 0) * pl;
    const T* fy = fd + (static_cast<size_t>(b) * 2 + 1) * pl;
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const size_t p = static_cast<size_t>(y) * W + x;
        T sx = static_cast<T>(x) - fx[p];
        T sy = static_cast<T>(y) - fy[p];
        sx = std::clamp(sx, T(0), static_cast<T>(W - 1));
        sy = std::clamp(sy, T(0), static_cast<T>(H - 1));
        const int x0 = std::min(static_cast<int>(sx), W - 1);
        const int y0 = std::min(static_cast<int>(sy), H - 1);
        const int x1 = std::min(x0 + 1, W - 1);
        const int y1 = std::min(y0 + 1, H - 1);
        const T ax = sx - static_cast<T>(x0);
        const T ay = sy - static_cast<T>(y0);
        for (int c = 0; c < C; ++c) {
          const T* ip = id + (static_cast<size_t>(b) * C + c) * pl;
          const T v00 = ip[static_cast<size_t>(y0) * W + x0];
          const T v01 = ip[static_cast<size_t>(y0) * W + x1];
          const T v10 = ip[static_cast<size_t>(y1) * W + x0];
          const T v11 = ip[static_cast<size_t>(y1) * W + x1];
          od[(static_cast<size_t>(b) * C + c) * pl + p] =
              (T(1) - ay) * ((T(1) - ax) * v00 + ax * v01) + ay * ((T(1) - ax) * v10 + ax * v11);
        }
      }
    }
  }

  auto* in = img.raw();
  auto* fn = flow.raw();
  auto* on = out.raw();
  record(out, {img, flow}, [=]() {
    const T* gy = on->grad.data();
    if (in->requires_grad) in->ensure_grad();
    if (fn->requires_grad) fn->ensure_grad();
    for (int b = 0; b < B; ++b) {
      const T* fxp = fn->data.data() + (static_cast<size_t>(b) * 2 + 0) * pl;
      const T* fyp = fn->data.data() + (static_cast<size_t>(b) * 2 + 1) * pl;
      for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
          const size_t p = static_cast<size_t>(y) * W + x;
          const T rx = static_cast<T>(x) - fxp[p];
          const T ry = static_cast<T>(y) - fyp[p];
          const bool in_x = rx >= T(0) && rx <= static_cast<T>(W - 1);
          const bool in_y = ry >= T(0) && ry <= static_cast<T>(H - 1);
          const T sx = std::clamp(rx, T(0), static_cast<T>(W - 1));
          const T sy = std::clamp(ry, T(0), static_cast<T>(H - 1));
          const int x0 = std::min(static_cast<int>(sx), W - 1);
          const int y0 = std::min(static_cast<int>(sy), H - 1);
          const int x1 = std::min(x0 + 1, W - 1);
          const int y1 = std::min(y0 + 1, H - 1);
          const T ax = sx - static_cast<T>(x0);
          const T ay = sy - static_cast<T>(y0);
          T dfx = T(0), dfy = T(0);
          for (int c = 0; c < C; ++c) {
            const size_t base = (static_cast<size_t>(b) * C + c) * pl;
            const T g = gy[base + p];
            if (g == T(0)) continue;
            const T* ip = in->data.data() + base;
            const T v00 = ip[static_cast<size_t>(y0) * W + x0];
            const T v01 = ip[static_cast<size_t>(y0) * W + x1];
            const T v10 = ip[static_cast<size_t>(y1) * W + x0];
            const T v11 = ip[static_cast<size_t>(y1) * W + x1];
            if (in->requires_grad) {
              T* gp = in->grad.data() + base;
              gp[static_cast<size_t>(y0) * W + x0] += g * (T(1) - ay) * (T(1) - ax);
              gp[static_cast<size_t>(y0) * W + x1] += g * (T(1) - ay) * ax;
              gp[static_cast<size_t>(y1) * W + x0] += g * ay * (T(1) - ax);
              gp[static_cast<size_t>(y1) * W + x1] += g * ay * ax;
            }
            if (fn->requires_grad) {
              if (in_x) {
                const T dv_dsx = (T(1) - ay) * (v01 - v00) + ay * (v11 - v10);
                dfx += g * -dv_dsx;
              }
              if (in_y) {
                const T dv_dsy = (T(1) - ax) * (v10 - v00) + ax * (v11 - v01);
                dfy += g * -dv_dsy;
              }
            }
          }
          if (fn->requires_grad) {
            fn->grad[(static_cast<size_t>(b) * 2 + 0) * pl + p] += dfx;
            fn->grad[(static_cast<size_t>(b) * 2 + 1) * pl + p] += dfy;
          }
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Relation helpers

template <class T>
TensorT<T> channel_dot(const TensorT<T>& x, const TensorT<T>& e) {
  require(x.rank() == 4, "channel_dot: feature map must be 4-D");
  require(e.rank() == 2, "channel_dot: embedding must be 2-D [B,C]");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(e.dim(0) == B && e.dim(1) == C,
          "channel_dot: embedding " + shape_str(e.shape()) + " does not match map " +
              shape_str(x.shape()));
  const size_t pl = static_cast<size_t>(H) * W;
  TensorT<T> out = TensorT<T>::zeros({B, 1, H, W});
  for (int b = 0; b < B; ++b) {
    T* op = out.data() + static_cast<size_t>(b) * pl;
    for (int c = 0; c < C; ++c) {
      const T ev = e.data()[static_cast<size_t>(b) * C + c];
      const T* xp = x.data() + (static_cast<size_t>(b) * C + c) * pl;
      for (size_t p = 0; p < pl; ++p) op[p] += ev * xp[p];
    }
  }
  auto* xn = x.raw();
  auto* en = e.raw();
  auto* on = out.raw();
  record(out, {x, e}, [=]() {
    const T* gy = on->grad.data();
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (int b = 0; b < B; ++b) {
        const T* gp = gy + static_cast<size_t>(b) * pl;
        for (int c = 0; c < C; ++c) {
          const T ev = en->data[static_cast<size_t>(b) * C + c];
          T* gxp = xn->grad.data() + (static_cast<size_t>(b) * C + c) * pl;
          for (size_t p = 0; p < pl; ++p) gxp[p] += ev * gp[p];
        }
      }
    }
    if (en->requires_grad) {
      en->ensure_grad();
      for (int b = 0; b < B; ++b) {
        const T* gp = gy + static_cast<size_t>(b) * pl;
        for (int c = 0; c < C; ++c) {
          const T* xp = xn->data.data() + (static_cast<size_t>(b) * C + c) * pl;
          T s = T(0);
          for (size_t p = 0; p < pl; ++p) s += xp[p] * gp[p];
          en->grad[static_cast<size_t>(b) * C + c] += s;
        }
      }
    }
  });
  return out;
}

template <class T>
TensorT<T> repeat_batch(const TensorT<T>& x, int batch) {
  require(x.rank() >= 1 && x.dim(0) == 1, "repeat_batch: leading extent must be 1");
  require(batch >= 1, "repeat_batch: batch must be positive");
  Shape s = x.shape();
  s[0] = batch;
  TensorT<T> out = TensorT<T>::zeros(s);
  const size_t n = x.size();
  for (int b = 0; b < batch; ++b) std::copy_n(x.data(), n, out.data() + static_cast<size_t>(b) * n);
  auto* xn = x.raw();
  auto* on = out.raw();
  record(out, {x}, [=]() {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (int b = 0; b < batch; ++b) {
      const T* gp = on->grad.data() + static_cast<size_t>(b) * n;
      for (size_t i = 0; i < n; ++i) xn->grad[i] += gp[i];
    }
  });
  return out;
}

template <class T>
TensorT<T> slice_batch(const TensorT<T>& x, int index) {
  require(x.rank() >= 1, "slice_batch: rank must be >= 1");
  require(index >= 0 && index < x.dim(0), "slice_batch: index out of range");
  Shape s = x.shape();
  s[0] = 1;
  const size_t n = numel(s);
  TensorT<T> out = TensorT<T>::zeros(s);
  std::copy_n(x.data() + static_cast<size_t>(index) * n, n, out.data());
  auto* xn = x.raw();
  auto* on = out.raw();
  record(out, {x}, [=]() {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    T* gx = xn->grad.data() + static_cast<size_t>(index) * n;
    for (size_t i = 0; i < n; ++i) gx[i] += on->grad[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <class T>
TensorT<T> reduce_sum(const TensorT<T>& x) {
  T s = T(0);
  for (size_t i = 0; i < x.size(); ++i) s += x.data()[i];
  TensorT<T> out = TensorT<T>::scalar(s);
  auto* xn = x.raw();
  auto* on = out.raw();
  record(out, {x}, [=]() {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T g = on->grad[0];
    for (size_t i = 0; i < xn->data.size(); ++i) xn->grad[i] += g;
  });
  return out;
}

template <class T>
TensorT<T> reduce_mean(const TensorT<T>& x) {
  const T inv = T(1) / static_cast<T>(x.size());
  T s = T(0);
  for (size_t i = 0; i < x.size(); ++i) s += x.data()[i];
  TensorT<T> out = TensorT<T>::scalar(s * inv);
  auto* xn = x.raw();
  auto* on = out.raw();
  record(out, {x}, [=]() {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T g = on->grad[0] * inv;
    for (size_t i = 0; i < xn->data.size(); ++i) xn->grad[i] += g;
  });
  return out;
}

template <class T>
TensorT<T> mean_squared_error(const TensorT<T>& a, const TensorT<T>& b) {
  require(a.shape() == b.shape(), "mean_squared_error: shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
  TensorT<T> d = sub(a, b);
  return reduce_mean(mul(d, d));
}

template <class T>
TensorT<T> gradient_difference_loss(const TensorT<T>& a, const TensorT<T>& b) {
  require(a.rank() == 4, "gradient_difference_loss: inputs must be 4-D");
  require(a.shape() == b.shape(), "gradient_difference_loss: shape mismatch " +
                                      shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  const size_t pl = static_cast<size_t>(H) * W;
  const T nv = static_cast<T>(static_cast<size_t>(B) * C * (H - 1) * W);
  const T nh = static_cast<T>(static_cast<size_t>(B) * C * H * (W - 1));
  const T* ad = a.data();
  const T* bd = b.data();
  T acc_v = T(0), acc_h = T(0);
  for (int bc = 0; bc < B * C; ++bc) {
    const T* ap = ad + static_cast<size_t>(bc) * pl;
    const T* bp = bd + static_cast<size_t>(bc) * pl;
    for (int y = 1; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const size_t p = static_cast<size_t>(y) * W + x;
        acc_v += std::abs(std::abs(ap[p] - ap[p - W]) - std::abs(bp[p] - bp[p - W]));
      }
    for (int y = 0; y < H; ++y)
      for (int x = 1; x < W; ++x) {
        const size_t p = static_cast<size_t>(y) * W + x;
        acc_h += std::abs(std::abs(ap[p] - ap[p - 1]) - std::abs(bp[p] - bp[p - 1]));
      }
  }
  T value = T(0);
  if (H > 1) value += acc_v / nv;
  if (W > 1) value += acc_h / nh;
  TensorT<T> out = TensorT<T>::scalar(value);

  auto* an = a.raw();
  auto* bn = b.raw();
  auto* on = out.raw();
  record(out, {a, b}, [=]() {
    const T g = on->grad[0];
    auto sgn = [](T v) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); };
    if (an->requires_grad) an->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    for (int bc = 0; bc < B * C; ++bc) {
      const size_t base = static_cast<size_t>(bc) * pl;
      const T* ap = an->data.data() + base;
      const T* bp = bn->data.data() + base;
      auto accumulate = [&](size_t p, size_t q, T denom) {
        // p and q are neighbor offsets within the plane, p the later one
        const T da = ap[p] - ap[q];
        const T db = bp[p] - bp[q];
        const T u = sgn(std::abs(da) - std::abs(db)) * g / denom;
        if (an->requires_grad) {
          const T s = u * sgn(da);
          an->grad[base + p] += s;
          an->grad[base + q] -= s;
        }
        if (bn->requires_grad) {
          const T s = u * sgn(db);
          bn->grad[base + p] -= s;
          bn->grad[base + q] += s;
        }
      };
      if (H > 1)
        for (int y = 1; y < H; ++y)
          for (int x = 0; x < W; ++x) {
            const size_t p = static_cast<size_t>(y) * W + x;
            accumulate(p, p - W, nv);
          }
      if (W > 1)
        for (int y = 0; y < H; ++y)
          for (int x = 1; x < W; ++x) {
            const size_t p = static_cast<size_t>(y) * W + x;
            accumulate(p, p - 1, nh);
          }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------

#define STRL_INSTANTIATE(T)                                                                       \
  template TensorT<T> conv2d(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, int, int); \
  template TensorT<T> transpose_conv2d(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,  \
                                       int, int);                                                \
  template TensorT<T> batch_norm(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,        \
                                 BnStats<T>&, BnMode, bool, T, T);                               \
  template TensorT<T> relu(const TensorT<T>&);                                                   \
  template TensorT<T> sigmoid(const TensorT<T>&);                                                \
  template TensorT<T> tanh(const TensorT<T>&);                                                   \
  template TensorT<T> abs(const TensorT<T>&);                                                    \
  template TensorT<T> log(const TensorT<T>&);                                                    \
  template TensorT<T> add(const TensorT<T>&, const TensorT<T>&);                                 \
  template TensorT<T> sub(const TensorT<T>&, const TensorT<T>&);                                 \
  template TensorT<T> mul(const TensorT<T>&, const TensorT<T>&);                                 \
  template TensorT<T> div(const TensorT<T>&, const TensorT<T>&);                                 \
  template TensorT<T> scale(const TensorT<T>&, T);                                               \
  template TensorT<T> add_const(const TensorT<T>&, T);                                           \
  template TensorT<T> concat_channels(const TensorT<T>&, const TensorT<T>&);                     \
  template TensorT<T> global_average_pool(const TensorT<T>&, const TensorT<T>*, bool);           \
  template TensorT<T> warp_bilinear(const TensorT<T>&, const TensorT<T>&);                       \
  template TensorT<T> channel_dot(const TensorT<T>&, const TensorT<T>&);                         \
  template TensorT<T> repeat_batch(const TensorT<T>&, int);                                      \
  template TensorT<T> slice_batch(const TensorT<T>&, int);                                       \
  template TensorT<T> reduce_sum(const TensorT<T>&);                                             \
  template TensorT<T> reduce_mean(const TensorT<T>&);                                            \
  template TensorT<T> mean_squared_error(const TensorT<T>&, const TensorT<T>&);                  \
  template TensorT<T> gradient_difference_loss(const TensorT<T>&, const TensorT<T>&);

STRL_INSTANTIATE(float)
STRL_INSTANTIATE(double)

#undef STRL_INSTANTIATE

}  // namespace strl
