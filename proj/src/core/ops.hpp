// Copyright 2026 the strl authors.
// Licensed under the Apache License, Version 2.0.

#pragma once

#include <optional>

#include "core/tensor.hpp"

namespace strl {

// Dense NCHW kernels with reverse-mode gradients. Every op validates shapes
// up front and records a backward closure only while autograd is enabled and
// at least one input requires gradients.

enum class BnMode { train, infer };

// Running statistics for one batch-norm layer. Plain buffers, outside the
// autograd graph; updated in train mode unless update_running is false.
template <class T>
struct BnStats {
  std::vector<T> mean, var;

  static BnStats make(int channels) {
    BnStats s;
    s.mean.assign(static_cast<size_t>(channels), T(0));
    s.var.assign(static_cast<size_t>(channels), T(1));
    return s;
  }
};

template <class T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& weight, const TensorT<T>& bias,
                  int stride, int padding);

// Adjoint of conv2d with the same weight/stride/padding: weight layout is
// [in_channels, out_channels, kh, kw] and the spatial output extent is
// (H-1)*stride - 2*padding + kh.
template <class T>
TensorT<T> transpose_conv2d(const TensorT<T>& input, const TensorT<T>& weight,
                            const TensorT<T>& bias, int stride, int padding);

template <class T>
TensorT<T> batch_norm(const TensorT<T>& input, const TensorT<T>& scale, const TensorT<T>& shift,
                      BnStats<T>& stats, BnMode mode, bool update_running = true,
                      T momentum = T(0.1), T eps = T(1e-5));

template <class T>
TensorT<T> relu(const TensorT<T>& x);
template <class T>
TensorT<T> sigmoid(const TensorT<T>& x);
template <class T>
TensorT<T> tanh(const TensorT<T>& x);
template <class T>
TensorT<T> abs(const TensorT<T>& x);
template <class T>
TensorT<T> log(const TensorT<T>& x);

// Binary elementwise ops; shapes must match except that either side may be a
// scalar ([1]), which broadcasts.
template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);
template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b);
template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b);
template <class T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b);

template <class T>
TensorT<T> scale(const TensorT<T>& x, T c);
template <class T>
TensorT<T> add_const(const TensorT<T>& x, T c);

template <class T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b);

// Mean over H*W per (batch, channel). With a mask, the mean runs over active
// cells only; divide_by_area instead divides the masked sum by H*W.
template <class T>
TensorT<T> global_average_pool(const TensorT<T>& input,
                               const TensorT<T>* mask = nullptr,
                               bool divide_by_area = false);

// Backward-warps image by flow: out(x) = img(x - flow(x)) with bilinear
// interpolation; source coordinates are clamped to the image border.
// flow channel 0 is the horizontal displacement, channel 1 the vertical one.
template <class T>
TensorT<T> warp_bilinear(const TensorT<T>& img, const TensorT<T>& flow);

// y[b,0,i,j] = sum_c x[b,c,i,j] * e[b,c]
template <class T>
TensorT<T> channel_dot(const TensorT<T>& x, const TensorT<T>& e);

template <class T>
TensorT<T> repeat_batch(const TensorT<T>& x, int batch);
template <class T>
TensorT<T> slice_batch(const TensorT<T>& x, int index);

template <class T>
TensorT<T> reduce_sum(const TensorT<T>& x);
template <class T>
TensorT<T> reduce_mean(const TensorT<T>& x);

// Mean over elements of (a-b)^2, composed from recorded ops.
template <class T>
TensorT<T> mean_squared_error(const TensorT<T>& a, const TensorT<T>& b);

// Mean absolute difference between the neighbor-difference magnitudes of a
// and b, vertical and horizontal terms each averaged over their own valid
// positions. Input rank 4.
template <class T>
TensorT<T> gradient_difference_loss(const TensorT<T>& a, const TensorT<T>& b);

}  // namespace strl
