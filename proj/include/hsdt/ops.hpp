// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <optional>

#include "hsdt/autograd.hpp"

namespace hsdt {

using Triple = std::array<std::size_t, 3>;

enum class Activation { kSigmoid, kGelu };
enum class NormMode { kTrain, kEval };

// Elementwise and reductions.
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);
/// sqrt(a + eps) of a scalar.
template <typename T> Var<T> sqrt_eps(const Var<T>& a, T eps);
template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);

/// Plain 2-D product, or a batched product when both operands are rank 3 with equal
/// leading extents.
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
/// Swaps the last two axes.
template <typename T> Var<T> transpose_last2(const Var<T>& a);
/// Repeats `a` along a new leading axis of extent n.
template <typename T> Var<T> tile_batch(const Var<T>& a, std::size_t n);

/// Channel-wise affine map applied at every position: y[..., o] = sum_i x[..., i] w[i, o] + b[o].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const std::optional<Var<T>>& b);
/// Per-sample channel map: x is [N, ..., K], w is [N, K, M]; y[n, ..., m] = sum_k x[n, ..., k] w[n, k, m].
template <typename T> Var<T> batched_linear(const Var<T>& x, const Var<T>& w);

/// Slice [begin, begin + count) of the last axis.
template <typename T> Var<T> slice_last(const Var<T>& x, std::size_t begin, std::size_t count);
template <typename T> Var<T> concat_last(const Var<T>& a, const Var<T>& b);

/// 3-D convolution over [H,W,D,Cin] (optionally batched) with a [kh,kw,kd,Cin,Cout]
/// kernel and zero padding. Output extent per axis is (L + 2p - k) / s + 1.
template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& kernel, const std::optional<Var<T>>& bias,
              Triple stride, Triple padding);

template <typename T> Var<T> softmax(const Var<T>& x, int axis);
template <typename T> Var<T> activation(const Var<T>& x, Activation kind);
template <typename T> Var<T> sigmoid(const Var<T>& x) { return activation(x, Activation::kSigmoid); }
template <typename T> Var<T> gelu(const Var<T>& x) { return activation(x, Activation::kGelu); }

/// Mean over the spatial axes: [H,W,D,C] -> [D,C], [N,H,W,D,C] -> [N,D,C].
template <typename T> Var<T> global_avg_pool(const Var<T>& x);

/// Trilinear interpolation with half-pixel centres (align_corners = false): output index i
/// samples source coordinate (i + 0.5) / f - 0.5, clamped to the valid range.
template <typename T> Var<T> trilinear_upsample(const Var<T>& x, Triple factors);

/// Band mixing, reference route: out[n,h,w,i,c] = sum_j attn[n,i,j] v[n,h,w,j,c], evaluated as
/// one D x D by D x C product per spatial position. attn is [D,D] or [N,D,D].
template <typename T> Var<T> band_aggregate(const Var<T>& v, const Var<T>& attn);

template <typename T>
struct BatchNormState {
  Parameter<T>* running_mean;
  Parameter<T>* running_var;
  T momentum = T(0.1);
  T epsilon = T(1e-5);
};

/// Per-channel normalisation over every non-channel position. Train mode uses batch
/// statistics and updates the running estimates (unbiased variance, PyTorch convention);
/// eval mode uses the running estimates.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  BatchNormState<T> state, NormMode mode);

template <typename T> T gelu_value(T x);
template <typename T> T sigmoid_value(T x);

}  // namespace hsdt
