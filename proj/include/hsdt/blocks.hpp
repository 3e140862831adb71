// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "hsdt/ops.hpp"
#include "hsdt/rng.hpp"

namespace hsdt {

/// Raised when cross-attention is requested for a band count the learnable queries were
/// not sized for.
class BandCountError : public ContractError {
 public:
  using ContractError::ContractError;
};

enum class S3ConvVariant {
  kParallel2,      // two stacked 3x3 spatial convs in parallel with a spectral conv
  kSingleSpatial,  // one spatial conv in parallel with a spectral conv
  kSequential,     // spatial conv followed by a spectral conv
  kConv3D,         // dense 3x3x3 baseline
};

enum class AttentionMode { kSelf, kCross };

const char* to_string(S3ConvVariant v);
S3ConvVariant parse_variant(const std::string& name);

template <typename T>
struct ConvParams {
  Parameter<T> weight;  // [kh, kw, kd, Cin, Cout]
  Parameter<T> bias;    // [Cout]
};

template <typename T>
struct LinearParams {
  Parameter<T> weight;  // [Cin, Cout]
  Parameter<T> bias;    // [Cout]
};

/// Spatial-spectral separable convolution. Spatial kernels are 3x3x1 (H, W, D) and the
/// spectral kernel is 1x1x3, so no weight depends on the band count.
template <typename T>
class S3ConvLayer {
 public:
  using scalar_type = T;

  S3ConvLayer(S3ConvVariant variant, std::size_t cin, std::size_t cout, std::size_t stride,
              const std::string& prefix, Rng& rng);

  Var<T> forward(const Var<T>& x, Tape<T>* tape) const;

  S3ConvVariant variant() const { return variant_; }
  std::size_t in_channels() const { return cin_; }
  std::size_t out_channels() const { return cout_; }
  std::size_t stride() const { return stride_; }

  void collect(std::vector<Parameter<T>*>& out);

  // Present per variant: spatial1 and spectral for the separable variants, spatial2 only
  // for Parallel2, dense only for Conv3D.
  std::vector<ConvParams<T>> spatial;
  std::vector<ConvParams<T>> spectral;
  std::vector<ConvParams<T>> dense;

 private:
  S3ConvVariant variant_;
  std::size_t cin_, cout_, stride_;
};

/// Guided spectral self-attention over the band axis.
template <typename T>
class GssaLayer {
 public:
  using scalar_type = T;

  GssaLayer(std::size_t channels, std::size_t d_train, const std::string& prefix, Rng& rng);

  /// Row-stochastic [D,D] (or [N,D,D]) map; row i holds the weights band i assigns to
  /// every source band.
  Var<T> attention_map(const Var<T>& x, Tape<T>* tape, AttentionMode mode) const;

  /// Reference route: explicit D x D product per spatial position.
  Var<T> forward(const Var<T>& x, Tape<T>* tape, AttentionMode mode) const;

  /// Same contract; band mixing runs as one channel-mixing product over the transposed
  /// cube, with the attention map acting as a 1x1 filter bank.
  Var<T> forward_fast(const Var<T>& x, Tape<T>* tape, AttentionMode mode) const;

  std::size_t channels() const { return channels_; }
  std::size_t d_train() const { return d_train_; }

  void collect(std::vector<Parameter<T>*>& out);

  LinearParams<T> value;
  LinearParams<T> post;
  Parameter<T> queries;  // [d_train, C]

 private:
  Var<T> finish(const Var<T>& x, const Var<T>& mixed, Tape<T>* tape) const;

  std::size_t channels_, d_train_;
};

/// Self-modulated feed-forward network: w1(gelu(w2 x)) + F * sigmoid(W), [F | W] = w3 x.
template <typename T>
class SmFfnLayer {
 public:
  using scalar_type = T;

  SmFfnLayer(std::size_t channels, const std::string& prefix, Rng& rng);

  Var<T> forward(const Var<T>& x, Tape<T>* tape) const;
  Var<T> sm_branch(const Var<T>& x, Tape<T>* tape) const;

  std::size_t channels() const { return channels_; }
  void collect(std::vector<Parameter<T>*>& out);

  LinearParams<T> w3;  // C -> 2C, first C outputs are the candidate features
  LinearParams<T> w2;  // C -> 2C
  LinearParams<T> w1;  // 2C -> C

 private:
  std::size_t channels_;
};

struct BlockMode {
  NormMode norm = NormMode::kEval;
  AttentionMode attention = AttentionMode::kSelf;
  bool fast_attention = true;
};

/// Xh = BN(S3Conv(x)); y = SM-FFN(GSSA(Xh) + Xh). GSSA carries its own residual as well.
template <typename T>
class TransformerBlock {
 public:
  using scalar_type = T;

  TransformerBlock(S3ConvVariant variant, std::size_t cin, std::size_t cout, std::size_t stride,
                   std::size_t d_train, const std::string& prefix, Rng& rng);

  /// When `attention_out` is set, the block's attention map is stored there as well.
  Var<T> forward(const Var<T>& x, Tape<T>* tape, const BlockMode& mode,
                 Tensor<T>* attention_out = nullptr) const;
  Var<T> normalized(const Var<T>& x, Tape<T>* tape, NormMode mode) const;

  void collect(std::vector<Parameter<T>*>& out);

  S3ConvLayer<T> s3conv;
  Parameter<T> bn_gamma, bn_beta;
  // BN running statistics are updated through a const forward in train mode.
  mutable Parameter<T> bn_running_mean, bn_running_var;
  GssaLayer<T> gssa;
  SmFfnLayer<T> smffn;
};

/// Trainable scalar count (weights, biases, BN affine, learnable queries).
template <typename Layer>
std::size_t count_params(const Layer& layer) {
  std::vector<Parameter<typename Layer::scalar_type>*> params;
  const_cast<Layer&>(layer).collect(params);
  std::size_t total = 0;
  for (const auto* p : params)
    if (p->trainable) total += p->value.numel();
  return total;
}

}  // namespace hsdt
