// SPDX-License-Identifier: Apache-2.0
#include "hsdt/blocks.hpp"

#include <cmath>

namespace hsdt {
namespace {

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
ConvParams<T> make_conv(const std::string& name, Triple k, std::size_t cin, std::size_t cout,
                        Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(k[0] * k[1] * k[2] * cin));
  return {Parameter<T>(name + "_weight", uniform_tensor<T>({k[0], k[1], k[2], cin, cout}, bound, rng)),
          Parameter<T>(name + "_bias", uniform_tensor<T>({cout}, bound, rng))};
}

template <typename T>
LinearParams<T> make_linear(const std::string& name, std::size_t cin, std::size_t cout, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin));
  return {Parameter<T>(name + "_weight", uniform_tensor<T>({cin, cout}, bound, rng)),
          Parameter<T>(name + "_bias", uniform_tensor<T>({cout}, bound, rng))};
}

template <typename T>
Var<T> apply_conv(const ConvParams<T>& p, const Var<T>& x, Tape<T>* tape, Triple stride,
                  Triple padding) {
  return conv3d(x, bind(tape, p.weight), std::optional<Var<T>>(bind(tape, p.bias)), stride,
                padding);
}

template <typename T>
Var<T> apply_linear(const LinearParams<T>& p, const Var<T>& x, Tape<T>* tape) {
  return linear(x, bind(tape, p.weight), std::optional<Var<T>>(bind(tape, p.bias)));
}

template <typename T>
void push(std::vector<Parameter<T>*>& out, ConvParams<T>& p) {
  out.push_back(&p.weight);
  out.push_back(&p.bias);
}

template <typename T>
void push(std::vector<Parameter<T>*>& out, LinearParams<T>& p) {
  out.push_back(&p.weight);
  out.push_back(&p.bias);
}

constexpr Triple kSpatialKernel{3, 3, 1};
constexpr Triple kSpectralKernel{1, 1, 3};
constexpr Triple kDenseKernel{3, 3, 3};
constexpr Triple kSpatialPad{1, 1, 0};
constexpr Triple kSpectralPad{0, 0, 1};
constexpr Triple kDensePad{1, 1, 1};

}  // namespace

const char* to_string(S3ConvVariant v) {
  switch (v) {
    case S3ConvVariant::kParallel2: return "s3conv";
    case S3ConvVariant::kSingleSpatial: return "s3conv-s";
    case S3ConvVariant::kSequential: return "s3conv-seq";
    case S3ConvVariant::kConv3D: return "conv3d";
  }
  return "?";
}

S3ConvVariant parse_variant(const std::string& name) {
  for (auto v : {S3ConvVariant::kParallel2, S3ConvVariant::kSingleSpatial,
                 S3ConvVariant::kSequential, S3ConvVariant::kConv3D}) {
    if (name == to_string(v)) return v;
  }
  throw ContractError("unknown convolution variant '" + name +
                      "' (expected s3conv, s3conv-s, s3conv-seq or conv3d)");
}

// ---------------------------------------------------------------------------------------

template <typename T>
S3ConvLayer<T>::S3ConvLayer(S3ConvVariant variant, std::size_t cin, std::size_t cout,
                            std::size_t stride, const std::string& prefix, Rng& rng)
    : variant_(variant), cin_(cin), cout_(cout), stride_(stride) {
  if (cin == 0 || cout == 0) throw ContractError("S3ConvLayer: channel counts must be >= 1");
  if (stride != 1 && stride != 2) throw ContractError("S3ConvLayer: spatial stride must be 1 or 2");
  const std::string base = prefix + ".s3conv.";
  switch (variant) {
    case S3ConvVariant::kParallel2:
      spatial.push_back(make_conv<T>(base + "spatial1", kSpatialKernel, cin, cout, rng));
      spatial.push_back(make_conv<T>(base + "spatial2", kSpatialKernel, cout, cout, rng));
      spectral.push_back(make_conv<T>(base + "spectral", kSpectralKernel, cin, cout, rng));
      break;
    case S3ConvVariant::kSingleSpatial:
      spatial.push_back(make_conv<T>(base + "spatial1", kSpatialKernel, cin, cout, rng));
      spectral.push_back(make_conv<T>(base + "spectral", kSpectralKernel, cin, cout, rng));
      break;
    case S3ConvVariant::kSequential:
      spatial.push_back(make_conv<T>(base + "spatial1", kSpatialKernel, cin, cout, rng));
      spectral.push_back(make_conv<T>(base + "spectral", kSpectralKernel, cout, cout, rng));
      break;
    case S3ConvVariant::kConv3D:
      dense.push_back(make_conv<T>(base + "dense", kDenseKernel, cin, cout, rng));
      break;
  }
}

template <typename T>
Var<T> S3ConvLayer<T>::forward(const Var<T>& x, Tape<T>* tape) const {
  const std::size_t c = x.dim(-1);
  if (c != cin_) {
    throw ShapeError("S3Conv: input has " + std::to_string(c) + " channels, layer expects " +
                     std::to_string(cin_));
  }
  const Triple strided{stride_, stride_, 1};
  const Triple unit{1, 1, 1};
  switch (variant_) {
    case S3ConvVariant::kParallel2: {
      Var<T> s = apply_conv(spatial[0], x, tape, strided, kSpatialPad);
      s = apply_conv(spatial[1], s, tape, unit, kSpatialPad);
      return add(s, apply_conv(spectral[0], x, tape, strided, kSpectralPad));
    }
    case S3ConvVariant::kSingleSpatial:
      return add(apply_conv(spatial[0], x, tape, strided, kSpatialPad),
                 apply_conv(spectral[0], x, tape, strided, kSpectralPad));
    case S3ConvVariant::kSequential:
      return apply_conv(spectral[0], apply_conv(spatial[0], x, tape, strided, kSpatialPad), tape,
                        unit, kSpectralPad);
    case S3ConvVariant::kConv3D:
      return apply_conv(dense[0], x, tape, strided, kDensePad);
  }
  throw ContractError("S3Conv: unknown variant");
}

template <typename T>
void S3ConvLayer<T>::collect(std::vector<Parameter<T>*>& out) {
  for (auto& p : spatial) push(out, p);
  for (auto& p : spectral) push(out, p);
  for (auto& p : dense) push(out, p);
}

// ---------------------------------------------------------------------------------------

template <typename T>
GssaLayer<T>::GssaLayer(std::size_t channels, std::size_t d_train, const std::string& prefix,
                        Rng& rng)
    : channels_(channels), d_train_(d_train) {
  if (channels == 0 || d_train == 0) throw ContractError("GssaLayer: extents must be >= 1");
  const std::string base = prefix + ".gssa.";
  value = make_linear<T>(base + "value", channels, channels, rng);
  post = make_linear<T>(base + "post", channels, channels, rng);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(channels));
  Tensor<T> q({d_train, channels});
  for (auto& v : q.data()) v = static_cast<T>(stddev * rng.normal());
  queries = Parameter<T>(base + "queries", std::move(q));
}

template <typename T>
Var<T> GssaLayer<T>::attention_map(const Var<T>& x, Tape<T>* tape, AttentionMode mode) const {
  const CubeDims dims = cube_dims(x.shape(), "GSSA");
  if (dims.c != channels_) {
    throw ShapeError("GSSA: input has " + std::to_string(dims.c) + " channels, layer expects " +
                     std::to_string(channels_));
  }
  const bool batched = x.rank() == 5;
  Var<T> keys = global_avg_pool(x);
  Var<T> query = keys;
  if (mode == AttentionMode::kCross) {
    if (dims.d != d_train_) {
      throw BandCountError("GSSA cross-attention needs " + std::to_string(d_train_) +
                           " bands (learnable query count) but the input has " +
                           std::to_string(dims.d));
    }
    query = bind(tape, queries);
    if (batched) query = tile_batch(query, dims.n);
  }
  return softmax(matmul(query, transpose_last2(keys)), -1);
}

template <typename T>
Var<T> GssaLayer<T>::finish(const Var<T>& x, const Var<T>& mixed, Tape<T>* tape) const {
  return add(apply_linear(post, mixed, tape), x);
}

template <typename T>
Var<T> GssaLayer<T>::forward(const Var<T>& x, Tape<T>* tape, AttentionMode mode) const {
  Var<T> attn = attention_map(x, tape, mode);
  Var<T> v = apply_linear(value, x, tape);
  return finish(x, band_aggregate(v, attn), tape);
}

template <typename T>
Var<T> GssaLayer<T>::forward_fast(const Var<T>& x, Tape<T>* tape, AttentionMode mode) const {
  Var<T> attn = attention_map(x, tape, mode);
  Var<T> v = transpose_last2(apply_linear(value, x, tape));  // [.., C, D]
  Var<T> filters = transpose_last2(attn);                    // filters[j, i] = attn[i, j]
  Var<T> mixed = x.rank() == 5 ? batched_linear(v, filters)
                               : linear(v, filters, std::optional<Var<T>>());
  return finish(x, transpose_last2(mixed), tape);
}

template <typename T>
void GssaLayer<T>::collect(std::vector<Parameter<T>*>& out) {
  push(out, value);
  push(out, post);
  out.push_back(&queries);
}

// ---------------------------------------------------------------------------------------

template <typename T>
SmFfnLayer<T>::SmFfnLayer(std::size_t channels, const std::string& prefix, Rng& rng)
    : channels_(channels) {
  if (channels == 0) throw ContractError("SmFfnLayer: channels must be >= 1");
  const std::string base = prefix + ".smffn.";
  w3 = make_linear<T>(base + "w3", channels, 2 * channels, rng);
  w2 = make_linear<T>(base + "w2", channels, 2 * channels, rng);
  w1 = make_linear<T>(base + "w1", 2 * channels, channels, rng);
}

template <typename T>
Var<T> SmFfnLayer<T>::sm_branch(const Var<T>& x, Tape<T>* tape) const {
  if (x.dim(-1) != channels_) {
    throw ShapeError("SM-FFN: input has " + std::to_string(x.dim(-1)) +
                     " channels, layer expects " + std::to_string(channels_));
  }
  Var<T> expanded = apply_linear(w3, x, tape);
  Var<T> features = slice_last(expanded, 0, channels_);
  Var<T> gate = slice_last(expanded, channels_, channels_);
  return mul(features, sigmoid(gate));
}

template <typename T>
Var<T> SmFfnLayer<T>::forward(const Var<T>& x, Tape<T>* tape) const {
  Var<T> sm = sm_branch(x, tape);
  Var<T> ffn = apply_linear(w1, gelu(apply_linear(w2, x, tape)), tape);
  return add(ffn, sm);
}

template <typename T>
void SmFfnLayer<T>::collect(std::vector<Parameter<T>*>& out) {
  push(out, w3);
  push(out, w2);
  push(out, w1);
}

// ---------------------------------------------------------------------------------------

template <typename T>
TransformerBlock<T>::TransformerBlock(S3ConvVariant variant, std::size_t cin, std::size_t cout,
                                      std::size_t stride, std::size_t d_train,
                                      const std::string& prefix, Rng& rng)
    : s3conv(variant, cin, cout, stride, prefix, rng),
      bn_gamma(prefix + ".bn.gamma", Tensor<T>::ones({cout})),
      bn_beta(prefix + ".bn.beta", Tensor<T>::zeros({cout})),
      bn_running_mean(prefix + ".bn.running_mean", Tensor<T>::zeros({cout}), false),
      bn_running_var(prefix + ".bn.running_var", Tensor<T>::ones({cout}), false),
      gssa(cout, d_train, prefix, rng),
      smffn(cout, prefix, rng) {}

template <typename T>
Var<T> TransformerBlock<T>::normalized(const Var<T>& x, Tape<T>* tape, NormMode mode) const {
  BatchNormState<T> state{&bn_running_mean, &bn_running_var};
  return batch_norm(s3conv.forward(x, tape), bind(tape, bn_gamma), bind(tape, bn_beta), state,
                    mode);
}

template <typename T>
Var<T> TransformerBlock<T>::forward(const Var<T>& x, Tape<T>* tape, const BlockMode& mode,
                                    Tensor<T>* attention_out) const {
  Var<T> xh = normalized(x, tape, mode.norm);
  if (attention_out) *attention_out = gssa.attention_map(xh, nullptr, mode.attention).value();
  Var<T> attended = mode.fast_attention ? gssa.forward_fast(xh, tape, mode.attention)
                                        : gssa.forward(xh, tape, mode.attention);
  return smffn.forward(add(attended, xh), tape);
}

template <typename T>
void TransformerBlock<T>::collect(std::vector<Parameter<T>*>& out) {
  s3conv.collect(out);
  out.push_back(&bn_gamma);
  out.push_back(&bn_beta);
  out.push_back(&bn_running_mean);
  out.push_back(&bn_running_var);
  gssa.collect(out);
  smffn.collect(out);
}

template class S3ConvLayer<float>;
template class S3ConvLayer<double>;
template class GssaLayer<float>;
template class GssaLayer<double>;
template class SmFfnLayer<float>;
template class SmFfnLayer<double>;
template class TransformerBlock<float>;
template class TransformerBlock<double>;

}  // namespace hsdt
