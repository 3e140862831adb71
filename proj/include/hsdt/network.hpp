// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "hsdt/binary_io.hpp"
#include "hsdt/blocks.hpp"

namespace hsdt {

/// Raised when spatial extents are not divisible by the network's total downsampling.
class PaddingRequiredError : public ShapeError {
 public:
  using ShapeError::ShapeError;
};

struct HsdtConfig {
  std::size_t base_channels = 30;
  std::size_t n_scales = 3;
  std::size_t extra_inner_blocks = 0;
  std::size_t d_train = 31;
  std::size_t input_channels = 1;  // 2 adds a noise-level map channel
  S3ConvVariant variant = S3ConvVariant::kParallel2;

  void validate() const;
  std::size_t spatial_divisor() const { return std::size_t{1} << (n_scales - 1); }

  /// Built-in sizes: "hsdt-s", "hsdt-m" (double width), "hsdt-l" (hsdt-m plus one inner block).
  static HsdtConfig preset(const std::string& name);
};

enum class AttentionPolicy { kSelf, kCross, kAlternate };

struct ForwardOptions {
  NormMode norm = NormMode::kEval;
  AttentionPolicy attention = AttentionPolicy::kSelf;
  bool fast_attention = true;
  /// Used by kAlternate: cross-attention is drawn with this probability, one draw per forward.
  double cross_probability = 0.5;
  Rng* rng = nullptr;
};

/// U-shaped encoder/decoder: head block, (n_scales - 1) stride-2 encoder blocks, optional
/// inner blocks, (n_scales - 1) decoder stages of spatial x2 trilinear upsampling plus a
/// block, additive skips at every level, a 1x1x1 tail conv and a global input residual.
template <typename T>
class HsdtModel {
 public:
  using scalar_type = T;

  HsdtModel(const HsdtConfig& config, std::uint64_t seed);

  const HsdtConfig& config() const { return config_; }

  /// hsi is [H,W,D] or [N,H,W,D]; noise_map (required iff input_channels == 2) matches it.
  /// Returns hsi + predicted residual with the same shape.
  Var<T> forward(const Var<T>& hsi, const std::optional<Var<T>>& noise_map, Tape<T>* tape,
                 const ForwardOptions& options) const;

  /// Untracked eval-mode forward.
  Tensor<T> denoise(const Tensor<T>& hsi, const Tensor<T>* noise_map = nullptr,
                    AttentionPolicy attention = AttentionPolicy::kSelf) const;

  /// Attention maps of every block for one untracked eval forward, in execution order.
  std::vector<std::pair<std::string, Tensor<T>>> attention_maps(
      const Tensor<T>& hsi, const Tensor<T>* noise_map, AttentionMode mode) const;

  void collect(std::vector<Parameter<T>*>& out);
  std::vector<Parameter<T>*> parameters();

  TransformerBlock<T> head;
  std::vector<TransformerBlock<T>> encoder;
  std::vector<TransformerBlock<T>> inner;
  std::vector<TransformerBlock<T>> decoder;
  Parameter<T> tail_weight;  // [1,1,1,C0,1], zero at initialisation
  Parameter<T> tail_bias;    // [1]

 private:
  HsdtModel(const HsdtConfig& config, Rng rng);

  Var<T> run(const Var<T>& hsi, const std::optional<Var<T>>& noise_map, Tape<T>* tape,
             const ForwardOptions& options,
             std::vector<std::pair<std::string, Tensor<T>>>* maps) const;

  HsdtConfig config_;
};

template <typename T>
HsdtModel<T> build_model(const HsdtConfig& config, std::uint64_t seed) {
  return HsdtModel<T>(config, seed);
}

/// Weight file: "HSDTW001", u32 entry count, then per entry u16 name length, UTF-8 name,
/// u8 rank, rank x u32 extents, float32 values; all integers and floats little-endian.
template <typename T>
void save_weights(HsdtModel<T>& model, std::ostream& sink);
template <typename T>
HsdtModel<T> load_weights(std::istream& source, const HsdtConfig& config);

template <typename T>
void save_weights_file(HsdtModel<T>& model, const std::string& path);
template <typename T>
HsdtModel<T> load_weights_file(const std::string& path, const HsdtConfig& config);

/// Parses a weight section from an open stream into the given model, validating every name
/// and shape; the model is left untouched on error.
template <typename T>
void read_weight_section(std::istream& source, HsdtModel<T>& model);

}  // namespace hsdt
