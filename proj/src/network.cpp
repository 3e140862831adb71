// SPDX-License-Identifier: Apache-2.0
#include "hsdt/network.hpp"

#include <fstream>
#include <map>
#include <sstream>

namespace hsdt {
namespace {

constexpr char kWeightMagic[8] = {'H', 'S', 'D', 'T', 'W', '0', '0', '1'};

const HsdtConfig& checked(const HsdtConfig& c) {
  c.validate();
  return c;
}

}  // namespace

void HsdtConfig::validate() const {
  if (base_channels < 1) throw ContractError("config: base_channels must be >= 1");
  if (n_scales < 1 || n_scales > 8) throw ContractError("config: n_scales must be in [1, 8]");
  if (d_train < 1) throw ContractError("config: d_train must be >= 1");
  if (input_channels != 1 && input_channels != 2) {
    throw ContractError("config: input_channels must be 1 or 2");
  }
}

HsdtConfig HsdtConfig::preset(const std::string& name) {
  HsdtConfig c;
  if (name == "hsdt-s") return c;
  if (name == "hsdt-m") {
    c.base_channels *= 2;
    return c;
  }
  if (name == "hsdt-l") {
    c.base_channels *= 2;
    c.extra_inner_blocks = 1;
    return c;
  }
  throw ContractError("unknown preset '" + name + "' (expected hsdt-s, hsdt-m or hsdt-l)");
}

template <typename T>
HsdtModel<T>::HsdtModel(const HsdtConfig& config, std::uint64_t seed)
    : HsdtModel(config, Rng(seed, 0x5eed)) {}

template <typename T>
HsdtModel<T>::HsdtModel(const HsdtConfig& c, Rng rng)
    : head(checked(c).variant, c.input_channels, c.base_channels, 1, c.d_train, "head.0", rng),
      tail_weight("tail.0.conv.weight", Tensor<T>::zeros({1, 1, 1, c.base_channels, 1})),
      tail_bias("tail.0.conv.bias", Tensor<T>::zeros({1})),
      config_(c) {
  const std::size_t ch = c.base_channels;
  encoder.reserve(c.n_scales - 1);
  for (std::size_t i = 0; i + 1 < c.n_scales; ++i) {
    encoder.emplace_back(c.variant, ch, ch, 2, c.d_train, "encoder." + std::to_string(i), rng);
  }
  inner.reserve(c.extra_inner_blocks);
  for (std::size_t i = 0; i < c.extra_inner_blocks; ++i) {
    inner.emplace_back(c.variant, ch, ch, 1, c.d_train, "inner." + std::to_string(i), rng);
  }
  decoder.reserve(c.n_scales - 1);
  for (std::size_t i = 0; i + 1 < c.n_scales; ++i) {
    decoder.emplace_back(c.variant, ch, ch, 1, c.d_train, "decoder." + std::to_string(i), rng);
  }
}

template <typename T>
Var<T> HsdtModel<T>::run(const Var<T>& hsi, const std::optional<Var<T>>& noise_map,
                         Tape<T>* tape, const ForwardOptions& options,
                         std::vector<std::pair<std::string, Tensor<T>>>* maps) const {
  const auto& s = hsi.shape();
  if (s.size() != 3 && s.size() != 4) {
    throw ShapeError("model input must be [H,W,D] or [N,H,W,D], got " + shape_str(s));
  }
  const bool batched = s.size() == 4;
  const std::size_t h = s[batched ? 1 : 0], w = s[batched ? 2 : 1], d = s[batched ? 3 : 2];
  const std::size_t div = config_.spatial_divisor();
  if (h % div != 0 || w % div != 0) {
    throw PaddingRequiredError("spatial extents " + std::to_string(h) + "x" + std::to_string(w) +
                               " must be divisible by " + std::to_string(div) +
                               "; pad the input before calling the model");
  }
  if ((config_.input_channels == 2) != noise_map.has_value()) {
    throw ContractError(config_.input_channels == 2
                            ? "model expects a noise-level map as second input channel"
                            : "model was built without a noise-level map input");
  }

  Shape cube = s;
  cube.push_back(1);
  Var<T> x = reshape(hsi, cube);
  if (noise_map) {
    if (noise_map->shape() != s) {
      throw ShapeError("noise map shape " + shape_str(noise_map->shape()) +
                       " differs from input " + shape_str(s));
    }
    x = concat_last(x, reshape(*noise_map, cube));
  }

  BlockMode mode{options.norm, AttentionMode::kSelf, options.fast_attention};
  switch (options.attention) {
    case AttentionPolicy::kSelf: break;
    case AttentionPolicy::kCross: mode.attention = AttentionMode::kCross; break;
    case AttentionPolicy::kAlternate: {
      if (!options.rng) throw ContractError("alternate attention policy requires an rng");
      const bool cross = options.rng->uniform() < options.cross_probability;
      if (cross && d == config_.d_train) mode.attention = AttentionMode::kCross;
      break;
    }
  }

  auto apply = [&](const TransformerBlock<T>& block, const Var<T>& in, const char* stage,
                   std::size_t index) {
    if (!maps) return block.forward(in, tape, mode);
    Tensor<T> attn;
    Var<T> out = block.forward(in, tape, mode, &attn);
    maps->emplace_back(std::string(stage) + "." + std::to_string(index), std::move(attn));
    return out;
  };

  std::vector<Var<T>> skips;
  Var<T> e = apply(head, x, "head", 0);
  skips.push_back(e);
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    e = apply(encoder[i], e, "encoder", i);
    skips.push_back(e);
  }
  skips.pop_back();
  Var<T> z = e;
  for (std::size_t i = 0; i < inner.size(); ++i) z = apply(inner[i], z, "inner", i);
  if (!inner.empty()) z = add(z, e);
  for (std::size_t i = 0; i < decoder.size(); ++i) {
    z = trilinear_upsample(z, Triple{2, 2, 1});
    z = add(apply(decoder[i], z, "decoder", i), skips.back());
    skips.pop_back();
  }
  Var<T> residual = conv3d(z, bind(tape, tail_weight), std::optional<Var<T>>(bind(tape, tail_bias)),
                           Triple{1, 1, 1}, Triple{0, 0, 0});
  return add(hsi, reshape(residual, s));
}

template <typename T>
Var<T> HsdtModel<T>::forward(const Var<T>& hsi, const std::optional<Var<T>>& noise_map,
                             Tape<T>* tape, const ForwardOptions& options) const {
  return run(hsi, noise_map, tape, options, nullptr);
}

template <typename T>
Tensor<T> HsdtModel<T>::denoise(const Tensor<T>& hsi, const Tensor<T>* noise_map,
                                AttentionPolicy attention) const {
  ForwardOptions opts;
  opts.attention = attention;
  std::optional<Var<T>> map;
  if (noise_map) map = Var<T>::constant(*noise_map);
  return run(Var<T>::constant(hsi), map, nullptr, opts, nullptr).value();
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> HsdtModel<T>::attention_maps(
    const Tensor<T>& hsi, const Tensor<T>* noise_map, AttentionMode mode) const {
  ForwardOptions opts;
  opts.attention = mode == AttentionMode::kCross ? AttentionPolicy::kCross : AttentionPolicy::kSelf;
  std::optional<Var<T>> map;
  if (noise_map) map = Var<T>::constant(*noise_map);
  std::vector<std::pair<std::string, Tensor<T>>> maps;
  run(Var<T>::constant(hsi), map, nullptr, opts, &maps);
  return maps;
}

template <typename T>
void HsdtModel<T>::collect(std::vector<Parameter<T>*>& out) {
  head.collect(out);
  for (auto& b : encoder) b.collect(out);
  for (auto& b : inner) b.collect(out);
  for (auto& b : decoder) b.collect(out);
  out.push_back(&tail_weight);
  out.push_back(&tail_bias);
}

template <typename T>
std::vector<Parameter<T>*> HsdtModel<T>::parameters() {
  std::vector<Parameter<T>*> out;
  collect(out);
  return out;
}

// ---------------------------------------------------------------------------------------
// Serialisation

template <typename T>
void save_weights(HsdtModel<T>& model, std::ostream& sink) {
  auto params = model.parameters();
  sink.write(kWeightMagic, sizeof(kWeightMagic));
  binary::put_uint<std::uint32_t>(sink, static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    binary::put_uint<std::uint16_t>(sink, static_cast<std::uint16_t>(p->name.size()));
    sink.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    const auto& shape = p->value.shape();
    binary::put_uint<std::uint8_t>(sink, static_cast<std::uint8_t>(shape.size()));
    for (auto e : shape) binary::put_uint<std::uint32_t>(sink, static_cast<std::uint32_t>(e));
    for (T v : p->value.data()) binary::put_f32(sink, static_cast<float>(v));
  }
  if (!sink) throw FormatError("failed to write weight data");
}

template <typename T>
void read_weight_section(std::istream& source, HsdtModel<T>& model) {
  const std::string magic = binary::get_bytes(source, 8, "weight magic");
  if (magic != std::string(kWeightMagic, 8)) {
    throw FormatError("bad magic in weight file (expected HSDTW001)");
  }
  auto params = model.parameters();
  std::map<std::string, Parameter<T>*> by_name;
  for (auto* p : params) by_name.emplace(p->name, p);

  const auto count = binary::get_uint<std::uint32_t>(source, "entry count");
  std::map<std::string, Tensor<T>> staged;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = binary::get_uint<std::uint16_t>(source, "tensor name length");
    std::string name = binary::get_bytes(source, len, "tensor name");
    const auto rank = binary::get_uint<std::uint8_t>(source, "tensor rank");
    if (rank < 1 || rank > kMaxRank) {
      throw FormatError("tensor '" + name + "' has invalid rank " + std::to_string(rank));
    }
    Shape shape(rank);
    for (auto& e : shape) e = binary::get_uint<std::uint32_t>(source, "tensor extent");
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("unknown tensor '" + name + "' in weight file");
    if (it->second->value.shape() != shape) {
      throw ShapeError("shape mismatch for tensor '" + name + "': file has " + shape_str(shape) +
                       ", model expects " + shape_str(it->second->value.shape()));
    }
    if (staged.count(name)) throw FormatError("duplicate tensor '" + name + "' in weight file");
    Tensor<T> value(shape);
    for (auto& v : value.data()) v = static_cast<T>(binary::get_f32(source, "tensor values"));
    staged.emplace(std::move(name), std::move(value));
  }
  for (const auto& [name, p] : by_name) {
    if (!staged.count(name)) throw FormatError("weight file is missing tensor '" + name + "'");
  }
  for (auto& [name, value] : staged) by_name[name]->value = std::move(value);
}

template <typename T>
HsdtModel<T> load_weights(std::istream& source, const HsdtConfig& config) {
  HsdtModel<T> model(config, 0);
  read_weight_section(source, model);
  return model;
}

template <typename T>
void save_weights_file(HsdtModel<T>& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  save_weights(model, out);
}

template <typename T>
HsdtModel<T> load_weights_file(const std::string& path, const HsdtConfig& config) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "' for reading");
  return load_weights<T>(in, config);
}

#define HSDT_INSTANTIATE_NETWORK(T)                                                   \
  template class HsdtModel<T>;                                                        \
  template void save_weights(HsdtModel<T>&, std::ostream&);                           \
  template HsdtModel<T> load_weights(std::istream&, const HsdtConfig&);               \
  template void save_weights_file(HsdtModel<T>&, const std::string&);                 \
  template HsdtModel<T> load_weights_file(const std::string&, const HsdtConfig&);     \
  template void read_weight_section(std::istream&, HsdtModel<T>&);

HSDT_INSTANTIATE_NETWORK(float)
HSDT_INSTANTIATE_NETWORK(double)

}  // namespace hsdt
