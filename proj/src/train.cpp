// SPDX-License-Identifier: Apache-2.0
#include "hsdt/train.hpp"

#include <cmath>
#include <fstream>

namespace hsdt {
namespace {

constexpr char kOptMagic[8] = {'H', 'S', 'D', 'T', 'O', 'P', 'T', '1'};

template <typename T>
void require_finite(const Tensor<T>& g, const std::string& name) {
  for (T v : g.data()) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw NumericalError("non-finite gradient for parameter '" + name + "'");
    }
  }
}

}  // namespace

const char* to_string(LossKind kind) { return kind == LossKind::kMse ? "mse" : "sqrt_mse"; }

LossKind parse_loss_kind(const std::string& name) {
  if (name == "mse") return LossKind::kMse;
  if (name == "sqrt_mse" || name == "rmse") return LossKind::kSqrtMse;
  throw ContractError("unknown loss '" + name + "' (expected mse or sqrt_mse)");
}

template <typename T>
Var<T> loss(const Var<T>& pred, const Var<T>& target, LossKind kind) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("loss: prediction " + shape_str(pred.shape()) + " vs target " +
                     shape_str(target.shape()));
  }
  const Var<T> diff = sub(pred, target);
  const Var<T> mse = mean(mul(diff, diff));
  return kind == LossKind::kMse ? mse : sqrt_eps(mse, static_cast<T>(kSqrtMseEpsilon));
}

template <typename T>
double loss_value(const Tensor<T>& pred, const Tensor<T>& target, LossKind kind) {
  pred.require_same_shape(target, "loss");
  double se = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(pred.numel());
  return kind == LossKind::kMse ? mse : std::sqrt(mse + kSqrtMseEpsilon);
}

template <typename T>
bool OptimState<T>::operator==(const OptimState& other) const {
  if (step != other.step || beta1 != other.beta1 || beta2 != other.beta2 ||
      epsilon != other.epsilon || moments.size() != other.moments.size()) {
    return false;
  }
  for (const auto& [name, mo] : moments) {
    auto it = other.moments.find(name);
    if (it == other.moments.end() || !(mo.m == it->second.m) || !(mo.v == it->second.v)) {
      return false;
    }
  }
  return true;
}

template <typename T>
void adam_step(const std::vector<Parameter<T>*>& params, const GradientMap<T>& grads,
               OptimState<T>& state, double lr) {
  for (const auto* p : params) {
    if (!p->trainable) continue;
    auto g = grads.find(p);
    if (g != grads.end()) {
      p->value.require_same_shape(g->second, p->name.c_str());
      require_finite(g->second, p->name);
    }
  }
  const std::uint64_t t = ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(t));
  for (auto* p : params) {
    if (!p->trainable) continue;
    auto [it, inserted] = state.moments.try_emplace(p->name);
    Moments<T>& mo = it->second;
    if (inserted) {
      mo.m = Tensor<T>::zeros(p->value.shape());
      mo.v = Tensor<T>::zeros(p->value.shape());
    } else if (mo.m.shape() != p->value.shape()) {
      throw ShapeError("optimizer moments for '" + p->name + "' have shape " +
                       shape_str(mo.m.shape()) + ", parameter has " + shape_str(p->value.shape()));
    }
    auto g = grads.find(p);
    const Tensor<T>* grad = g == grads.end() ? nullptr : &g->second;
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      const double gi = grad ? static_cast<double>((*grad)[i]) : 0.0;
      const double m = state.beta1 * static_cast<double>(mo.m[i]) + (1.0 - state.beta1) * gi;
      const double v = state.beta2 * static_cast<double>(mo.v[i]) + (1.0 - state.beta2) * gi * gi;
      mo.m[i] = static_cast<T>(m);
      mo.v[i] = static_cast<T>(v);
      const double update = lr * (m / bc1) / (std::sqrt(v / bc2) + state.epsilon);
      p->value[i] = static_cast<T>(static_cast<double>(p->value[i]) - update);
    }
    for (T v : p->value.data()) {
      if (!std::isfinite(static_cast<double>(v))) {
        throw NumericalError("parameter '" + p->name + "' became non-finite");
      }
    }
  }
}

template <typename T>
double clip_global_norm(GradientMap<T>& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw ContractError("clip_global_norm: max_norm must be > 0");
  double sq = 0.0;
  for (const auto& [p, g] : grads)
    for (T v : g.data()) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericalError("non-finite gradient norm");
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [p, g] : grads)
      for (auto& v : g.data()) v = static_cast<T>(static_cast<double>(v) * s);
  }
  return norm;
}

// ---------------------------------------------------------------------------------------
// Schedule

void Schedule::validate() const {
  if (stages.empty()) throw ContractError("schedule has no stages");
  std::size_t expected = stages.front().begin;
  if (expected != 0) throw ContractError("schedule must start at epoch 0");
  for (const auto& s : stages) {
    if (s.begin != expected) throw ContractError("schedule rows must be contiguous");
    if (s.end <= s.begin) throw ContractError("schedule rows must span at least one epoch");
    if (!(s.lr >= 0.0)) throw ContractError("schedule learning rates must be >= 0");
    expected = s.end;
  }
}

Schedule Schedule::three_stage() {
  Schedule s;
  s.stages = {
      // Gaussian noise, sigma 50
      {0, 20, 1e-3, false},
      {20, 30, 1e-4, false},
      // Blind Gaussian noise
      {30, 45, 1e-3, true},
      {45, 55, 1e-4, false},
      {55, 60, 5e-5, false},
      {60, 65, 1e-5, false},
      {65, 75, 5e-6, false},
      {75, 80, 1e-6, false},
      // Complex noise
      {80, 90, 1e-3, false},
      {90, 95, 5e-4, false},
      {95, 100, 1e-4, false},
      {100, 105, 5e-5, false},
      {105, 110, 1e-5, false},
  };
  return s;
}

Schedule Schedule::scaled(std::size_t divisor) const {
  if (divisor == 0) throw ContractError("schedule divisor must be >= 1");
  Schedule out = *this;
  auto div = [&](std::size_t e) {
    return static_cast<std::size_t>(std::llround(static_cast<double>(e) / static_cast<double>(divisor)));
  };
  for (auto& s : out.stages) {
    s.begin = div(s.begin);
    s.end = div(s.end);
  }
  out.validate();
  return out;
}

Schedule Schedule::constant(double lr, std::size_t epochs) {
  Schedule s;
  s.stages = {{0, epochs, lr, false}};
  s.validate();
  return s;
}

double lr_at(const Schedule& schedule, std::size_t epoch, std::size_t step_in_epoch,
             std::size_t steps_per_epoch) {
  if (steps_per_epoch == 0) throw ContractError("lr_at: steps_per_epoch must be >= 1");
  if (step_in_epoch >= steps_per_epoch) {
    throw ContractError("lr_at: step " + std::to_string(step_in_epoch) + " outside an epoch of " +
                        std::to_string(steps_per_epoch) + " steps");
  }
  for (const auto& s : schedule.stages) {
    if (epoch < s.begin || epoch >= s.end) continue;
    if (s.warmup && epoch == s.begin) {
      return s.lr * static_cast<double>(step_in_epoch) / static_cast<double>(steps_per_epoch);
    }
    return s.lr;
  }
  throw ContractError("lr_at: epoch " + std::to_string(epoch) + " is outside the schedule (" +
                      std::to_string(schedule.total_epochs()) + " epochs)");
}

// ---------------------------------------------------------------------------------------
// Training loop

nlohmann::json TrainResult::to_json() const {
  return {{"epoch_loss", epoch_loss}, {"step_loss", step_loss}, {"step_lr", step_lr}};
}

template <typename T>
TrainResult train_loop(HsdtModel<T>& model, const std::vector<Tensor<T>>& dataset,
                       const NoiseSpec& noise, const TrainOptions& o, OptimState<T>& state) {
  if (dataset.empty()) throw ContractError("train_loop: dataset is empty");
  if (o.batch == 0 || o.steps_per_epoch == 0 || o.patch_h == 0 || o.patch_w == 0) {
    throw ContractError("train_loop: batch, steps_per_epoch and patch must be >= 1");
  }
  noise.validate();
  if (o.schedule) o.schedule->validate();
  const std::size_t bands = dataset.front().rank() == 3 ? dataset.front().dim(2) : 0;
  for (const auto& img : dataset) {
    if (img.rank() != 3 || img.dim(2) != bands) {
      throw ShapeError("train_loop: every image must be [H,W,D] with one common D");
    }
    if (img.dim(0) < o.patch_h || img.dim(1) < o.patch_w) {
      throw ShapeError("train_loop: image " + shape_str(img.shape()) + " smaller than patch");
    }
  }
  const bool with_map = model.config().input_channels == 2;
  Rng data_rng(o.seed, 1), noise_rng(o.seed, 2), policy_rng(o.seed, 3);
  auto params = model.parameters();

  const std::size_t ph = o.patch_h, pw = o.patch_w, patch_numel = ph * pw * bands;
  const Shape batch_shape{o.batch, ph, pw, bands};
  TrainResult result;

  for (std::size_t e = 0; e < o.epochs; ++e) {
    double epoch_total = 0.0;
    for (std::size_t s = 0; s < o.steps_per_epoch; ++s) {
      const double lr = o.schedule ? lr_at(*o.schedule, o.first_epoch + e, s, o.steps_per_epoch)
                                   : o.lr;
      Tensor<T> clean(batch_shape), noisy(batch_shape), sigma_map(batch_shape);
      for (std::size_t b = 0; b < o.batch; ++b) {
        const auto& img = dataset[data_rng.uniform_int(0, dataset.size() - 1)];
        const std::size_t r0 = data_rng.uniform_int(0, img.dim(0) - ph);
        const std::size_t c0 = data_rng.uniform_int(0, img.dim(1) - pw);
        Tensor<T> patch({ph, pw, bands});
        for (std::size_t r = 0; r < ph; ++r)
          for (std::size_t c = 0; c < pw; ++c)
            for (std::size_t d = 0; d < bands; ++d)
              patch[(r * pw + c) * bands + d] = img[((r0 + r) * img.dim(1) + c0 + c) * bands + d];
        auto [degraded, log] = apply_noise(patch, noise, noise_rng);
        std::copy(patch.data().begin(), patch.data().end(), clean.data().begin() + b * patch_numel);
        std::copy(degraded.data().begin(), degraded.data().end(),
                  noisy.data().begin() + b * patch_numel);
        if (with_map) {
          for (std::size_t p = 0; p < ph * pw; ++p)
            for (std::size_t d = 0; d < bands; ++d)
              sigma_map[b * patch_numel + p * bands + d] = static_cast<T>(log.bands[d].sigma / 255.0);
        }
      }

      Tape<T> tape;
      ForwardOptions fo;
      fo.norm = NormMode::kTrain;
      fo.attention = AttentionPolicy::kAlternate;
      fo.cross_probability = o.cross_probability;
      fo.rng = &policy_rng;
      std::optional<Var<T>> map;
      if (with_map) map = tape.constant(std::move(sigma_map));
      const Var<T> out = model.forward(tape.constant(std::move(noisy)), map, &tape, fo);
      const Var<T> l = loss(out, tape.constant(std::move(clean)), o.loss);
      const double lv = static_cast<double>(l.value().item());
      if (!std::isfinite(lv)) throw NumericalError("training loss became non-finite");
      GradientMap<T> grads = tape.backward(l);
      if (o.clip_norm) clip_global_norm(grads, *o.clip_norm);
      adam_step(params, grads, state, lr);

      result.step_loss.push_back(lv);
      result.step_lr.push_back(lr);
      epoch_total += lv;
    }
    result.epoch_loss.push_back(epoch_total / static_cast<double>(o.steps_per_epoch));
  }
  return result;
}

// ---------------------------------------------------------------------------------------
// Serialisation

template <typename T>
void save_optimizer(const OptimState<T>& state, std::ostream& sink) {
  sink.write(kOptMagic, sizeof(kOptMagic));
  binary::put_uint<std::uint64_t>(sink, state.step);
  binary::put_f64(sink, state.beta1);
  binary::put_f64(sink, state.beta2);
  binary::put_f64(sink, state.epsilon);
  binary::put_uint<std::uint32_t>(sink, static_cast<std::uint32_t>(state.moments.size()));
  for (const auto& [name, mo] : state.moments) {
    binary::put_uint<std::uint16_t>(sink, static_cast<std::uint16_t>(name.size()));
    sink.write(name.data(), static_cast<std::streamsize>(name.size()));
    binary::put_uint<std::uint8_t>(sink, static_cast<std::uint8_t>(mo.m.rank()));
    for (auto e : mo.m.shape()) binary::put_uint<std::uint32_t>(sink, static_cast<std::uint32_t>(e));
    for (T v : mo.m.data()) binary::put_f64(sink, static_cast<double>(v));
    for (T v : mo.v.data()) binary::put_f64(sink, static_cast<double>(v));
  }
  if (!sink) throw FormatError("failed to write optimizer state");
}

template <typename T>
OptimState<T> load_optimizer(std::istream& source) {
  if (binary::get_bytes(source, 8, "optimizer magic") != std::string(kOptMagic, 8)) {
    throw FormatError("bad magic in optimizer section (expected HSDTOPT1)");
  }
  OptimState<T> st;
  st.step = binary::get_uint<std::uint64_t>(source, "optimizer step");
  st.beta1 = binary::get_f64(source, "beta1");
  st.beta2 = binary::get_f64(source, "beta2");
  st.epsilon = binary::get_f64(source, "epsilon");
  const auto count = binary::get_uint<std::uint32_t>(source, "moment count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = binary::get_uint<std::uint16_t>(source, "moment name length");
    std::string name = binary::get_bytes(source, len, "moment name");
    const auto rank = binary::get_uint<std::uint8_t>(source, "moment rank");
    if (rank < 1 || rank > kMaxRank) throw FormatError("moment '" + name + "' has invalid rank");
    Shape shape(rank);
    for (auto& e : shape) e = binary::get_uint<std::uint32_t>(source, "moment extent");
    Moments<T> mo{Tensor<T>(shape), Tensor<T>(shape)};
    for (auto& v : mo.m.data()) v = static_cast<T>(binary::get_f64(source, "first moment"));
    for (auto& v : mo.v.data()) v = static_cast<T>(binary::get_f64(source, "second moment"));
    if (!st.moments.emplace(name, std::move(mo)).second) {
      throw FormatError("duplicate moment entry '" + name + "'");
    }
  }
  return st;
}

template <typename T>
void save_checkpoint(HsdtModel<T>& model, const OptimState<T>& state, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  save_weights(model, out);
  save_optimizer(state, out);
}

template <typename T>
void load_checkpoint(const std::string& path, HsdtModel<T>& model, OptimState<T>& state) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "' for reading");
  HsdtModel<T> staged = model;
  read_weight_section(in, staged);
  OptimState<T> st = load_optimizer<T>(in);
  for (const auto* p : staged.parameters()) {
    auto it = st.moments.find(p->name);
    if (it != st.moments.end() && it->second.m.shape() != p->value.shape()) {
      throw ShapeError("optimizer moments for '" + p->name + "' do not match the parameter");
    }
  }
  model = std::move(staged);
  state = std::move(st);
}

#define HSDT_INSTANTIATE_TRAIN(T)                                                           \
  template Var<T> loss(const Var<T>&, const Var<T>&, LossKind);                             \
  template double loss_value(const Tensor<T>&, const Tensor<T>&, LossKind);                 \
  template struct OptimState<T>;                                                            \
  template void adam_step(const std::vector<Parameter<T>*>&, const GradientMap<T>&,         \
                          OptimState<T>&, double);                                          \
  template double clip_global_norm(GradientMap<T>&, double);                                \
  template TrainResult train_loop(HsdtModel<T>&, const std::vector<Tensor<T>>&,             \
                                  const NoiseSpec&, const TrainOptions&, OptimState<T>&);   \
  template void save_optimizer(const OptimState<T>&, std::ostream&);                        \
  template OptimState<T> load_optimizer(std::istream&);                                     \
  template void save_checkpoint(HsdtModel<T>&, const OptimState<T>&, const std::string&);   \
  template void load_checkpoint(const std::string&, HsdtModel<T>&, OptimState<T>&);

HSDT_INSTANTIATE_TRAIN(float)
HSDT_INSTANTIATE_TRAIN(double)

}  // namespace hsdt
