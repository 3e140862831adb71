// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hsdt/network.hpp"
#include "hsdt/noise.hpp"
#include "json.hpp"

namespace hsdt {

/// Raised when an optimisation step meets a NaN or infinite value.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LossKind { kMse, kSqrtMse };

const char* to_string(LossKind kind);
LossKind parse_loss_kind(const std::string& name);

inline constexpr double kSqrtMseEpsilon = 1e-12;

/// mse = mean((pred - target)^2); sqrt_mse = sqrt(mse + 1e-12).
template <typename T>
Var<T> loss(const Var<T>& pred, const Var<T>& target, LossKind kind = LossKind::kMse);

template <typename T>
double loss_value(const Tensor<T>& pred, const Tensor<T>& target, LossKind kind = LossKind::kMse);

template <typename T>
struct Moments {
  Tensor<T> m, v;
};

template <typename T>
struct OptimState {
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::map<std::string, Moments<T>> moments;  // keyed by parameter name

  bool operator==(const OptimState& other) const;
};

/// One bias-corrected Adam update over every trainable parameter. A parameter missing from
/// `grads` is treated as having a zero gradient.
template <typename T>
void adam_step(const std::vector<Parameter<T>*>& params, const GradientMap<T>& grads,
               OptimState<T>& state, double lr);

/// Rescales all gradients so their joint L2 norm is at most max_norm; returns the norm
/// before clipping.
template <typename T>
double clip_global_norm(GradientMap<T>& grads, double max_norm);

struct ScheduleStage {
  std::size_t begin = 0;  // first epoch, inclusive
  std::size_t end = 0;    // exclusive
  double lr = 0.0;
  bool warmup = false;    // linear ramp 0 -> lr across the first epoch of this row
};

struct Schedule {
  std::vector<ScheduleStage> stages;

  void validate() const;
  std::size_t total_epochs() const { return stages.empty() ? 0 : stages.back().end; }

  /// Three-stage table (Gaussian 50, blind Gaussian, complex) over 110 epochs; the second
  /// stage opens with a one-epoch warmup.
  static Schedule three_stage();
  /// Same rows with every epoch boundary divided by `divisor` (rounded); rows that would
  /// collapse raise ContractError.
  Schedule scaled(std::size_t divisor) const;
  static Schedule constant(double lr, std::size_t epochs);
};

double lr_at(const Schedule& schedule, std::size_t epoch, std::size_t step_in_epoch,
             std::size_t steps_per_epoch);

struct TrainOptions {
  std::size_t epochs = 1;
  std::size_t steps_per_epoch = 10;
  std::size_t batch = 16;
  std::size_t patch_h = 64;
  std::size_t patch_w = 64;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::kMse;
  std::optional<double> clip_norm;    // global-norm clipping when set
  double cross_probability = 0.5;     // alternate SA/CA policy
  std::optional<Schedule> schedule;   // constant `lr` when absent
  double lr = 1e-3;
  /// Epoch index the schedule is read at when training starts (resume or stage offset).
  std::size_t first_epoch = 0;
};

struct TrainResult {
  std::vector<double> epoch_loss;  // mean loss per epoch
  std::vector<double> step_loss;
  std::vector<double> step_lr;

  nlohmann::json to_json() const;
};

/// Random patches, on-the-fly degradation, alternate attention, Adam. Fully determined by the
/// inputs and options.seed. Every dataset image is [H,W,D] with H, W >= the patch extents.
template <typename T>
TrainResult train_loop(HsdtModel<T>& model, const std::vector<Tensor<T>>& dataset,
                       const NoiseSpec& noise, const TrainOptions& options, OptimState<T>& state);

/// Checkpoint: the weight format followed by "HSDTOPT1", u64 step, f64 beta1, beta2,
/// epsilon, u32 entry count, then per entry u16 name length, name, u8 rank, u32 extents,
/// f64 first moments, f64 second moments.
template <typename T>
void save_optimizer(const OptimState<T>& state, std::ostream& sink);
template <typename T>
OptimState<T> load_optimizer(std::istream& source);

template <typename T>
void save_checkpoint(HsdtModel<T>& model, const OptimState<T>& state, const std::string& path);
template <typename T>
void load_checkpoint(const std::string& path, HsdtModel<T>& model, OptimState<T>& state);

}  // namespace hsdt
