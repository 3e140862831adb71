// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "hsdt/io.hpp"
#include "hsdt/network.hpp"
#include "hsdt/noise.hpp"
#include "hsdt/train.hpp"

namespace hsdt::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Runs one subcommand. argv[0] is the program name.
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// "hsdt-s" / "hsdt-m" / "hsdt-l", or a key=value file. A file may name a `preset` and then
/// override base_channels, n_scales, extra_inner_blocks, d_train, input_channels, variant.
HsdtConfig model_config_from(const KeyValueConfig& kv);
HsdtConfig resolve_model_config(const std::string& preset_or_path);
KeyValueConfig load_config_arg(const std::string& preset_or_path);

/// Training keys read from the same file: noise, sigma, blind_lo, blind_hi, epochs,
/// steps_per_epoch, batch, patch, patch_h, patch_w, lr, loss, clip_norm, cross_probability,
/// schedule (constant | three_stage), schedule_divisor, first_epoch.
TrainOptions train_options_from(const KeyValueConfig& kv, std::uint64_t seed);
NoiseSpec noise_spec_from(const KeyValueConfig& kv, std::uint64_t seed);

}  // namespace hsdt::cli
