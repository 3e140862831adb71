// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hsdt/rng.hpp"
#include "hsdt/tensor.hpp"
#include "json.hpp"

namespace hsdt {

enum class NoiseKind { kGaussian, kGaussianBlind, kNonIid, kStripe, kDeadline, kImpulse, kMixture };

const char* to_string(NoiseKind kind);
NoiseKind parse_noise_kind(const std::string& name);

/// Declarative degradation. Sigmas are on the 0..255 scale, applied to data in [0, 1].
struct NoiseSpec {
  NoiseKind kind = NoiseKind::kGaussian;
  std::uint64_t seed = 0;

  double sigma = 50.0;                               // kGaussian
  double blind_lo = 10.0, blind_hi = 70.0;           // kGaussianBlind
  std::vector<double> band_sigmas{10, 30, 50, 70};   // non-iid base, drawn per band

  double band_fraction = 1.0 / 3.0;                  // share of bands hit by a complex corruption
  double column_lo = 0.05, column_hi = 0.15;         // share of columns per affected band
  double stripe_lo = -0.25, stripe_hi = 0.25;        // per-column offset
  std::vector<double> impulse_densities{0.1, 0.3, 0.5, 0.7};

  void validate() const;

  static NoiseSpec gaussian(double sigma, std::uint64_t seed);
  static NoiseSpec of_kind(NoiseKind kind, std::uint64_t seed);
};

struct BandLog {
  double sigma = 0.0;  // 0..255 scale, 0 when the band received no Gaussian noise
  std::vector<std::string> corruptions;
  std::vector<std::size_t> columns;     // stripe and deadline columns, ascending
  std::vector<double> stripe_offsets;   // parallel to columns for stripes
  double impulse_density = 0.0;
  std::size_t impulse_voxels = 0;
};

struct DegradationLog {
  NoiseKind kind = NoiseKind::kGaussian;
  std::uint64_t seed = 0;
  std::vector<BandLog> bands;

  nlohmann::json to_json() const;
};

/// y = x + N(0, (sigma_255 / 255)^2) per voxel. x is [H,W,D] (or any cube with bands last).
template <typename T>
Tensor<T> apply_gaussian(const Tensor<T>& x, double sigma_255, Rng& rng);

/// Draws one sigma uniformly from [lo, hi] for the whole image, then applies it.
template <typename T>
Tensor<T> apply_gaussian_blind(const Tensor<T>& x, double lo, double hi, Rng& rng,
                               double* drawn_sigma = nullptr);

/// Non-iid and the complex kinds. Band streams are derived from one draw of `rng`.
template <typename T>
std::pair<Tensor<T>, DegradationLog> apply_complex(const Tensor<T>& x, const NoiseSpec& spec,
                                                   Rng& rng);

/// Any kind, seeded from spec.seed.
template <typename T>
std::pair<Tensor<T>, DegradationLog> apply_noise(const Tensor<T>& x, const NoiseSpec& spec);

/// Any kind, drawing from `rng` (spec.seed is only recorded in the log).
template <typename T>
std::pair<Tensor<T>, DegradationLog> apply_noise(const Tensor<T>& x, const NoiseSpec& spec,
                                                 Rng& rng);

/// Number of bands a complex corruption touches: round(D * fraction), at least 1.
std::size_t affected_band_count(std::size_t bands, double fraction);

/// Inclusive [lo, hi] range of column counts for a band of width w.
std::pair<std::size_t, std::size_t> column_count_range(std::size_t width, double lo, double hi);

}  // namespace hsdt
