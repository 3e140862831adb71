// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

#include "hsdt/tensor.hpp"
#include "json.hpp"

namespace hsdt {

inline constexpr double kPsnrCap = 100.0;

/// Band-averaged PSNR in dB; bands with zero error contribute kPsnrCap.
template <typename T>
double psnr(const Tensor<T>& ref, const Tensor<T>& est, double data_range = 1.0);

struct SsimOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 1.0;
};

/// Gaussian-windowed SSIM over every position where the window fits, averaged over pixels
/// and then bands.
template <typename T>
double ssim(const Tensor<T>& ref, const Tensor<T>& est, const SsimOptions& options = {});

struct SamResult {
  double mean = 0.0;           // radians
  std::size_t skipped = 0;     // pixels where either spectrum is all zeros
};

/// Mean spectral angle over pixels.
template <typename T>
SamResult sam_detail(const Tensor<T>& ref, const Tensor<T>& est);

template <typename T>
double sam(const Tensor<T>& ref, const Tensor<T>& est) {
  return sam_detail(ref, est).mean;
}

struct MetricReport {
  double psnr = 0.0;
  double ssim = 0.0;
  double sam = 0.0;
  std::size_t sam_skipped = 0;

  nlohmann::json to_json() const;
};

template <typename T>
MetricReport evaluate(const Tensor<T>& ref, const Tensor<T>& est);

}  // namespace hsdt
