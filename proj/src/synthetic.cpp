// SPDX-License-Identifier: Apache-2.0
#include "hsdt/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

namespace hsdt {

Tensor<double> low_rank_hsi(std::size_t h, std::size_t w, std::size_t d, Rng& rng,
                            std::size_t rank) {
  if (rank < 1) throw ContractError("low_rank_hsi: rank must be >= 1");
  constexpr double two_pi = 2.0 * std::numbers::pi;
  // Endmember spectra: a sum of two broad Gaussian bumps over the band axis.
  std::vector<double> spectra(rank * d);
  for (std::size_t r = 0; r < rank; ++r) {
    const double c1 = rng.uniform(), c2 = rng.uniform();
    const double w1 = rng.uniform(0.15, 0.5), w2 = rng.uniform(0.15, 0.5);
    const double a2 = rng.uniform(0.2, 0.8);
    for (std::size_t b = 0; b < d; ++b) {
      const double t = d == 1 ? 0.5 : static_cast<double>(b) / static_cast<double>(d - 1);
      spectra[r * d + b] = std::exp(-0.5 * std::pow((t - c1) / w1, 2)) +
                           a2 * std::exp(-0.5 * std::pow((t - c2) / w2, 2));
    }
  }
  // Abundances: low-frequency sinusoid sums passed through a softmax so they mix convexly.
  struct Wave {
    double fy, fx, phase, amp;
  };
  std::vector<Wave> waves(rank * 3);
  for (auto& wv : waves) {
    wv = {rng.uniform(0.3, 2.5), rng.uniform(0.3, 2.5), rng.uniform(0.0, two_pi), rng.uniform(0.5, 2.0)};
  }
  Tensor<double> x({h, w, d});
  std::vector<double> logits(rank);
  for (std::size_t r0 = 0; r0 < h; ++r0)
    for (std::size_t c0 = 0; c0 < w; ++c0) {
      const double y = static_cast<double>(r0) / static_cast<double>(h);
      const double xx = static_cast<double>(c0) / static_cast<double>(w);
      double total = 0.0;
      for (std::size_t r = 0; r < rank; ++r) {
        double s = 0.0;
        for (std::size_t k = 0; k < 3; ++k) {
          const auto& wv = waves[r * 3 + k];
          s += wv.amp * std::sin(two_pi * (wv.fy * y + wv.fx * xx) + wv.phase);
        }
        logits[r] = std::exp(s);
        total += logits[r];
      }
      for (std::size_t b = 0; b < d; ++b) {
        double v = 0.0;
        for (std::size_t r = 0; r < rank; ++r) v += logits[r] / total * spectra[r * d + b];
        x[(r0 * w + c0) * d + b] = v;
      }
    }
  const auto [lo, hi] = std::minmax_element(x.data().begin(), x.data().end());
  const double mn = *lo, span = std::max(*hi - *lo, 1e-12);
  for (auto& v : x.data()) v = 0.05 + 0.9 * (v - mn) / span;
  return x;
}

}  // namespace hsdt
