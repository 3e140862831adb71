// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

#include "hsdt/rng.hpp"
#include "hsdt/tensor.hpp"

namespace hsdt {

/// Smooth low-rank cube [H,W,D] in [0.05, 0.95]: `rank` endmember spectra mixed by smooth
/// spatial abundance maps. Stands in for real scenes in tests and demos.
Tensor<double> low_rank_hsi(std::size_t h, std::size_t w, std::size_t d, Rng& rng,
                            std::size_t rank = 3);

}  // namespace hsdt
