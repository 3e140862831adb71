// SPDX-License-Identifier: Apache-2.0
#include "hsdt/noise.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace hsdt {
namespace {

struct Cube {
  std::size_t h, w, d;
};

template <typename T>
Cube cube_of(const Tensor<T>& x, const char* what) {
  if (x.rank() != 3) {
    throw ShapeError(std::string(what) + ": expected [H,W,D], got " + shape_str(x.shape()));
  }
  return {x.dim(0), x.dim(1), x.dim(2)};
}

template <typename T>
void require_finite(const Tensor<T>& x, const char* what) {
  for (T v : x.data()) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw ContractError(std::string(what) + ": input contains non-finite values");
    }
  }
}

/// First `k` entries of a uniformly random permutation of 0..n-1.
std::vector<std::size_t> pick(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[rng.uniform_int(i, n - 1)]);
  idx.resize(k);
  return idx;
}

template <typename T>
void band_gaussian(Tensor<T>& y, const Cube& c, std::size_t band, double sigma_255, Rng& rng) {
  const double s = sigma_255 / 255.0;
  for (std::size_t p = 0; p < c.h * c.w; ++p) {
    y[p * c.d + band] += static_cast<T>(s * rng.normal());
  }
}

template <typename T>
void stripe(Tensor<T>& y, const Cube& c, std::size_t band, const NoiseSpec& spec, Rng& rng,
            BandLog& log) {
  const auto [lo, hi] = column_count_range(c.w, spec.column_lo, spec.column_hi);
  auto cols = pick(c.w, rng.uniform_int(lo, hi), rng);
  std::sort(cols.begin(), cols.end());
  for (auto col : cols) {
    const double offset = rng.uniform(spec.stripe_lo, spec.stripe_hi);
    for (std::size_t r = 0; r < c.h; ++r) y[(r * c.w + col) * c.d + band] += static_cast<T>(offset);
    log.stripe_offsets.push_back(offset);
  }
  log.columns = std::move(cols);
  log.corruptions.emplace_back("stripe");
}

template <typename T>
void deadline(Tensor<T>& y, const Cube& c, std::size_t band, const NoiseSpec& spec, Rng& rng,
              BandLog& log) {
  const auto [lo, hi] = column_count_range(c.w, spec.column_lo, spec.column_hi);
  auto cols = pick(c.w, rng.uniform_int(lo, hi), rng);
  std::sort(cols.begin(), cols.end());
  for (auto col : cols) {
    for (std::size_t r = 0; r < c.h; ++r) y[(r * c.w + col) * c.d + band] = T{0};
  }
  log.columns = std::move(cols);
  log.corruptions.emplace_back("deadline");
}

template <typename T>
void impulse(Tensor<T>& y, const Cube& c, std::size_t band, const NoiseSpec& spec, Rng& rng,
             BandLog& log) {
  const auto& set = spec.impulse_densities;
  const double density = set[rng.uniform_int(0, set.size() - 1)];
  std::size_t hits = 0;
  for (std::size_t p = 0; p < c.h * c.w; ++p) {
    if (rng.uniform() < density) {
      y[p * c.d + band] = rng.uniform() < 0.5 ? T{0} : T{1};
      ++hits;
    }
  }
  log.impulse_density = density;
  log.impulse_voxels = hits;
  log.corruptions.emplace_back("impulse");
}

}  // namespace

const char* to_string(NoiseKind kind) {
  switch (kind) {
    case NoiseKind::kGaussian: return "gaussian";
    case NoiseKind::kGaussianBlind: return "gaussian_blind";
    case NoiseKind::kNonIid: return "noniid";
    case NoiseKind::kStripe: return "stripe";
    case NoiseKind::kDeadline: return "deadline";
    case NoiseKind::kImpulse: return "impulse";
    case NoiseKind::kMixture: return "mixture";
  }
  return "?";
}

NoiseKind parse_noise_kind(const std::string& name) {
  for (auto k : {NoiseKind::kGaussian, NoiseKind::kGaussianBlind, NoiseKind::kNonIid,
                 NoiseKind::kStripe, NoiseKind::kDeadline, NoiseKind::kImpulse,
                 NoiseKind::kMixture}) {
    if (name == to_string(k)) return k;
  }
  if (name == "blind") return NoiseKind::kGaussianBlind;
  throw ContractError("unknown noise kind '" + name + "'");
}

void NoiseSpec::validate() const {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!(sigma >= 0.0)) throw ContractError("noise: sigma must be >= 0");
  if (!(blind_lo >= 0.0) || !(blind_hi >= blind_lo)) {
    throw ContractError("noise: blind range must satisfy 0 <= lo <= hi");
  }
  if (band_sigmas.empty()) throw ContractError("noise: band sigma set is empty");
  for (double s : band_sigmas)
    if (!(s >= 0.0)) throw ContractError("noise: band sigmas must be >= 0");
  if (!in_unit(band_fraction) || !in_unit(column_lo) || !in_unit(column_hi) ||
      column_lo > column_hi) {
    throw ContractError("noise: band/column fractions must lie in [0, 1] with lo <= hi");
  }
  if (stripe_lo > stripe_hi) throw ContractError("noise: stripe range must satisfy lo <= hi");
  if (impulse_densities.empty()) throw ContractError("noise: impulse intensity set is empty");
  for (double p : impulse_densities)
    if (!in_unit(p)) throw ContractError("noise: impulse densities must lie in [0, 1]");
}

NoiseSpec NoiseSpec::gaussian(double sigma, std::uint64_t seed) {
  NoiseSpec s;
  s.kind = NoiseKind::kGaussian;
  s.sigma = sigma;
  s.seed = seed;
  return s;
}

NoiseSpec NoiseSpec::of_kind(NoiseKind kind, std::uint64_t seed) {
  NoiseSpec s;
  s.kind = kind;
  s.seed = seed;
  return s;
}

nlohmann::json DegradationLog::to_json() const {
  nlohmann::json bands_json = nlohmann::json::array();
  for (std::size_t b = 0; b < bands.size(); ++b) {
    const auto& l = bands[b];
    nlohmann::json j{{"band", b}, {"sigma", l.sigma}, {"corruptions", l.corruptions}};
    if (!l.columns.empty()) j["columns"] = l.columns;
    if (!l.stripe_offsets.empty()) j["stripe_offsets"] = l.stripe_offsets;
    if (l.impulse_density > 0.0) {
      j["impulse_density"] = l.impulse_density;
      j["impulse_voxels"] = l.impulse_voxels;
    }
    bands_json.push_back(std::move(j));
  }
  return {{"kind", to_string(kind)}, {"seed", seed}, {"clamped", false}, {"bands", bands_json}};
}

std::size_t affected_band_count(std::size_t bands, double fraction) {
  const auto n = static_cast<std::size_t>(std::llround(static_cast<double>(bands) * fraction));
  return std::clamp<std::size_t>(n, 1, bands);
}

std::pair<std::size_t, std::size_t> column_count_range(std::size_t width, double lo, double hi) {
  const double w = static_cast<double>(width);
  auto a = static_cast<std::size_t>(std::ceil(lo * w - 1e-9));
  auto b = static_cast<std::size_t>(std::floor(hi * w + 1e-9));
  a = std::clamp<std::size_t>(a, 1, width);
  b = std::clamp<std::size_t>(b, a, width);
  return {a, b};
}

template <typename T>
Tensor<T> apply_gaussian(const Tensor<T>& x, double sigma_255, Rng& rng) {
  if (!(sigma_255 >= 0.0)) throw ContractError("gaussian noise: sigma must be >= 0");
  require_finite(x, "gaussian noise");
  Tensor<T> y = x;
  if (sigma_255 == 0.0) return y;
  const double s = sigma_255 / 255.0;
  for (auto& v : y.data()) v += static_cast<T>(s * rng.normal());
  return y;
}

template <typename T>
Tensor<T> apply_gaussian_blind(const Tensor<T>& x, double lo, double hi, Rng& rng,
                               double* drawn_sigma) {
  if (!(lo >= 0.0) || !(hi >= lo)) {
    throw ContractError("blind gaussian noise: range must satisfy 0 <= lo <= hi");
  }
  const double sigma = rng.uniform(lo, hi);
  if (drawn_sigma) *drawn_sigma = sigma;
  return apply_gaussian(x, sigma, rng);
}

template <typename T>
std::pair<Tensor<T>, DegradationLog> apply_complex(const Tensor<T>& x, const NoiseSpec& spec,
                                                   Rng& rng) {
  spec.validate();
  if (spec.kind == NoiseKind::kGaussian || spec.kind == NoiseKind::kGaussianBlind) {
    throw ContractError(std::string("complex noise: unsupported kind '") + to_string(spec.kind) +
                        "'");
  }
  const Cube c = cube_of(x, "complex noise");
  require_finite(x, "complex noise");

  // Selection draws come from one stream, each band's voxel draws from its own.
  const std::uint64_t base = rng.next_u64();
  Rng select(base, 0);
  auto band_rng = [&](std::size_t band, std::uint64_t phase) {
    return Rng(base, 1 + band * 4 + phase);
  };

  DegradationLog log;
  log.kind = spec.kind;
  log.seed = spec.seed;
  log.bands.resize(c.d);
  Tensor<T> y = x;

  for (std::size_t b = 0; b < c.d; ++b) {
    const auto& set = spec.band_sigmas;
    const double sigma = set[select.uniform_int(0, set.size() - 1)];
    Rng r = band_rng(b, 0);
    band_gaussian(y, c, b, sigma, r);
    log.bands[b].sigma = sigma;
    log.bands[b].corruptions.emplace_back("noniid");
  }

  enum class Extra { kStripe, kDeadline, kImpulse };
  auto corrupt = [&](std::size_t b, Extra e) {
    Rng r = band_rng(b, 1 + static_cast<std::uint64_t>(e));
    switch (e) {
      case Extra::kStripe: stripe(y, c, b, spec, r, log.bands[b]); break;
      case Extra::kDeadline: deadline(y, c, b, spec, r, log.bands[b]); break;
      case Extra::kImpulse: impulse(y, c, b, spec, r, log.bands[b]); break;
    }
  };

  switch (spec.kind) {
    case NoiseKind::kNonIid: break;
    case NoiseKind::kStripe:
    case NoiseKind::kDeadline:
    case NoiseKind::kImpulse: {
      const Extra e = spec.kind == NoiseKind::kStripe     ? Extra::kStripe
                      : spec.kind == NoiseKind::kDeadline ? Extra::kDeadline
                                                          : Extra::kImpulse;
      auto bands = pick(c.d, affected_band_count(c.d, spec.band_fraction), select);
      std::sort(bands.begin(), bands.end());
      for (auto b : bands) corrupt(b, e);
      break;
    }
    case NoiseKind::kMixture: {
      // A random permutation of all bands, cut into consecutive thirds.
      const auto order = pick(c.d, c.d, select);
      const Extra kinds[3] = {Extra::kImpulse, Extra::kStripe, Extra::kDeadline};
      for (std::size_t i = 0; i < c.d; ++i) corrupt(order[i], kinds[(3 * i) / c.d]);
      break;
    }
    default: break;
  }
  return {std::move(y), std::move(log)};
}

template <typename T>
std::pair<Tensor<T>, DegradationLog> apply_noise(const Tensor<T>& x, const NoiseSpec& spec) {
  Rng rng(spec.seed, 0);
  return apply_noise(x, spec, rng);
}

template <typename T>
std::pair<Tensor<T>, DegradationLog> apply_noise(const Tensor<T>& x, const NoiseSpec& spec,
                                                 Rng& rng) {
  spec.validate();
  if (spec.kind == NoiseKind::kGaussian || spec.kind == NoiseKind::kGaussianBlind) {
    double sigma = spec.sigma;
    Tensor<T> y = spec.kind == NoiseKind::kGaussian
                      ? apply_gaussian(x, sigma, rng)
                      : apply_gaussian_blind(x, spec.blind_lo, spec.blind_hi, rng, &sigma);
    DegradationLog log;
    log.kind = spec.kind;
    log.seed = spec.seed;
    const std::size_t d = x.dim(-1);
    log.bands.resize(d);
    for (auto& b : log.bands) {
      b.sigma = sigma;
      if (sigma > 0.0) b.corruptions.emplace_back("gaussian");
    }
    return {std::move(y), std::move(log)};
  }
  return apply_complex(x, spec, rng);
}

#define HSDT_INSTANTIATE_NOISE(T)                                                              \
  template Tensor<T> apply_gaussian(const Tensor<T>&, double, Rng&);                           \
  template Tensor<T> apply_gaussian_blind(const Tensor<T>&, double, double, Rng&, double*);    \
  template std::pair<Tensor<T>, DegradationLog> apply_complex(const Tensor<T>&,                \
                                                              const NoiseSpec&, Rng&);         \
  template std::pair<Tensor<T>, DegradationLog> apply_noise(const Tensor<T>&, const NoiseSpec&); \
  template std::pair<Tensor<T>, DegradationLog> apply_noise(const Tensor<T>&, const NoiseSpec&,  \
                                                            Rng&);

HSDT_INSTANTIATE_NOISE(float)
HSDT_INSTANTIATE_NOISE(double)

}  // namespace hsdt
