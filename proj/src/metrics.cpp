// SPDX-License-Identifier: Apache-2.0
#include "hsdt/metrics.hpp"

#include <cmath>
#include <vector>

namespace hsdt {
namespace {

struct Dims {
  std::size_t h, w, d;
};

template <typename T>
Dims check_pair(const Tensor<T>& ref, const Tensor<T>& est, const char* what) {
  if (ref.shape() != est.shape()) {
    throw ShapeError(std::string(what) + ": shape " + shape_str(ref.shape()) + " vs " +
                     shape_str(est.shape()));
  }
  if (ref.rank() == 2) return {ref.dim(0), ref.dim(1), 1};
  if (ref.rank() != 3) throw ShapeError(std::string(what) + ": expected [H,W,D] or [H,W]");
  return {ref.dim(0), ref.dim(1), ref.dim(2)};
}

std::vector<double> gaussian_window(std::size_t n, double sigma) {
  std::vector<double> g(n);
  const double c = (static_cast<double>(n) - 1.0) / 2.0;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) - c;
    g[i] = std::exp(-t * t / (2.0 * sigma * sigma));
    total += g[i];
  }
  for (auto& v : g) v /= total;
  return g;
}

/// Separable "valid" filtering of an h x w plane.
std::vector<double> filter_valid(const std::vector<double>& img, std::size_t h, std::size_t w,
                                 const std::vector<double>& g) {
  const std::size_t n = g.size(), oh = h - n + 1, ow = w - n + 1;
  std::vector<double> rows(h * ow, 0.0);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < ow; ++c) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += g[k] * img[r * w + c + k];
      rows[r * ow + c] = s;
    }
  std::vector<double> out(oh * ow, 0.0);
  for (std::size_t r = 0; r < oh; ++r)
    for (std::size_t c = 0; c < ow; ++c) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += g[k] * rows[(r + k) * ow + c];
      out[r * ow + c] = s;
    }
  return out;
}

}  // namespace

template <typename T>
double psnr(const Tensor<T>& ref, const Tensor<T>& est, double data_range) {
  const Dims s = check_pair(ref, est, "psnr");
  if (!(data_range > 0.0)) throw ContractError("psnr: data_range must be > 0");
  double total = 0.0;
  for (std::size_t b = 0; b < s.d; ++b) {
    double se = 0.0;
    for (std::size_t p = 0; p < s.h * s.w; ++p) {
      const double e = static_cast<double>(ref[p * s.d + b]) - static_cast<double>(est[p * s.d + b]);
      se += e * e;
    }
    const double mse = se / static_cast<double>(s.h * s.w);
    total += mse == 0.0 ? kPsnrCap
                        : std::min(kPsnrCap, 10.0 * std::log10(data_range * data_range / mse));
  }
  return total / static_cast<double>(s.d);
}

template <typename T>
double ssim(const Tensor<T>& ref, const Tensor<T>& est, const SsimOptions& o) {
  const Dims s = check_pair(ref, est, "ssim");
  if (o.window < 1 || s.h < o.window || s.w < o.window) {
    throw ShapeError("ssim: image " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                     " is smaller than the " + std::to_string(o.window) + "-pixel window");
  }
  const auto g = gaussian_window(o.window, o.sigma);
  const double c1 = (o.k1 * o.data_range) * (o.k1 * o.data_range);
  const double c2 = (o.k2 * o.data_range) * (o.k2 * o.data_range);
  const std::size_t n = s.h * s.w;
  double total = 0.0;
  std::vector<double> a(n), b(n), aa(n), bb(n), ab(n);
  for (std::size_t band = 0; band < s.d; ++band) {
    for (std::size_t p = 0; p < n; ++p) {
      a[p] = static_cast<double>(ref[p * s.d + band]);
      b[p] = static_cast<double>(est[p * s.d + band]);
      aa[p] = a[p] * a[p];
      bb[p] = b[p] * b[p];
      ab[p] = a[p] * b[p];
    }
    const auto mu_a = filter_valid(a, s.h, s.w, g), mu_b = filter_valid(b, s.h, s.w, g);
    const auto e_aa = filter_valid(aa, s.h, s.w, g), e_bb = filter_valid(bb, s.h, s.w, g);
    const auto e_ab = filter_valid(ab, s.h, s.w, g);
    double band_sum = 0.0;
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
      const double ma = mu_a[i], mb = mu_b[i];
      const double va = e_aa[i] - ma * ma, vb = e_bb[i] - mb * mb, cov = e_ab[i] - ma * mb;
      band_sum += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total += band_sum / static_cast<double>(mu_a.size());
  }
  return total / static_cast<double>(s.d);
}

template <typename T>
SamResult sam_detail(const Tensor<T>& ref, const Tensor<T>& est) {
  const Dims s = check_pair(ref, est, "sam");
  SamResult r;
  double total = 0.0;
  std::size_t counted = 0;
  std::vector<double> u(s.d), v(s.d);
  for (std::size_t p = 0; p < s.h * s.w; ++p) {
    double nu = 0.0, nv = 0.0;
    for (std::size_t b = 0; b < s.d; ++b) {
      u[b] = static_cast<double>(ref[p * s.d + b]);
      v[b] = static_cast<double>(est[p * s.d + b]);
      nu += u[b] * u[b];
      nv += v[b] * v[b];
    }
    if (nu == 0.0 || nv == 0.0) {
      ++r.skipped;
      continue;
    }
    nu = std::sqrt(nu);
    nv = std::sqrt(nv);
    // Angle between unit vectors as 2*atan2(|u-v|, |u+v|); accurate near 0 and pi, unlike acos.
    double dm = 0.0, dp = 0.0;
    for (std::size_t b = 0; b < s.d; ++b) {
      const double x = u[b] / nu, y = v[b] / nv;
      dm += (x - y) * (x - y);
      dp += (x + y) * (x + y);
    }
    total += 2.0 * std::atan2(std::sqrt(dm), std::sqrt(dp));
    ++counted;
  }
  if (counted == 0) throw ContractError("sam: every pixel has an all-zero spectrum");
  r.mean = total / static_cast<double>(counted);
  return r;
}

nlohmann::json MetricReport::to_json() const {
  return {{"psnr", psnr}, {"ssim", ssim}, {"sam", sam}, {"sam_skipped_pixels", sam_skipped}};
}

template <typename T>
MetricReport evaluate(const Tensor<T>& ref, const Tensor<T>& est) {
  MetricReport m;
  m.psnr = psnr(ref, est);
  m.ssim = ssim(ref, est);
  const auto s = sam_detail(ref, est);
  m.sam = s.mean;
  m.sam_skipped = s.skipped;
  return m;
}

#define HSDT_INSTANTIATE_METRICS(T)                                            \
  template double psnr(const Tensor<T>&, const Tensor<T>&, double);            \
  template double ssim(const Tensor<T>&, const Tensor<T>&, const SsimOptions&); \
  template SamResult sam_detail(const Tensor<T>&, const Tensor<T>&);           \
  template MetricReport evaluate(const Tensor<T>&, const Tensor<T>&);

HSDT_INSTANTIATE_METRICS(float)
HSDT_INSTANTIATE_METRICS(double)

}  // namespace hsdt
