// SPDX-License-Identifier: Apache-2.0
#include "hsdt/pnp.hpp"

#include <cmath>

namespace hsdt {
namespace {

std::size_t reflect(long i, std::size_t n) {
  const long len = static_cast<long>(n);
  while (i < 0 || i >= len) {
    if (i < 0) i = -i - 1;
    if (i >= len) i = 2 * len - i - 1;
  }
  return static_cast<std::size_t>(i);
}

void require_shape(const Tensor<double>& t, const Shape& expected, const char* what) {
  if (t.shape() != expected) {
    throw ShapeError(std::string(what) + ": expected " + shape_str(expected) + ", got " +
                     shape_str(t.shape()));
  }
}

Tensor<double> axpy(double a, const Tensor<double>& x, const Tensor<double>& y) {
  Tensor<double> out = y;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += a * x[i];
  return out;
}

Tensor<double> normal_operator(const DegradationOp& op, double rho, const Tensor<double>& x) {
  Tensor<double> out = op.adjoint(op.forward(x));
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += rho * x[i];
  return out;
}

double cubic_weight(double t) {
  constexpr double a = -0.5;
  t = std::abs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

}  // namespace

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  a.require_same_shape(b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(const Tensor<double>& a) { return std::sqrt(dot(a, a)); }

Tensor<double> IdentityOp::forward(const Tensor<double>& x) const {
  require_shape(x, shape_, "identity operator");
  return x;
}

std::vector<double> sr_blur_kernel(std::size_t size, double sigma) {
  if (size == 0 || !(sigma > 0.0)) throw ContractError("blur kernel needs size >= 1, sigma > 0");
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  std::vector<double> k(size * size);
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i)
    for (std::size_t j = 0; j < size; ++j) {
      const double di = static_cast<double>(i) - c, dj = static_cast<double>(j) - c;
      k[i * size + j] = std::exp(-(di * di + dj * dj) / (2.0 * sigma * sigma));
      total += k[i * size + j];
    }
  for (auto& v : k) v /= total;
  return k;
}

SrOp::SrOp(std::size_t h, std::size_t w, std::size_t d, std::size_t scale)
    : h_(h), w_(w), d_(d), scale_(scale), kernel_(sr_blur_kernel()) {
  if (scale < 1) throw ContractError("sr: scale must be >= 1");
  if (h == 0 || w == 0 || d == 0) throw ShapeError("sr: empty cube");
  if (h % scale != 0 || w % scale != 0) {
    throw ShapeError("sr: extents " + std::to_string(h) + "x" + std::to_string(w) +
                     " are not divisible by scale " + std::to_string(scale));
  }
}

// Both directions walk the same (output pixel, tap) -> source index map, so the adjoint is
// exact by construction.
Tensor<double> SrOp::forward(const Tensor<double>& x) const {
  require_shape(x, input_shape(), "sr forward");
  const std::size_t oh = h_ / scale_, ow = w_ / scale_, k = 8;
  const long phase = scale_ >= 2 ? static_cast<long>(scale_ / 2) - 1 : 0;
  Tensor<double> y(output_shape());
  for (std::size_t r = 0; r < oh; ++r)
    for (std::size_t c = 0; c < ow; ++c)
      for (std::size_t i = 0; i < k; ++i) {
        const std::size_t sr = reflect(static_cast<long>(r * scale_) + phase + static_cast<long>(i) - 3, h_);
        for (std::size_t j = 0; j < k; ++j) {
          const std::size_t sc = reflect(static_cast<long>(c * scale_) + phase + static_cast<long>(j) - 3, w_);
          const double wgt = kernel_[i * k + j];
          const double* src = x.raw() + (sr * w_ + sc) * d_;
          double* dst = y.raw() + (r * ow + c) * d_;
          for (std::size_t b = 0; b < d_; ++b) dst[b] += wgt * src[b];
        }
      }
  return y;
}

Tensor<double> SrOp::adjoint(const Tensor<double>& y) const {
  require_shape(y, output_shape(), "sr adjoint");
  const std::size_t oh = h_ / scale_, ow = w_ / scale_, k = 8;
  const long phase = scale_ >= 2 ? static_cast<long>(scale_ / 2) - 1 : 0;
  Tensor<double> x(input_shape());
  for (std::size_t r = 0; r < oh; ++r)
    for (std::size_t c = 0; c < ow; ++c)
      for (std::size_t i = 0; i < k; ++i) {
        const std::size_t sr = reflect(static_cast<long>(r * scale_) + phase + static_cast<long>(i) - 3, h_);
        for (std::size_t j = 0; j < k; ++j) {
          const std::size_t sc = reflect(static_cast<long>(c * scale_) + phase + static_cast<long>(j) - 3, w_);
          const double wgt = kernel_[i * k + j];
          const double* src = y.raw() + (r * ow + c) * d_;
          double* dst = x.raw() + (sr * w_ + sc) * d_;
          for (std::size_t b = 0; b < d_; ++b) dst[b] += wgt * src[b];
        }
      }
  return x;
}

CassiOp::CassiOp(Tensor<double> mask, std::size_t d, long step) : mask_(std::move(mask)), d_(d) {
  if (step < 0) throw ContractError("cassi: shift step must be >= 0");
  if (mask_.rank() != 2) throw ShapeError("cassi: mask must be [H,W], got " + shape_str(mask_.shape()));
  if (d == 0) throw ShapeError("cassi: band count must be >= 1");
  for (double v : mask_.data()) {
    if (v != 0.0 && v != 1.0) throw ContractError("cassi: mask must be binary");
  }
  h_ = mask_.dim(0);
  w_ = mask_.dim(1);
  step_ = static_cast<std::size_t>(step);
}

Tensor<double> CassiOp::forward(const Tensor<double>& x) const {
  require_shape(x, input_shape(), "cassi forward");
  const std::size_t ow = w_ + (d_ - 1) * step_;
  Tensor<double> y(output_shape());
  for (std::size_t r = 0; r < h_; ++r)
    for (std::size_t c = 0; c < w_; ++c) {
      const double m = mask_[r * w_ + c];
      if (m == 0.0) continue;
      for (std::size_t b = 0; b < d_; ++b) y[r * ow + c + b * step_] += m * x[(r * w_ + c) * d_ + b];
    }
  return y;
}

Tensor<double> CassiOp::adjoint(const Tensor<double>& y) const {
  require_shape(y, output_shape(), "cassi adjoint");
  const std::size_t ow = w_ + (d_ - 1) * step_;
  Tensor<double> x(input_shape());
  for (std::size_t r = 0; r < h_; ++r)
    for (std::size_t c = 0; c < w_; ++c) {
      const double m = mask_[r * w_ + c];
      for (std::size_t b = 0; b < d_; ++b) x[(r * w_ + c) * d_ + b] = m * y[r * ow + c + b * step_];
    }
  return x;
}

Tensor<double> random_mask(std::size_t h, std::size_t w, Rng& rng, double p) {
  Tensor<double> m({h, w});
  for (auto& v : m.data()) v = rng.uniform() < p ? 1.0 : 0.0;
  return m;
}

Tensor<double> bicubic_upsample(const Tensor<double>& x, std::size_t scale) {
  if (x.rank() != 3) throw ShapeError("bicubic_upsample: expected [H,W,D]");
  if (scale < 1) throw ContractError("bicubic_upsample: scale must be >= 1");
  const std::size_t h = x.dim(0), w = x.dim(1), d = x.dim(2);
  const std::size_t oh = h * scale, ow = w * scale;
  struct Taps {
    std::size_t idx[4];
    double wgt[4];
  };
  auto taps = [&](std::size_t n, std::size_t out) {
    std::vector<Taps> t(out);
    for (std::size_t i = 0; i < out; ++i) {
      const double src = (static_cast<double>(i) + 0.5) / static_cast<double>(scale) - 0.5;
      const double f = std::floor(src);
      for (int k = 0; k < 4; ++k) {
        const double pos = f - 1.0 + k;
        t[i].wgt[k] = cubic_weight(src - pos);
        t[i].idx[k] = static_cast<std::size_t>(
            std::clamp(static_cast<long>(pos), 0L, static_cast<long>(n) - 1));
      }
    }
    return t;
  };
  const auto tr = taps(h, oh), tc = taps(w, ow);
  Tensor<double> rows({oh, w, d});
  for (std::size_t r = 0; r < oh; ++r)
    for (int k = 0; k < 4; ++k)
      for (std::size_t c = 0; c < w * d; ++c) rows[r * w * d + c] += tr[r].wgt[k] * x[tr[r].idx[k] * w * d + c];
  Tensor<double> out({oh, ow, d});
  for (std::size_t r = 0; r < oh; ++r)
    for (std::size_t c = 0; c < ow; ++c)
      for (int k = 0; k < 4; ++k)
        for (std::size_t b = 0; b < d; ++b)
          out[(r * ow + c) * d + b] += tc[c].wgt[k] * rows[(r * w + tc[c].idx[k]) * d + b];
  return out;
}

Denoiser identity_denoiser() {
  return [](const Tensor<double>& x, double) { return x; };
}

template <typename T>
Denoiser model_denoiser(const HsdtModel<T>& model) {
  if (model.config().input_channels != 2) {
    throw ContractError("plug-and-play denoiser must take a noise-level map (input_channels = 2)");
  }
  return [&model](const Tensor<double>& x, double sigma) {
    const Tensor<T> in = x.cast<T>();
    const Tensor<T> map(in.shape(), static_cast<T>(sigma));
    return model.denoise(in, &map).template cast<double>();
  };
}

void AdmmOptions::validate() const {
  if (iterations < 1) throw ContractError("admm: iterations must be >= 1");
  if (rho.size() != iterations || sigma.size() != iterations) {
    throw ContractError("admm: rho and sigma schedules must have one entry per iteration");
  }
  for (double r : rho)
    if (!(r > 0.0)) throw ContractError("admm: rho must be > 0");
  for (double s : sigma)
    if (!(s >= 0.0)) throw ContractError("admm: sigma must be >= 0");
  if (cg_iterations < 1) throw ContractError("admm: cg_iterations must be >= 1");
}

std::vector<double> log_schedule(double first, double last, std::size_t n) {
  if (!(first > 0.0) || !(last > 0.0)) throw ContractError("log_schedule: endpoints must be > 0");
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
    out[i] = std::exp(std::log(first) + t * (std::log(last) - std::log(first)));
  }
  return out;
}

AdmmOptions default_admm_options(std::size_t iterations) {
  AdmmOptions o;
  o.iterations = iterations;
  o.sigma = log_schedule(50.0 / 255.0, 5.0 / 255.0, iterations);
  o.rho = log_schedule(0.003, 0.3, iterations);
  o.validate();
  return o;
}

CgResult conjugate_gradient(const DegradationOp& op, double rho, const Tensor<double>& b,
                            Tensor<double> x, std::size_t iterations, double tolerance) {
  require_shape(b, op.input_shape(), "conjugate_gradient rhs");
  require_shape(x, op.input_shape(), "conjugate_gradient start");
  CgResult res;
  const double bnorm = std::max(norm2(b), 1e-300);
  Tensor<double> r = axpy(-1.0, normal_operator(op, rho, x), b);
  Tensor<double> p = r;
  double rr = dot(r, r);
  std::size_t growth = 0;
  double prev = std::sqrt(rr) / bnorm;
  for (std::size_t it = 0; it < iterations && prev > tolerance; ++it) {
    const Tensor<double> ap = normal_operator(op, rho, p);
    const double pap = dot(p, ap);
    if (!(pap > 0.0)) {
      res.residuals.push_back(prev);
      throw DivergenceError("conjugate gradient lost positive curvature at iteration " +
                                std::to_string(it),
                            res.residuals);
    }
    const double alpha = rr / pap;
    x = axpy(alpha, p, x);
    r = axpy(-alpha, ap, r);
    const double rr_new = dot(r, r);
    const double rel = std::sqrt(rr_new) / bnorm;
    res.residuals.push_back(rel);
    growth = rel > prev ? growth + 1 : 0;
    if (growth >= 3 || !std::isfinite(rel)) {
      throw DivergenceError("conjugate gradient residual grew for 3 consecutive iterations (last " +
                                std::to_string(rel) + ")",
                            res.residuals);
    }
    p = axpy(rr_new / rr, p, r);
    rr = rr_new;
    prev = rel;
  }
  res.x = std::move(x);
  return res;
}

Tensor<double> initial_estimate(const DegradationOp& op, const Tensor<double>& y) {
  if (const auto* sr = dynamic_cast<const SrOp*>(&op)) return bicubic_upsample(y, sr->scale());
  if (dynamic_cast<const CassiOp*>(&op)) {
    const Tensor<double> coverage = op.forward(op.adjoint(Tensor<double>::ones(y.shape())));
    Tensor<double> scaled = y;
    for (std::size_t i = 0; i < y.numel(); ++i) scaled[i] = coverage[i] > 0 ? y[i] / coverage[i] : 0.0;
    return op.adjoint(scaled);
  }
  return op.adjoint(y);
}

nlohmann::json AdmmResult::to_json() const {
  return {{"iterations", fidelity.size()},
          {"fidelity", fidelity},
          {"cg_final_residual", cg_final_residual}};
}

AdmmResult admm_restore(const DegradationOp& op, const Tensor<double>& y, const Denoiser& denoiser,
                        const AdmmOptions& o) {
  o.validate();
  require_shape(y, op.output_shape(), "admm observation");
  const Tensor<double> aty = op.adjoint(y);
  Tensor<double> x = initial_estimate(op, y);
  Tensor<double> z = x;
  Tensor<double> u(x.shape());
  AdmmResult res;
  for (std::size_t k = 0; k < o.iterations; ++k) {
    Tensor<double> b = aty;
    for (std::size_t i = 0; i < b.numel(); ++i) b[i] += o.rho[k] * (z[i] - u[i]);
    CgResult cg = conjugate_gradient(op, o.rho[k], b, x, o.cg_iterations, o.cg_tolerance);
    x = std::move(cg.x);
    res.cg_final_residual.push_back(cg.residuals.empty() ? 0.0 : cg.residuals.back());
    res.fidelity.push_back(norm2(axpy(-1.0, y, op.forward(x))));

    Tensor<double> xu = x;
    xu += u;
    z = denoiser(xu, o.sigma[k]);
    require_shape(z, x.shape(), "denoiser output");
    for (std::size_t i = 0; i < u.numel(); ++i) u[i] += x[i] - z[i];
  }
  res.x = std::move(x);
  return res;
}

template Denoiser model_denoiser(const HsdtModel<float>&);
template Denoiser model_denoiser(const HsdtModel<double>&);

}  // namespace hsdt
