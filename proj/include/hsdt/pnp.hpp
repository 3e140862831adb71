// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "hsdt/network.hpp"
#include "hsdt/rng.hpp"
#include "hsdt/tensor.hpp"
#include "json.hpp"

namespace hsdt {

/// Raised when the conjugate-gradient inner solve stops making progress.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::vector<double> residuals)
      : std::runtime_error(what), residuals(std::move(residuals)) {}
  std::vector<double> residuals;
};

/// Linear degradation with its exact adjoint. Inputs are [H,W,D] cubes.
class DegradationOp {
 public:
  virtual ~DegradationOp() = default;
  virtual Tensor<double> forward(const Tensor<double>& x) const = 0;
  virtual Tensor<double> adjoint(const Tensor<double>& y) const = 0;
  virtual Shape input_shape() const = 0;
  virtual Shape output_shape() const = 0;
  virtual std::string kind() const = 0;
};

class IdentityOp final : public DegradationOp {
 public:
  explicit IdentityOp(Shape shape) : shape_(std::move(shape)) {}
  Tensor<double> forward(const Tensor<double>& x) const override;
  Tensor<double> adjoint(const Tensor<double>& y) const override { return forward(y); }
  Shape input_shape() const override { return shape_; }
  Shape output_shape() const override { return shape_; }
  std::string kind() const override { return "identity"; }

 private:
  Shape shape_;
};

/// Normalised 8x8 Gaussian (sigma 3), taps at offsets -3..4 around each output pixel.
std::vector<double> sr_blur_kernel(std::size_t size = 8, double sigma = 3.0);

/// Per-band blur with symmetric (edge-repeating) boundary, then keeps every `scale`-th pixel
/// starting at scale/2 - 1, so each kept sample is centred on its low-resolution cell.
class SrOp final : public DegradationOp {
 public:
  SrOp(std::size_t h, std::size_t w, std::size_t d, std::size_t scale);
  Tensor<double> forward(const Tensor<double>& x) const override;
  Tensor<double> adjoint(const Tensor<double>& y) const override;
  Shape input_shape() const override { return {h_, w_, d_}; }
  Shape output_shape() const override { return {h_ / scale_, w_ / scale_, d_}; }
  std::string kind() const override { return "sr"; }
  std::size_t scale() const { return scale_; }
  const std::vector<double>& kernel() const { return kernel_; }

 private:
  std::size_t h_, w_, d_, scale_;
  std::vector<double> kernel_;
};

/// Coded aperture: band d is masked, shifted right by d * step columns and summed into one
/// [H, W + (D - 1) * step] measurement (stored as [H, W', 1]).
class CassiOp final : public DegradationOp {
 public:
  CassiOp(Tensor<double> mask, std::size_t d, long step = 1);
  Tensor<double> forward(const Tensor<double>& x) const override;
  Tensor<double> adjoint(const Tensor<double>& y) const override;
  Shape input_shape() const override { return {h_, w_, d_}; }
  Shape output_shape() const override { return {h_, w_ + (d_ - 1) * step_, 1}; }
  std::string kind() const override { return "cassi"; }
  const Tensor<double>& mask() const { return mask_; }
  std::size_t step() const { return step_; }

 private:
  Tensor<double> mask_;  // [H, W], entries 0 or 1
  std::size_t h_, w_, d_, step_;
};

/// Bernoulli(p) binary mask of shape [H, W].
Tensor<double> random_mask(std::size_t h, std::size_t w, Rng& rng, double p = 0.5);

/// Bicubic (Keys, a = -0.5) spatial upsampling by an integer factor, half-pixel centres,
/// edge clamping.
Tensor<double> bicubic_upsample(const Tensor<double>& x, std::size_t scale);

/// x + u at noise level sigma (0..1 scale) -> denoised cube.
using Denoiser = std::function<Tensor<double>(const Tensor<double>& x, double sigma)>;

Denoiser identity_denoiser();

/// Wraps a model built with input_channels == 2; the noise map is the constant sigma. The
/// model is held by reference and must outlive the returned function.
template <typename T>
Denoiser model_denoiser(const HsdtModel<T>& model);

struct AdmmOptions {
  std::size_t iterations = 24;
  std::vector<double> rho;    // one penalty per iteration
  std::vector<double> sigma;  // denoiser noise level per iteration (0..1 scale)
  std::size_t cg_iterations = 10;
  double cg_tolerance = 1e-6;

  void validate() const;
};

/// Log-linear ramp from `first` to `last` over n values.
std::vector<double> log_schedule(double first, double last, std::size_t n);
/// Denoiser levels 50/255 -> 5/255 and penalties 0.003 -> 0.3, log-spaced.
AdmmOptions default_admm_options(std::size_t iterations);

struct CgResult {
  Tensor<double> x;
  std::vector<double> residuals;  // relative residual after each iteration
};

/// Solves (A^T A + rho I) x = b from x0.
CgResult conjugate_gradient(const DegradationOp& op, double rho, const Tensor<double>& b,
                            Tensor<double> x0, std::size_t iterations, double tolerance);

struct AdmmResult {
  Tensor<double> x;
  std::vector<double> fidelity;         // |A x - y| after each x-step
  std::vector<double> cg_final_residual;

  nlohmann::json to_json() const;
};

/// Initial estimate: bicubic upsampling for SR, A^T y scaled by the per-measurement coverage
/// for CASSI, A^T y otherwise.
Tensor<double> initial_estimate(const DegradationOp& op, const Tensor<double>& y);

AdmmResult admm_restore(const DegradationOp& op, const Tensor<double>& y, const Denoiser& denoiser,
                        const AdmmOptions& options);

double dot(const Tensor<double>& a, const Tensor<double>& b);
double norm2(const Tensor<double>& a);

}  // namespace hsdt
