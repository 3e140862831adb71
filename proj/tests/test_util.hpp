// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>

#include "hsdt/ops.hpp"
#include "hsdt/rng.hpp"
#include "hsdt/tensor.hpp"

namespace hsdt::testing {

template <typename T = double>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

template <typename T>
Var<T> cst(const Tensor<T>& t) {
  return Var<T>::constant(t);
}

/// Six nested loops over an unbatched [H,W,D,Cin] input.
inline Tensor<double> conv3d_loops(const Tensor<double>& x, const Tensor<double>& k,
                                   const Tensor<double>* bias, Triple s, Triple p) {
  const std::size_t H = x.dim(0), W = x.dim(1), D = x.dim(2), ci = x.dim(3);
  const std::size_t kh = k.dim(0), kw = k.dim(1), kd = k.dim(2), co = k.dim(4);
  const std::size_t oh = (H + 2 * p[0] - kh) / s[0] + 1;
  const std::size_t ow = (W + 2 * p[1] - kw) / s[1] + 1;
  const std::size_t od = (D + 2 * p[2] - kd) / s[2] + 1;
  Tensor<double> out({oh, ow, od, co});
  for (std::size_t h = 0; h < oh; ++h)
    for (std::size_t w = 0; w < ow; ++w)
      for (std::size_t d = 0; d < od; ++d)
        for (std::size_t o = 0; o < co; ++o) {
          double acc = bias ? (*bias)[o] : 0.0;
          for (std::size_t a = 0; a < kh; ++a)
            for (std::size_t b = 0; b < kw; ++b)
              for (std::size_t c = 0; c < kd; ++c) {
                const long ih = static_cast<long>(h * s[0] + a) - static_cast<long>(p[0]);
                const long iw = static_cast<long>(w * s[1] + b) - static_cast<long>(p[1]);
                const long id = static_cast<long>(d * s[2] + c) - static_cast<long>(p[2]);
                if (ih < 0 || iw < 0 || id < 0 || ih >= static_cast<long>(H) ||
                    iw >= static_cast<long>(W) || id >= static_cast<long>(D))
                  continue;
                for (std::size_t i = 0; i < ci; ++i)
                  acc += x.at({std::size_t(ih), std::size_t(iw), std::size_t(id), i}) *
                         k.at({a, b, c, i, o});
              }
          out.at({h, w, d, o}) = acc;
        }
  return out;
}

/// Reorders the band axis (axis 2 of [H,W,D,C] or [H,W,D]): out band i = in band perm[i].
template <typename T>
Tensor<T> permute_bands(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t h = x.dim(0), w = x.dim(1), d = x.dim(2);
  const std::size_t c = x.rank() == 4 ? x.dim(3) : 1;
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t b = 0; b < d; ++b)
        for (std::size_t k = 0; k < c; ++k)
          out[((i * w + j) * d + b) * c + k] = x[((i * w + j) * d + perm[b]) * c + k];
  return out;
}

inline std::vector<std::size_t> random_permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.uniform_int(0, i - 1)]);
  return p;
}

}  // namespace hsdt::testing
