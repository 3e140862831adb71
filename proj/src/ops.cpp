// SPDX-License-Identifier: Apache-2.0
#include "hsdt/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <numbers>

#include "hsdt/flops.hpp"

namespace hsdt {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstVecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

using detail::input_grad;
using detail::make_result;

template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t, std::size_t rows, std::size_t cols,
                         std::size_t offset = 0) {
  return ConstMatMap<T>(t.raw() + offset, static_cast<Eigen::Index>(rows),
                        static_cast<Eigen::Index>(cols));
}

template <typename T>
MatMap<T> as_matrix(Tensor<T>& t, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
  return MatMap<T>(t.raw() + offset, static_cast<Eigen::Index>(rows),
                   static_cast<Eigen::Index>(cols));
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ShapeError(message);
}

template <typename T>
void require_same(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

}  // namespace

// ---------------------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same(a, b, "add");
  Tensor<T> out = a.value();
  out += b.value();
  FlopScope::add(out.numel());
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t i = 0; i < 2; ++i) {
      if (auto* g = input_grad(self, i)) *g += self.grad;
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same(a, b, "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  FlopScope::add(out.numel());
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) *g += self.grad;
    if (auto* g = input_grad(self, 1)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same(a, b, "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  FlopScope::add(out.numel());
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i] * bv[i];
    }
    if (auto* g = input_grad(self, 1)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= s;
  FlopScope::add(out.numel());
  return make_result<T>(std::move(out), {a}, [s](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += s * self.grad[i];
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T total = 0;
  for (T v : a.value().data()) total += v;
  FlopScope::add(a.value().numel());
  return make_result<T>(Tensor<T>::scalar(total), {a}, [](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      const T up = self.grad[0];
      for (auto& v : g->data()) v += up;
    }
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().numel()));
}

template <typename T>
Var<T> sqrt_eps(const Var<T>& a, T eps) {
  require(a.value().numel() == 1, "sqrt_eps expects a scalar, got " + shape_str(a.shape()));
  const T root = std::sqrt(a.value()[0] + eps);
  return make_result<T>(Tensor<T>::scalar(root), {a}, [](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) (*g)[0] += self.grad[0] / (T(2) * self.value[0]);
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------------------
// Dense products

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  std::size_t batch = 1, m, k, n;
  if (as.size() == 2 && bs.size() == 2) {
    m = as[0], k = as[1], n = bs[1];
    require(bs[0] == k, "matmul: inner extents differ (axis 1 of a = " + std::to_string(k) +
                            ", axis 0 of b = " + std::to_string(bs[0]) + ")");
  } else if (as.size() == 3 && bs.size() == 3) {
    batch = as[0], m = as[1], k = as[2], n = bs[2];
    require(bs[0] == batch, "matmul: batch extents differ (" + std::to_string(batch) + " vs " +
                                std::to_string(bs[0]) + ")");
    require(bs[1] == k, "matmul: inner extents differ (axis 2 of a = " + std::to_string(k) +
                            ", axis 1 of b = " + std::to_string(bs[1]) + ")");
  } else {
    throw ShapeError("matmul: unsupported ranks " + shape_str(as) + " x " + shape_str(bs));
  }
  Shape out_shape = as.size() == 2 ? Shape{m, n} : Shape{batch, m, n};
  Tensor<T> out(out_shape);
  for (std::size_t s = 0; s < batch; ++s) {
    as_matrix(out, m, n, s * m * n).noalias() =
        as_matrix(a.value(), m, k, s * m * k) * as_matrix(b.value(), k, n, s * k * n);
  }
  FlopScope::add(2 * batch * m * k * n);
  return make_result<T>(std::move(out), {a, b}, [batch, m, k, n](Node<T>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    Tensor<T>* ga = input_grad(self, 0);
    Tensor<T>* gb = input_grad(self, 1);
    for (std::size_t s = 0; s < batch; ++s) {
      auto g = as_matrix(std::as_const(self.grad), m, n, s * m * n);
      if (ga) as_matrix(*ga, m, k, s * m * k).noalias() += g * as_matrix(bv, k, n, s * k * n).transpose();
      if (gb) as_matrix(*gb, k, n, s * k * n).noalias() += as_matrix(av, m, k, s * m * k).transpose() * g;
    }
  });
}

template <typename T>
Var<T> transpose_last2(const Var<T>& a) {
  const auto& s = a.shape();
  require(s.size() >= 2, "transpose_last2 needs rank >= 2, got " + shape_str(s));
  const std::size_t p = s[s.size() - 2], q = s[s.size() - 1];
  const std::size_t outer = a.value().numel() / (p * q);
  Shape os = s;
  std::swap(os[os.size() - 2], os[os.size() - 1]);
  Tensor<T> out(os);
  for (std::size_t o = 0; o < outer; ++o) {
    as_matrix(out, q, p, o * p * q) = as_matrix(a.value(), p, q, o * p * q).transpose();
  }
  return make_result<T>(std::move(out), {a}, [outer, p, q](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t o = 0; o < outer; ++o) {
        as_matrix(*g, p, q, o * p * q) += as_matrix(std::as_const(self.grad), q, p, o * p * q).transpose();
      }
    }
  });
}

template <typename T>
Var<T> tile_batch(const Var<T>& a, std::size_t n) {
  require(n >= 1, "tile_batch: n must be >= 1");
  Shape os{n};
  os.insert(os.end(), a.shape().begin(), a.shape().end());
  Tensor<T> out(os);
  const std::size_t len = a.value().numel();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(a.value().raw(), a.value().raw() + len, out.raw() + i * len);
  }
  return make_result<T>(std::move(out), {a}, [n, len](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < len; ++j) (*g)[j] += self.grad[i * len + j];
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const std::optional<Var<T>>& b) {
  require(w.rank() == 2, "linear: weight must be [Cin, Cout], got " + shape_str(w.shape()));
  const std::size_t cin = w.dim(0), cout = w.dim(1);
  require(x.dim(-1) == cin, "linear: channel axis has extent " + std::to_string(x.dim(-1)) +
                                " but weight expects " + std::to_string(cin));
  if (b) {
    require(b->rank() == 1 && b->dim(0) == cout,
            "linear: bias must be [" + std::to_string(cout) + "], got " + shape_str(b->shape()));
  }
  const std::size_t rows = x.value().numel() / cin;
  Shape os = x.shape();
  os.back() = cout;
  Tensor<T> out(os);
  auto y = as_matrix(out, rows, cout);
  y.noalias() = as_matrix(x.value(), rows, cin) * as_matrix(w.value(), cin, cout);
  if (b) y.rowwise() += ConstVecMap<T>(b->value().raw(), cout).transpose();
  FlopScope::add(2 * rows * cin * cout + (b ? rows * cout : 0));
  std::vector<Var<T>> inputs{x, w};
  if (b) inputs.push_back(*b);
  return make_result<T>(std::move(out), std::move(inputs), [rows, cin, cout](Node<T>& self) {
    auto g = as_matrix(std::as_const(self.grad), rows, cout);
    if (auto* gx = input_grad(self, 0))
      as_matrix(*gx, rows, cin).noalias() += g * as_matrix(self.inputs[1]->value, cin, cout).transpose();
    if (auto* gw = input_grad(self, 1))
      as_matrix(*gw, cin, cout).noalias() += as_matrix(self.inputs[0]->value, rows, cin).transpose() * g;
    if (self.inputs.size() > 2) {
      if (auto* gb = input_grad(self, 2)) VecMap<T>(gb->raw(), cout) += g.colwise().sum().transpose();
    }
  });
}

template <typename T>
Var<T> batched_linear(const Var<T>& x, const Var<T>& w) {
  require(w.rank() == 3, "batched_linear: weight must be [N, K, M], got " + shape_str(w.shape()));
  const std::size_t batch = w.dim(0), k = w.dim(1), m = w.dim(2);
  require(x.rank() >= 2 && x.dim(0) == batch,
          "batched_linear: leading axis of x must equal " + std::to_string(batch));
  require(x.dim(-1) == k, "batched_linear: channel axis has extent " + std::to_string(x.dim(-1)) +
                              " but weight expects " + std::to_string(k));
  const std::size_t rows = x.value().numel() / (batch * k);
  Shape os = x.shape();
  os.back() = m;
  Tensor<T> out(os);
  for (std::size_t s = 0; s < batch; ++s) {
    as_matrix(out, rows, m, s * rows * m).noalias() =
        as_matrix(x.value(), rows, k, s * rows * k) * as_matrix(w.value(), k, m, s * k * m);
  }
  FlopScope::add(2 * batch * rows * k * m);
  return make_result<T>(std::move(out), {x, w}, [batch, rows, k, m](Node<T>& self) {
    Tensor<T>* gx = input_grad(self, 0);
    Tensor<T>* gw = input_grad(self, 1);
    for (std::size_t s = 0; s < batch; ++s) {
      auto g = as_matrix(std::as_const(self.grad), rows, m, s * rows * m);
      if (gx) as_matrix(*gx, rows, k, s * rows * k).noalias() += g * as_matrix(self.inputs[1]->value, k, m, s * k * m).transpose();
      if (gw) as_matrix(*gw, k, m, s * k * m).noalias() += as_matrix(self.inputs[0]->value, rows, k, s * rows * k).transpose() * g;
    }
  });
}

template <typename T>
Var<T> slice_last(const Var<T>& x, std::size_t begin, std::size_t count) {
  const std::size_t c = x.dim(-1);
  require(count >= 1 && begin + count <= c,
          "slice_last: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
              ") exceeds channel extent " + std::to_string(c));
  const std::size_t rows = x.value().numel() / c;
  Shape os = x.shape();
  os.back() = count;
  Tensor<T> out(os);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(x.value().raw() + r * c + begin, count, out.raw() + r * count);
  }
  return make_result<T>(std::move(out), {x}, [rows, c, begin, count](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < count; ++j) (*g)[r * c + begin + j] += self.grad[r * count + j];
    }
  });
}

template <typename T>
Var<T> concat_last(const Var<T>& a, const Var<T>& b) {
  Shape sa = a.shape(), sb = b.shape();
  require(sa.size() == sb.size() && std::equal(sa.begin(), sa.end() - 1, sb.begin()),
          "concat_last: leading axes differ " + shape_str(sa) + " vs " + shape_str(sb));
  const std::size_t ca = sa.back(), cb = sb.back(), c = ca + cb;
  const std::size_t rows = a.value().numel() / ca;
  Shape os = sa;
  os.back() = c;
  Tensor<T> out(os);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.value().raw() + r * ca, ca, out.raw() + r * c);
    std::copy_n(b.value().raw() + r * cb, cb, out.raw() + r * c + ca);
  }
  return make_result<T>(std::move(out), {a, b}, [rows, ca, cb, c](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < ca; ++j) (*g)[r * ca + j] += self.grad[r * c + j];
    }
    if (auto* g = input_grad(self, 1)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < cb; ++j) (*g)[r * cb + j] += self.grad[r * c + ca + j];
    }
  });
}

// ---------------------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeometry {
  CubeDims in;
  CubeDims out;
  Triple k, s, p;
  std::size_t cout;
  std::size_t patch() const { return k[0] * k[1] * k[2] * in.c; }
  std::size_t row_len() const { return out.w * out.d; }
};

/// Gathers the receptive fields of output row (n, oh) into a [W'*D', kh*kw*kd*Cin] matrix
/// whose column order matches the row-major [kh,kw,kd,Cin] kernel layout.
template <typename T>
void im2col_row(const T* x, const ConvGeometry& g, std::size_t n, std::size_t oh, T* col) {
  const std::size_t patch = g.patch();
  const auto& in = g.in;
  for (std::size_t ow = 0; ow < g.out.w; ++ow) {
    for (std::size_t od = 0; od < g.out.d; ++od) {
      T* dst = col + (ow * g.out.d + od) * patch;
      for (std::size_t a = 0; a < g.k[0]; ++a) {
        const long ih = static_cast<long>(oh * g.s[0] + a) - static_cast<long>(g.p[0]);
        for (std::size_t b = 0; b < g.k[1]; ++b) {
          const long iw = static_cast<long>(ow * g.s[1] + b) - static_cast<long>(g.p[1]);
          for (std::size_t c = 0; c < g.k[2]; ++c) {
            const long id = static_cast<long>(od * g.s[2] + c) - static_cast<long>(g.p[2]);
            if (ih < 0 || iw < 0 || id < 0 || ih >= static_cast<long>(in.h) ||
                iw >= static_cast<long>(in.w) || id >= static_cast<long>(in.d)) {
              std::fill_n(dst, in.c, T(0));
            } else {
              const T* src = x + (((n * in.h + ih) * in.w + iw) * in.d + id) * in.c;
              std::copy_n(src, in.c, dst);
            }
            dst += in.c;
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_row(const T* col, const ConvGeometry& g, std::size_t n, std::size_t oh, T* dx) {
  const std::size_t patch = g.patch();
  const auto& in = g.in;
  for (std::size_t ow = 0; ow < g.out.w; ++ow) {
    for (std::size_t od = 0; od < g.out.d; ++od) {
      const T* src = col + (ow * g.out.d + od) * patch;
      for (std::size_t a = 0; a < g.k[0]; ++a) {
        const long ih = static_cast<long>(oh * g.s[0] + a) - static_cast<long>(g.p[0]);
        for (std::size_t b = 0; b < g.k[1]; ++b) {
          const long iw = static_cast<long>(ow * g.s[1] + b) - static_cast<long>(g.p[1]);
          for (std::size_t c = 0; c < g.k[2]; ++c) {
            const long id = static_cast<long>(od * g.s[2] + c) - static_cast<long>(g.p[2]);
            if (ih >= 0 && iw >= 0 && id >= 0 && ih < static_cast<long>(in.h) &&
                iw < static_cast<long>(in.w) && id < static_cast<long>(in.d)) {
              T* dst = dx + (((n * in.h + ih) * in.w + iw) * in.d + id) * in.c;
              for (std::size_t ci = 0; ci < in.c; ++ci) dst[ci] += src[ci];
            }
            src += in.c;
          }
        }
      }
    }
  }
}

std::size_t conv_extent(std::size_t len, std::size_t k, std::size_t s, std::size_t p,
                        const char* axis) {
  if (s == 0) throw ShapeError(std::string("conv3d: stride on axis ") + axis + " must be >= 1");
  if (len + 2 * p < k) {
    throw ShapeError(std::string("conv3d: kernel extent ") + std::to_string(k) +
                     " exceeds padded input extent " + std::to_string(len + 2 * p) +
                     " on axis " + axis);
  }
  return (len + 2 * p - k) / s + 1;
}

}  // namespace

template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& kernel, const std::optional<Var<T>>& bias,
              Triple stride, Triple padding) {
  const CubeDims in = cube_dims(x.shape(), "conv3d");
  const auto& ks = kernel.shape();
  require(ks.size() == 5, "conv3d: kernel must be [kh,kw,kd,Cin,Cout], got " + shape_str(ks));
  require(ks[3] == in.c, "conv3d: input channel axis has extent " + std::to_string(in.c) +
                             " but kernel expects " + std::to_string(ks[3]));
  const std::size_t cout = ks[4];
  if (bias) {
    require(bias->rank() == 1 && bias->dim(0) == cout,
            "conv3d: bias must be [" + std::to_string(cout) + "], got " + shape_str(bias->shape()));
  }
  ConvGeometry g;
  g.in = in;
  g.k = {ks[0], ks[1], ks[2]};
  g.s = stride;
  g.p = padding;
  g.cout = cout;
  g.out = {in.n, conv_extent(in.h, g.k[0], stride[0], padding[0], "H"),
           conv_extent(in.w, g.k[1], stride[1], padding[1], "W"),
           conv_extent(in.d, g.k[2], stride[2], padding[2], "D"), cout};

  const bool batched = x.rank() == 5;
  Tensor<T> out(cube_shape(g.out, batched));
  const std::size_t rows = g.row_len(), patch = g.patch();
  std::vector<T> col(rows * patch);
  ConstMatMap<T> kmat(kernel.value().raw(), static_cast<Eigen::Index>(patch),
                      static_cast<Eigen::Index>(cout));
  ConstMatMap<T> colm(col.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(patch));
  for (std::size_t n = 0; n < in.n; ++n) {
    for (std::size_t oh = 0; oh < g.out.h; ++oh) {
      im2col_row(x.value().raw(), g, n, oh, col.data());
      auto y = as_matrix(out, rows, cout, (n * g.out.h + oh) * rows * cout);
      y.noalias() = colm * kmat;
      if (bias) y.rowwise() += ConstVecMap<T>(bias->value().raw(), cout).transpose();
    }
  }
  FlopScope::add(2 * g.out.positions() * patch * cout + (bias ? g.out.positions() * cout : 0));

  std::vector<Var<T>> inputs{x, kernel};
  if (bias) inputs.push_back(*bias);
  return make_result<T>(std::move(out), std::move(inputs), [g](Node<T>& self) {
    const auto& xv = self.inputs[0]->value;
    const auto& kv = self.inputs[1]->value;
    Tensor<T>* gx = input_grad(self, 0);
    Tensor<T>* gk = input_grad(self, 1);
    Tensor<T>* gb = self.inputs.size() > 2 ? input_grad(self, 2) : nullptr;
    const std::size_t rows = g.row_len(), patch = g.patch();
    std::vector<T> col(rows * patch);
    std::vector<T> dcol(gx ? rows * patch : 0);
    ConstMatMap<T> kmat(kv.raw(), static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(g.cout));
    MatMap<T> colm(col.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(patch));
    for (std::size_t n = 0; n < g.in.n; ++n) {
      for (std::size_t oh = 0; oh < g.out.h; ++oh) {
        auto grad_rows = as_matrix(std::as_const(self.grad), rows, g.cout, (n * g.out.h + oh) * rows * g.cout);
        if (gk) {
          im2col_row(xv.raw(), g, n, oh, col.data());
          as_matrix(*gk, patch, g.cout).noalias() += colm.transpose() * grad_rows;
        }
        if (gb) VecMap<T>(gb->raw(), g.cout) += grad_rows.colwise().sum().transpose();
        if (gx) {
          MatMap<T> dcolm(dcol.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(patch));
          dcolm.noalias() = grad_rows * kmat.transpose();
          col2im_row(dcol.data(), g, n, oh, gx->raw());
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------------------
// Nonlinearities

template <typename T>
T sigmoid_value(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
Var<T> softmax(const Var<T>& x, int axis) {
  const std::size_t ax = x.value().normalize_axis(axis);
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[ax];
  Tensor<T> out(s);
  const T* xv = x.value().raw();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = xv[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      T z = 0;
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  }
  FlopScope::add(4 * x.value().numel());
  return make_result<T>(std::move(out), {x}, [outer, inner, len](Node<T>& self) {
    auto* g = input_grad(self, 0);
    if (!g) return;
    const auto& y = self.value;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T dot = 0;
        for (std::size_t j = 0; j < len; ++j) dot += self.grad[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t idx = base + j * inner;
          (*g)[idx] += y[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

template <typename T>
Var<T> activation(const Var<T>& x, Activation kind) {
  Tensor<T> out = x.value();
  if (kind == Activation::kSigmoid) {
    for (auto& v : out.data()) v = sigmoid_value(v);
  } else {
    for (auto& v : out.data()) v = gelu_value(v);
  }
  FlopScope::add(4 * out.numel());
  return make_result<T>(std::move(out), {x}, [kind](Node<T>& self) {
    auto* g = input_grad(self, 0);
    if (!g) return;
    const auto& xv = self.inputs[0]->value;
    if (kind == Activation::kSigmoid) {
      for (std::size_t i = 0; i < g->numel(); ++i) {
        const T y = self.value[i];
        (*g)[i] += self.grad[i] * y * (T(1) - y);
      }
    } else {
      const T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
      for (std::size_t i = 0; i < g->numel(); ++i) {
        const T v = xv[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
        (*g)[i] += self.grad[i] * (cdf + v * pdf);
      }
    }
  });
}

// ---------------------------------------------------------------------------------------
// Pooling and resampling

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const CubeDims dims = cube_dims(x.shape(), "global_avg_pool");
  const bool batched = x.rank() == 5;
  const std::size_t hw = dims.h * dims.w, dc = dims.d * dims.c;
  Tensor<T> out(batched ? Shape{dims.n, dims.d, dims.c} : Shape{dims.d, dims.c});
  const T inv = T(1) / static_cast<T>(hw);
  for (std::size_t n = 0; n < dims.n; ++n) {
    T* o = out.raw() + n * dc;
    for (std::size_t p = 0; p < hw; ++p) {
      const T* src = x.value().raw() + (n * hw + p) * dc;
      for (std::size_t j = 0; j < dc; ++j) o[j] += src[j];
    }
    for (std::size_t j = 0; j < dc; ++j) o[j] *= inv;
  }
  FlopScope::add(dims.n * hw * dc + dims.n * dc);
  return make_result<T>(std::move(out), {x}, [dims, hw, dc, inv](Node<T>& self) {
    auto* g = input_grad(self, 0);
    if (!g) return;
    for (std::size_t n = 0; n < dims.n; ++n) {
      const T* up = self.grad.raw() + n * dc;
      for (std::size_t p = 0; p < hw; ++p) {
        T* dst = g->raw() + (n * hw + p) * dc;
        for (std::size_t j = 0; j < dc; ++j) dst[j] += up[j] * inv;
      }
    }
  });
}

namespace {

struct InterpTap {
  std::size_t i0, i1;
  double frac;
};

std::vector<InterpTap> interp_taps(std::size_t len, std::size_t factor) {
  std::vector<InterpTap> taps(len * factor);
  for (std::size_t i = 0; i < taps.size(); ++i) {
    double src = (static_cast<double>(i) + 0.5) / static_cast<double>(factor) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(len - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, len - 1);
    taps[i] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

/// Linear interpolation along one axis of a contiguous [outer, len, inner] view.
template <typename T>
Var<T> interp_axis(const Var<T>& x, std::size_t axis, std::size_t factor) {
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  auto taps = interp_taps(len, factor);
  Shape os = s;
  os[axis] = len * factor;
  Tensor<T> out(os);
  const std::size_t olen = len * factor;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < olen; ++i) {
      const auto& t = taps[i];
      const T w1 = static_cast<T>(t.frac), w0 = T(1) - w1;
      const T* a = x.value().raw() + (o * len + t.i0) * inner;
      const T* b = x.value().raw() + (o * len + t.i1) * inner;
      T* dst = out.raw() + (o * olen + i) * inner;
      for (std::size_t j = 0; j < inner; ++j) dst[j] = w0 * a[j] + w1 * b[j];
    }
  }
  FlopScope::add(3 * out.numel());
  return make_result<T>(std::move(out), {x}, [taps, outer, inner, len, olen](Node<T>& self) {
    auto* g = input_grad(self, 0);
    if (!g) return;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < olen; ++i) {
        const auto& t = taps[i];
        const T w1 = static_cast<T>(t.frac), w0 = T(1) - w1;
        const T* up = self.grad.raw() + (o * olen + i) * inner;
        T* a = g->raw() + (o * len + t.i0) * inner;
        T* b = g->raw() + (o * len + t.i1) * inner;
        for (std::size_t j = 0; j < inner; ++j) {
          a[j] += w0 * up[j];
          b[j] += w1 * up[j];
        }
      }
    }
  });
}

}  // namespace

template <typename T>
Var<T> trilinear_upsample(const Var<T>& x, Triple factors) {
  const CubeDims dims = cube_dims(x.shape(), "trilinear_upsample");
  for (std::size_t f : factors) {
    if (f == 0) throw ContractError("trilinear_upsample: factors must be >= 1");
  }
  const bool batched = x.rank() == 5;
  Var<T> y = batched ? x : reshape(x, cube_shape(dims, true));
  for (std::size_t a = 0; a < 3; ++a) {
    if (factors[a] > 1) y = interp_axis(y, a + 1, factors[a]);
  }
  if (batched) return y;
  const auto& s = y.shape();
  return reshape(y, Shape{s[1], s[2], s[3], s[4]});
}

template <typename T>
Var<T> band_aggregate(const Var<T>& v, const Var<T>& attn) {
  const CubeDims dims = cube_dims(v.shape(), "band_aggregate");
  const auto& as = attn.shape();
  const bool shared = as.size() == 2;
  require((shared && as[0] == dims.d && as[1] == dims.d) ||
              (as.size() == 3 && as[0] == dims.n && as[1] == dims.d && as[2] == dims.d),
          "band_aggregate: attention map " + shape_str(as) + " does not fit " +
              std::to_string(dims.d) + " bands");
  const std::size_t d = dims.d, c = dims.c, hw = dims.h * dims.w;
  Tensor<T> out(v.shape());
  for (std::size_t n = 0; n < dims.n; ++n) {
    auto a = as_matrix(attn.value(), d, d, shared ? 0 : n * d * d);
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t off = (n * hw + p) * d * c;
      as_matrix(out, d, c, off).noalias() = a * as_matrix(v.value(), d, c, off);
    }
  }
  FlopScope::add(2 * dims.n * hw * d * d * c);
  return make_result<T>(std::move(out), {v, attn}, [dims, shared](Node<T>& self) {
    const std::size_t d = dims.d, c = dims.c, hw = dims.h * dims.w;
    Tensor<T>* gv = input_grad(self, 0);
    Tensor<T>* ga = input_grad(self, 1);
    for (std::size_t n = 0; n < dims.n; ++n) {
      const std::size_t aoff = shared ? 0 : n * d * d;
      auto a = as_matrix(self.inputs[1]->value, d, d, aoff);
      for (std::size_t p = 0; p < hw; ++p) {
        const std::size_t off = (n * hw + p) * d * c;
        auto g = as_matrix(std::as_const(self.grad), d, c, off);
        if (gv) as_matrix(*gv, d, c, off).noalias() += a.transpose() * g;
        if (ga) as_matrix(*ga, d, d, aoff).noalias() += g * as_matrix(self.inputs[0]->value, d, c, off).transpose();
      }
    }
  });
}

// ---------------------------------------------------------------------------------------
// Normalisation

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  BatchNormState<T> state, NormMode mode) {
  const std::size_t c = x.dim(-1);
  for (const Var<T>* p : {&gamma, &beta}) {
    require(p->rank() == 1 && p->dim(0) == c,
            "batch_norm: affine parameter " + shape_str(p->shape()) + " does not match " +
                std::to_string(c) + " channels");
  }
  auto& rmean = state.running_mean->value;
  auto& rvar = state.running_var->value;
  require(rmean.numel() == c && rvar.numel() == c,
          "batch_norm: running statistics do not match " + std::to_string(c) + " channels");
  const std::size_t m = x.value().numel() / c;
  const T* xv = x.value().raw();

  std::vector<T> mu(c, T(0)), inv_std(c);
  if (mode == NormMode::kTrain) {
    std::vector<double> acc(c, 0.0), acc2(c, 0.0);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t j = 0; j < c; ++j) acc[j] += xv[r * c + j];
    for (std::size_t j = 0; j < c; ++j) mu[j] = static_cast<T>(acc[j] / static_cast<double>(m));
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t j = 0; j < c; ++j) {
        const double dv = static_cast<double>(xv[r * c + j]) - mu[j];
        acc2[j] += dv * dv;
      }
    const T mom = state.momentum;
    for (std::size_t j = 0; j < c; ++j) {
      const double var = acc2[j] / static_cast<double>(m);
      inv_std[j] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(state.epsilon)));
      const double unbiased = m > 1 ? acc2[j] / static_cast<double>(m - 1) : var;
      rmean[j] = (T(1) - mom) * rmean[j] + mom * mu[j];
      rvar[j] = (T(1) - mom) * rvar[j] + mom * static_cast<T>(unbiased);
    }
  } else {
    for (std::size_t j = 0; j < c; ++j) {
      mu[j] = rmean[j];
      inv_std[j] = T(1) / std::sqrt(rvar[j] + state.epsilon);
    }
  }

  Tensor<T> xhat(x.shape());
  Tensor<T> out(x.shape());
  const T* gv = gamma.value().raw();
  const T* bv = beta.value().raw();
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t i = r * c + j;
      xhat[i] = (xv[i] - mu[j]) * inv_std[j];
      out[i] = gv[j] * xhat[i] + bv[j];
    }
  }
  FlopScope::add(6 * x.value().numel());
  const bool train = mode == NormMode::kTrain;
  return make_result<T>(std::move(out), {x, gamma, beta},
                        [xhat = std::move(xhat), inv_std, m, c, train](Node<T>& self) {
    const T* gamma_v = self.inputs[1]->value.raw();
    const T* up = self.grad.raw();
    std::vector<T> sum_g(c, T(0)), sum_gx(c, T(0));
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t j = 0; j < c; ++j) {
        sum_g[j] += up[r * c + j];
        sum_gx[j] += up[r * c + j] * xhat[r * c + j];
      }
    if (auto* gx = input_grad(self, 0)) {
      const T inv_m = T(1) / static_cast<T>(m);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < c; ++j) {
          const std::size_t i = r * c + j;
          T dxhat = up[i];
          if (train) dxhat -= inv_m * (sum_g[j] + xhat[i] * sum_gx[j]);
          (*gx)[i] += gamma_v[j] * inv_std[j] * dxhat;
        }
    }
    if (auto* gg = input_grad(self, 1))
      for (std::size_t j = 0; j < c; ++j) (*gg)[j] += sum_gx[j];
    if (auto* gb = input_grad(self, 2))
      for (std::size_t j = 0; j < c; ++j) (*gb)[j] += sum_g[j];
  });
}

#define HSDT_INSTANTIATE_OPS(T)                                                           \
  template Var<T> add(const Var<T>&, const Var<T>&);                                      \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                      \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                      \
  template Var<T> scale(const Var<T>&, T);                                                \
  template Var<T> sum(const Var<T>&);                                                     \
  template Var<T> mean(const Var<T>&);                                                    \
  template Var<T> sqrt_eps(const Var<T>&, T);                                             \
  template Var<T> reshape(const Var<T>&, Shape);                                          \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                   \
  template Var<T> transpose_last2(const Var<T>&);                                         \
  template Var<T> tile_batch(const Var<T>&, std::size_t);                                 \
  template Var<T> linear(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&);     \
  template Var<T> batched_linear(const Var<T>&, const Var<T>&);                           \
  template Var<T> slice_last(const Var<T>&, std::size_t, std::size_t);                    \
  template Var<T> concat_last(const Var<T>&, const Var<T>&);                              \
  template Var<T> conv3d(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&,      \
                         Triple, Triple);                                                 \
  template Var<T> softmax(const Var<T>&, int);                                            \
  template Var<T> activation(const Var<T>&, Activation);                                  \
  template Var<T> global_avg_pool(const Var<T>&);                                         \
  template Var<T> trilinear_upsample(const Var<T>&, Triple);                              \
  template Var<T> band_aggregate(const Var<T>&, const Var<T>&);                           \
  template Var<T> batch_norm(const Var<T>&, const Var<T>&, const Var<T>&,                 \
                             BatchNormState<T>, NormMode);                                \
  template T gelu_value(T);                                                               \
  template T sigmoid_value(T);

HSDT_INSTANTIATE_OPS(float)
HSDT_INSTANTIATE_OPS(double)

}  // namespace hsdt
