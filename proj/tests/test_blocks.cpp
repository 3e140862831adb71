// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "hsdt/blocks.hpp"
#include "hsdt/flops.hpp"
#include "hsdt/gradcheck.hpp"
#include "test_util.hpp"

namespace hsdt {
namespace {

using testing::cst;
using testing::max_abs_diff;
using testing::random_tensor;

void zero(Parameter<double>& p) {
  for (auto& v : p.value.data()) v = 0.0;
}

void set_identity_linear(LinearParams<double>& l) {
  zero(l.weight);
  zero(l.bias);
  for (std::size_t i = 0; i < l.weight.value.dim(0); ++i) l.weight.value.at({i, i}) = 1.0;
}

// Kernel with an identity channel map at the centre tap.
void set_centre_identity(ConvParams<double>& c) {
  zero(c.weight);
  zero(c.bias);
  const Shape& s = c.weight.value.shape();
  for (std::size_t i = 0; i < std::min(s[3], s[4]); ++i)
    c.weight.value.at({s[0] / 2, s[1] / 2, s[2] / 2, i, i}) = 1.0;
}

Tensor<double> oracle_conv(const ConvParams<double>& c, const Tensor<double>& x, Triple s, Triple p) {
  return testing::conv3d_loops(x, c.weight.value, &c.bias.value, s, p);
}

TEST(S3Conv, SpatialBranchIsolation) {
  Rng rng(1);
  S3ConvLayer<double> layer(S3ConvVariant::kParallel2, 3, 3, 1, "t", rng);
  set_centre_identity(layer.spatial[0]);
  set_centre_identity(layer.spatial[1]);
  zero(layer.spectral[0].weight);
  zero(layer.spectral[0].bias);
  const Tensor<double> x = random_tensor({4, 5, 6, 3}, rng);
  EXPECT_EQ(max_abs_diff(layer.forward(cst(x), nullptr).value(), x), 0.0);
}

TEST(S3Conv, SpectralBranchIsolation) {
  Rng rng(2);
  S3ConvLayer<double> layer(S3ConvVariant::kParallel2, 3, 3, 1, "t", rng);
  for (auto& s : layer.spatial) {
    zero(s.weight);
    zero(s.bias);
  }
  set_centre_identity(layer.spectral[0]);
  const Tensor<double> x = random_tensor({4, 5, 6, 3}, rng);
  EXPECT_EQ(max_abs_diff(layer.forward(cst(x), nullptr).value(), x), 0.0);
}

TEST(S3Conv, EveryVariantMatchesConvComposition) {
  const Triple sp_pad{1, 1, 0}, spec_pad{0, 0, 1}, dense_pad{1, 1, 1};
  for (std::size_t stride : {1u, 2u}) {
    const Triple st{stride, stride, 1}, unit{1, 1, 1};
    Rng rng(3 + stride);
    const Tensor<double> x = random_tensor({4, 6, 5, 2}, rng);
    for (auto v : {S3ConvVariant::kParallel2, S3ConvVariant::kSingleSpatial,
                   S3ConvVariant::kSequential, S3ConvVariant::kConv3D}) {
      S3ConvLayer<double> layer(v, 2, 3, stride, "t", rng);
      Tensor<double> expect;
      switch (v) {
        case S3ConvVariant::kParallel2:
          expect = oracle_conv(layer.spatial[1], oracle_conv(layer.spatial[0], x, st, sp_pad), unit, sp_pad);
          expect += oracle_conv(layer.spectral[0], x, st, spec_pad);
          break;
        case S3ConvVariant::kSingleSpatial:
          expect = oracle_conv(layer.spatial[0], x, st, sp_pad);
          expect += oracle_conv(layer.spectral[0], x, st, spec_pad);
          break;
        case S3ConvVariant::kSequential:
          expect = oracle_conv(layer.spectral[0], oracle_conv(layer.spatial[0], x, st, sp_pad), unit, spec_pad);
          break;
        case S3ConvVariant::kConv3D:
          expect = oracle_conv(layer.dense[0], x, st, dense_pad);
          break;
      }
      const Tensor<double> got = layer.forward(cst(x), nullptr).value();
      EXPECT_EQ(got.shape(), (Shape{4 / stride, 6 / stride, 5, 3})) << to_string(v);
      EXPECT_LT(max_abs_diff(got, expect), 1e-12) << to_string(v) << " stride " << stride;
    }
  }
}

TEST(S3Conv, RejectsChannelMismatch) {
  Rng rng(5);
  S3ConvLayer<double> layer(S3ConvVariant::kParallel2, 2, 3, 1, "t", rng);
  EXPECT_THROW(layer.forward(cst(Tensor<double>({2, 2, 2, 3})), nullptr), ShapeError);
  EXPECT_THROW(S3ConvLayer<double>(S3ConvVariant::kParallel2, 2, 3, 3, "t", rng), ContractError);
  EXPECT_THROW(parse_variant("dense"), ContractError);
  EXPECT_EQ(parse_variant("s3conv-seq"), S3ConvVariant::kSequential);
}

TEST(S3Conv, BreaksBandPermutationEquivariance) {
  Rng rng(6);
  S3ConvLayer<double> layer(S3ConvVariant::kParallel2, 2, 2, 1, "t", rng);
  const Tensor<double> x = random_tensor({3, 3, 5, 2}, rng);
  const std::vector<std::size_t> perm{4, 2, 0, 3, 1};
  const auto a = layer.forward(cst(testing::permute_bands(x, perm)), nullptr).value();
  const auto b = testing::permute_bands(layer.forward(cst(x), nullptr).value(), perm);
  EXPECT_GT(max_abs_diff(a, b), 1e-3);
}

// Literal evaluation: Q = K = pooled x, A = rowsoftmax(Q K^T), out = A V, y = out W + b + x.
Tensor<double> gssa_oracle(const GssaLayer<double>& g, const Tensor<double>& x,
                           const Tensor<double>* query) {
  const std::size_t H = x.dim(0), W = x.dim(1), D = x.dim(2), C = x.dim(3);
  Tensor<double> k({D, C});
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w)
      for (std::size_t d = 0; d < D; ++d)
        for (std::size_t c = 0; c < C; ++c) k.at({d, c}) += x.at({h, w, d, c}) / double(H * W);
  const Tensor<double>& q = query ? *query : k;
  Tensor<double> a({D, D});
  for (std::size_t i = 0; i < D; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < D; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < C; ++c) s += q.at({i, c}) * k.at({j, c});
      a.at({i, j}) = s;
      mx = std::max(mx, s);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < D; ++j) z += (a.at({i, j}) = std::exp(a.at({i, j}) - mx));
    for (std::size_t j = 0; j < D; ++j) a.at({i, j}) /= z;
  }
  Tensor<double> y(x.shape());
  const auto& wv = g.value.weight.value;
  const auto& bv = g.value.bias.value;
  const auto& wp = g.post.weight.value;
  const auto& bp = g.post.bias.value;
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w) {
      Tensor<double> v({D, C});
      for (std::size_t d = 0; d < D; ++d)
        for (std::size_t o = 0; o < C; ++o) {
          double s = bv[o];
          for (std::size_t c = 0; c < C; ++c) s += x.at({h, w, d, c}) * wv.at({c, o});
          v.at({d, o}) = s;
        }
      for (std::size_t i = 0; i < D; ++i) {
        std::vector<double> mixed(C, 0.0);
        for (std::size_t j = 0; j < D; ++j)
          for (std::size_t c = 0; c < C; ++c) mixed[c] += a.at({i, j}) * v.at({j, c});
        for (std::size_t o = 0; o < C; ++o) {
          double s = bp[o] + x.at({h, w, i, o});
          for (std::size_t c = 0; c < C; ++c) s += mixed[c] * wp.at({c, o});
          y.at({h, w, i, o}) = s;
        }
      }
    }
  return y;
}

TEST(Gssa, SingleBandClosedForm) {
  Rng rng(7);
  GssaLayer<double> g(3, 4, "t", rng);
  const Tensor<double> x = random_tensor({2, 3, 1, 3}, rng);
  const auto a = g.attention_map(cst(x), nullptr, AttentionMode::kSelf).value();
  ASSERT_EQ(a.shape(), (Shape{1, 1}));
  EXPECT_EQ(a[0], 1.0);
  const auto expect = linear(linear(cst(x), cst(g.value.weight.value),
                                    std::optional<Var<double>>(cst(g.value.bias.value))),
                             cst(g.post.weight.value), std::optional<Var<double>>(cst(g.post.bias.value)))
                          .value();
  Tensor<double> closed = expect;
  closed += x;
  EXPECT_LT(max_abs_diff(g.forward(cst(x), nullptr, AttentionMode::kSelf).value(), closed), 1e-12);
  EXPECT_LT(max_abs_diff(g.forward_fast(cst(x), nullptr, AttentionMode::kSelf).value(), closed), 1e-12);
}

TEST(Gssa, IdenticalBandsGiveHalfWeights) {
  Rng rng(8);
  GssaLayer<double> g(2, 2, "t", rng);
  Tensor<double> x({2, 2, 2, 2});
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t w = 0; w < 2; ++w)
      for (std::size_t c = 0; c < 2; ++c) {
        const double v = rng.uniform();
        x.at({h, w, 0, c}) = v;
        x.at({h, w, 1, c}) = v;
      }
  const auto a = g.attention_map(cst(x), nullptr, AttentionMode::kSelf).value();
  for (double v : a.data()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Gssa, MatchesLiteralEquationWithIdentityProjections) {
  Rng rng(9);
  GssaLayer<double> g(4, 3, "t", rng);
  set_identity_linear(g.value);
  set_identity_linear(g.post);
  const Tensor<double> x = random_tensor({2, 2, 3, 4}, rng);
  const auto ref = gssa_oracle(g, x, nullptr);
  EXPECT_LT(max_abs_diff(g.forward(cst(x), nullptr, AttentionMode::kSelf).value(), ref), 1e-12);
}

TEST(Gssa, MatchesLiteralEquationRandomWeightsBothModes) {
  Rng rng(10);
  GssaLayer<double> g(3, 5, "t", rng);
  const Tensor<double> x = random_tensor({3, 2, 5, 3}, rng);
  EXPECT_LT(max_abs_diff(g.forward(cst(x), nullptr, AttentionMode::kSelf).value(),
                         gssa_oracle(g, x, nullptr)),
            1e-12);
  EXPECT_LT(max_abs_diff(g.forward(cst(x), nullptr, AttentionMode::kCross).value(),
                         gssa_oracle(g, x, &g.queries.value)),
            1e-12);
}

TEST(Gssa, FastPathMatchesReference) {
  Rng rng(11);
  const std::size_t bands[] = {1, 4, 31, 2, 7};
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = bands[trial % 5];
    GssaLayer<float> g(6, d, "t", rng);
    const Tensor<float> x = random_tensor<float>({4, 3, d, 6}, rng);
    for (auto mode : {AttentionMode::kSelf, AttentionMode::kCross}) {
      const auto a = g.forward(cst(x), nullptr, mode).value();
      const auto b = g.forward_fast(cst(x), nullptr, mode).value();
      EXPECT_LT(max_abs_diff(a, b), 1e-5) << "D=" << d;
    }
  }
  // Batched input.
  GssaLayer<float> g(3, 4, "t", rng);
  const Tensor<float> xb = random_tensor<float>({2, 2, 3, 4, 3}, rng);
  EXPECT_LT(max_abs_diff(g.forward(cst(xb), nullptr, AttentionMode::kCross).value(),
                         g.forward_fast(cst(xb), nullptr, AttentionMode::kCross).value()),
            1e-5);
}

TEST(Gssa, AttentionRowsSumToOne) {
  Rng rng(12);
  for (std::size_t d : {1u, 3u, 31u}) {
    GssaLayer<float> g(5, d, "t", rng);
    const Tensor<float> x = random_tensor<float>({3, 3, d, 5}, rng, -3.0, 3.0);
    for (auto mode : {AttentionMode::kSelf, AttentionMode::kCross}) {
      const auto a = g.attention_map(cst(x), nullptr, mode).value();
      for (std::size_t i = 0; i < d; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += a.at({i, j});
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
    }
  }
}

TEST(Gssa, ConstantInputGivesUniformRows) {
  Rng rng(13);
  GssaLayer<double> g(3, 6, "t", rng);
  const auto a = g.attention_map(cst(Tensor<double>::full({2, 2, 6, 3}, 0.4)), nullptr,
                                 AttentionMode::kSelf)
                     .value();
  for (double v : a.data()) EXPECT_NEAR(v, 1.0 / 6.0, 1e-15);
}

TEST(Gssa, SelfAttentionIsBandPermutationEquivariant) {
  Rng rng(14);
  GssaLayer<double> g(4, 3, "t", rng);
  for (std::size_t d : {3u, 6u, 9u}) {
    const Tensor<double> x = random_tensor({3, 2, d, 4}, rng);
    const auto perm = testing::random_permutation(d, rng);
    const Tensor<double> px = testing::permute_bands(x, perm);
    const auto a = g.attention_map(cst(x), nullptr, AttentionMode::kSelf).value();
    const auto pa = g.attention_map(cst(px), nullptr, AttentionMode::kSelf).value();
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(pa.at({i, j}), a.at({perm[i], perm[j]}), 1e-12);
    for (bool fast : {false, true}) {
      const auto y = fast ? g.forward_fast(cst(px), nullptr, AttentionMode::kSelf)
                          : g.forward(cst(px), nullptr, AttentionMode::kSelf);
      const auto ref = testing::permute_bands(g.forward(cst(x), nullptr, AttentionMode::kSelf).value(), perm);
      EXPECT_LT(max_abs_diff(y.value(), ref), 1e-5);
    }
  }
}

TEST(Gssa, CrossAttentionRejectsWrongBandCount) {
  Rng rng(15);
  GssaLayer<double> g(2, 5, "t", rng);
  const Tensor<double> x = random_tensor({2, 2, 4, 2}, rng);
  EXPECT_THROW(g.forward(cst(x), nullptr, AttentionMode::kCross), BandCountError);
  EXPECT_THROW(g.forward_fast(cst(x), nullptr, AttentionMode::kCross), BandCountError);
  EXPECT_THROW(g.attention_map(cst(x), nullptr, AttentionMode::kCross), BandCountError);
  EXPECT_NO_THROW(g.forward(cst(x), nullptr, AttentionMode::kSelf));
}

TEST(Gssa, CostIsLinearInArea) {
  Rng rng(16);
  GssaLayer<float> g(8, 31, "t", rng);
  auto count = [&](std::size_t hw) {
    const Tensor<float> x = random_tensor<float>({hw, hw, 31, 8}, rng);
    FlopScope scope;
    g.forward_fast(cst(x), nullptr, AttentionMode::kSelf);
    return static_cast<double>(scope.count());
  };
  const double ratio = count(32) / count(16);
  EXPECT_NEAR(ratio, 4.0, 0.2);
}

TEST(SmFfn, DuplicatedIdentityGateIsSilu) {
  Rng rng(17);
  SmFfnLayer<double> f(3, "t", rng);
  zero(f.w3.weight);
  zero(f.w3.bias);
  for (std::size_t i = 0; i < 3; ++i) {
    f.w3.weight.value.at({i, i}) = 1.0;
    f.w3.weight.value.at({i, i + 3}) = 1.0;
  }
  zero(f.w1.weight);
  zero(f.w1.bias);
  const Tensor<double> x = random_tensor({2, 3, 4, 3}, rng, -4.0, 4.0);
  const auto y = f.forward(cst(x), nullptr).value();
  const auto sm = f.sm_branch(cst(x), nullptr).value();
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double silu = x[i] * (1.0 / (1.0 + std::exp(-x[i])));
    EXPECT_EQ(sm[i], x[i] * sigmoid_value(x[i]));
    EXPECT_NEAR(y[i], silu, 1e-15);
  }
}

TEST(SmFfn, ZeroGateBranchLeavesPlainFfn) {
  Rng rng(18);
  SmFfnLayer<double> f(2, "t", rng);
  zero(f.w3.weight);
  zero(f.w3.bias);
  const Tensor<double> x = random_tensor({2, 2, 3, 2}, rng);
  const auto ffn = linear(gelu(linear(cst(x), cst(f.w2.weight.value),
                                      std::optional<Var<double>>(cst(f.w2.bias.value)))),
                          cst(f.w1.weight.value), std::optional<Var<double>>(cst(f.w1.bias.value)))
                       .value();
  EXPECT_EQ(max_abs_diff(f.forward(cst(x), nullptr).value(), ffn), 0.0);
}

TEST(SmFfn, MatchesLiteralEquation) {
  Rng rng(19);
  SmFfnLayer<double> f(3, "t", rng);
  const Tensor<double> x = random_tensor({2, 2, 2, 3}, rng);
  const auto y = f.forward(cst(x), nullptr).value();
  auto lin = [](const LinearParams<double>& l, const std::vector<double>& in) {
    const std::size_t o = l.weight.value.dim(1);
    std::vector<double> out(o);
    for (std::size_t j = 0; j < o; ++j) {
      out[j] = l.bias.value[j];
      for (std::size_t i = 0; i < in.size(); ++i) out[j] += in[i] * l.weight.value.at({i, j});
    }
    return out;
  };
  for (std::size_t p = 0; p < 8; ++p) {
    std::vector<double> in(x.raw() + 3 * p, x.raw() + 3 * p + 3);
    auto hidden = lin(f.w2, in);
    for (auto& v : hidden) v = v * 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
    const auto ffn = lin(f.w1, hidden);
    const auto fw = lin(f.w3, in);
    for (std::size_t c = 0; c < 3; ++c) {
      const double expect = ffn[c] + fw[c] / (1.0 + std::exp(-fw[c + 3]));
      EXPECT_NEAR(y[3 * p + c], expect, 1e-12);
    }
  }
}

TEST(Block, PreservesBandsAndHalvesSpaceOnStride) {
  Rng rng(20);
  for (std::size_t stride : {1u, 2u}) {
    TransformerBlock<double> b(S3ConvVariant::kParallel2, 2, 4, stride, 7, "t", rng);
    const auto y = b.forward(cst(random_tensor({6, 4, 7, 2}, rng)), nullptr, BlockMode{}).value();
    EXPECT_EQ(y.shape(), (Shape{6 / stride, 4 / stride, 7, 4}));
  }
}

TEST(Block, MatchesManualComposition) {
  Rng rng(21);
  TransformerBlock<double> b(S3ConvVariant::kParallel2, 2, 3, 1, 4, "t", rng);
  for (auto& v : b.bn_running_mean.value.data()) v = rng.uniform(-0.2, 0.2);
  for (auto& v : b.bn_running_var.value.data()) v = rng.uniform(0.5, 1.5);
  for (auto& v : b.bn_gamma.value.data()) v = rng.uniform(0.5, 1.5);
  const Tensor<double> x = random_tensor({4, 4, 4, 2}, rng);
  for (auto mode : {AttentionMode::kSelf, AttentionMode::kCross}) {
    Tensor<double> xh = b.s3conv.forward(cst(x), nullptr).value();
    for (std::size_t i = 0; i < xh.numel(); ++i) {
      const std::size_t c = i % 3;
      xh[i] = (xh[i] - b.bn_running_mean.value[c]) / std::sqrt(b.bn_running_var.value[c] + 1e-5) *
                  b.bn_gamma.value[c] +
              b.bn_beta.value[c];
    }
    Tensor<double> mid = gssa_oracle(b.gssa, xh, mode == AttentionMode::kCross ? &b.gssa.queries.value : nullptr);
    mid += xh;
    const auto expect = b.smffn.forward(cst(mid), nullptr).value();
    for (bool fast : {false, true}) {
      const auto y = b.forward(cst(x), nullptr, BlockMode{NormMode::kEval, mode, fast}).value();
      EXPECT_LT(max_abs_diff(y, expect), 1e-12);
    }
  }
}

TEST(Block, AttentionOutputIsCaptured) {
  Rng rng(22);
  TransformerBlock<double> b(S3ConvVariant::kParallel2, 1, 2, 1, 3, "t", rng);
  Tensor<double> a;
  b.forward(cst(random_tensor({2, 2, 3, 1}, rng)), nullptr, BlockMode{}, &a);
  EXPECT_EQ(a.shape(), (Shape{3, 3}));
}

TEST(CountParams, WorkedExamples) {
  Rng rng(23);
  EXPECT_EQ(count_params(S3ConvLayer<double>(S3ConvVariant::kConv3D, 2, 4, 1, "t", rng)), 220u);
  EXPECT_EQ(count_params(S3ConvLayer<double>(S3ConvVariant::kParallel2, 4, 4, 1, "t", rng)), 348u);
  EXPECT_EQ(count_params(GssaLayer<double>(4, 31, "t", rng)), 164u);
  // SM-FFN: three C x 2C maps with biases.
  EXPECT_EQ(count_params(SmFfnLayer<double>(4, "t", rng)), 3u * 32u + 8u + 8u + 4u);
  // Block adds the BN affine pair; running statistics are not trainable.
  TransformerBlock<double> block(S3ConvVariant::kParallel2, 4, 4, 1, 31, "t", rng);
  EXPECT_EQ(count_params(block), 348u + 8u + 164u + 116u);
}

TEST(Gradients, BlockLayersPassFiniteDifferences) {
  Rng rng(24);
  TransformerBlock<double> b(S3ConvVariant::kSequential, 2, 2, 2, 3, "t", rng);
  std::vector<Parameter<double>*> params;
  b.collect(params);
  std::vector<Parameter<double>*> trainable;
  for (auto* p : params)
    if (p->trainable) trainable.push_back(p);
  for (auto mode : {AttentionMode::kSelf, AttentionMode::kCross}) {
    const GradFn fn = [&](Tape<double>* tape, const std::vector<Var<double>>& v) {
      return b.forward(v[0], tape, BlockMode{NormMode::kEval, mode, true});
    };
    const auto r = check_gradients("block", fn, {random_tensor({4, 4, 3, 2}, rng)}, trainable, rng);
    EXPECT_TRUE(r.passed) << r.worst_leaf << " " << r.max_error;
  }
}

}  // namespace
}  // namespace hsdt
