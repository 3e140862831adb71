// SPDX-License-Identifier: Apache-2.0
#include "hsdt/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "hsdt/network.hpp"
#include "hsdt/train.hpp"

namespace hsdt {
namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

std::vector<std::size_t> sample_indices(std::size_t n, std::size_t limit, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (n <= limit) return idx;
  for (std::size_t i = 0; i < limit; ++i) std::swap(idx[i], idx[rng.uniform_int(i, n - 1)]);
  idx.resize(limit);
  std::sort(idx.begin(), idx.end());
  return idx;
}

template <typename Layer>
std::vector<Parameter<double>*> trainable(Layer& layer) {
  std::vector<Parameter<double>*> all, out;
  layer.collect(all);
  for (auto* p : all)
    if (p->trainable) out.push_back(p);
  return out;
}

// Trainable values are redrawn so that no gradient is trivially zero.
void randomize(const std::vector<Parameter<double>*>& params, Rng& rng, double scale = 0.5) {
  for (auto* p : params)
    for (auto& v : p->value.data()) v += rng.uniform(-scale, scale);
}

}  // namespace

template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T h) {
  Tensor<T> g(x.shape());
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + h;
    const T up = f(probe);
    probe[i] = orig - h;
    const T down = f(probe);
    probe[i] = orig;
    g[i] = (up - down) / (T{2} * h);
  }
  return g;
}

template Tensor<float> finite_diff_grad(const std::function<float(const Tensor<float>&)>&,
                                        const Tensor<float>&, float);
template Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>&,
                                         const Tensor<double>&, double);

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckCase check_gradients(const std::string& name, const GradFn& fn,
                              std::vector<Tensor<double>> inputs,
                              const std::vector<Parameter<double>*>& params, Rng& rng,
                              const GradCheckOptions& o) {
  GradCheckCase result;
  result.name = name;

  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& in : inputs) vars.push_back(tape.variable(in));
  const Var<double> out = fn(&tape, vars);
  const Tensor<double> weights = random_tensor(out.shape(), rng, 0.5, 1.5);
  const Var<double> loss = sum(mul(out, tape.constant(weights)));
  const GradientMap<double> grads = tape.backward(loss);

  auto evaluate = [&]() {
    std::vector<Var<double>> consts;
    for (const auto& in : inputs) consts.push_back(Var<double>::constant(in));
    const Tensor<double> y = fn(nullptr, consts).value();
    double s = 0.0;
    for (std::size_t i = 0; i < y.numel(); ++i) s += weights[i] * y[i];
    return s;
  };

  struct Sample {
    std::string leaf;
    std::size_t index;
    double analytic, numeric;
  };
  std::vector<Sample> samples;
  auto compare = [&](const std::string& leaf, Tensor<double>& value, const Tensor<double>& analytic) {
    for (std::size_t i : sample_indices(value.numel(), o.max_elements, rng)) {
      const double orig = value[i];
      value[i] = orig + o.step;
      const double up = evaluate();
      value[i] = orig - o.step;
      const double down = evaluate();
      value[i] = orig;
      samples.push_back({leaf, i, analytic[i], (up - down) / (2.0 * o.step)});
    }
  };

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    compare("input" + std::to_string(k), inputs[k], vars[k].grad());
  }
  for (auto* p : params) {
    auto it = grads.find(p);
    const Tensor<double> analytic =
        it == grads.end() ? Tensor<double>::zeros(p->value.shape()) : it->second;
    compare(p->name, p->value, analytic);
  }

  double scale = 0.0;
  for (const auto& s : samples) scale = std::max(scale, std::abs(s.numeric));
  const double floor = std::max(kGradErrorFloor, kGradScaleFloor * scale);
  for (const auto& s : samples) {
    const double err = relative_error(s.analytic, s.numeric, floor);
    if (err > result.max_error || result.worst_leaf.empty()) {
      result.max_error = err;
      result.worst_leaf = s.leaf + "[" + std::to_string(s.index) + "]";
      result.worst_analytic = s.analytic;
      result.worst_numeric = s.numeric;
    }
  }
  result.checked = samples.size();
  result.passed = result.max_error < o.tolerance;
  return result;
}

bool GradCheckReport::passed() const {
  return std::all_of(cases.begin(), cases.end(), [](const GradCheckCase& c) { return c.passed; });
}

double GradCheckReport::max_error() const {
  double m = 0.0;
  for (const auto& c : cases) m = std::max(m, c.max_error);
  return m;
}

nlohmann::json GradCheckReport::to_json() const {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& c : cases) {
    list.push_back({{"name", c.name},
                    {"max_relative_error", c.max_error},
                    {"worst", c.worst_leaf},
                    {"worst_analytic", c.worst_analytic},
                    {"worst_numeric", c.worst_numeric},
                    {"elements", c.checked},
                    {"passed", c.passed}});
  }
  return {{"tolerance", tolerance}, {"seconds", seconds}, {"passed", passed()}, {"cases", list}};
}

GradCheckReport run_gradcheck_suite(std::uint64_t seed, const GradCheckOptions& o) {
  const auto t0 = std::chrono::steady_clock::now();
  GradCheckReport report;
  report.tolerance = o.tolerance;
  Rng rng(seed, 0x9c);
  auto run = [&](const std::string& name, const GradFn& fn, std::vector<Tensor<double>> inputs,
                 const std::vector<Parameter<double>*>& params = {}) {
    report.cases.push_back(check_gradients(name, fn, std::move(inputs), params, rng, o));
  };
  using V = std::vector<Var<double>>;
  using Tp = Tape<double>*;

  // Elementwise, reductions and reshaping.
  run("add", [](Tp, const V& v) { return add(v[0], v[1]); },
      {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)});
  run("sub", [](Tp, const V& v) { return sub(v[0], v[1]); },
      {random_tensor({2, 5}, rng), random_tensor({2, 5}, rng)});
  run("mul", [](Tp, const V& v) { return mul(v[0], v[1]); },
      {random_tensor({2, 3, 2}, rng), random_tensor({2, 3, 2}, rng)});
  run("scale", [](Tp, const V& v) { return scale(v[0], -1.7); }, {random_tensor({6}, rng)});
  run("sum", [](Tp, const V& v) { return sum(v[0]); }, {random_tensor({2, 3}, rng)});
  run("mean", [](Tp, const V& v) { return mean(v[0]); }, {random_tensor({4, 2}, rng)});
  run("sqrt_eps", [](Tp, const V& v) { return sqrt_eps(sum(mul(v[0], v[0])), 1e-12); },
      {random_tensor({5}, rng)});
  run("reshape", [](Tp, const V& v) { return reshape(v[0], {3, 2, 2}); },
      {random_tensor({2, 6}, rng)});
  run("matmul", [](Tp, const V& v) { return matmul(v[0], v[1]); },
      {random_tensor({5, 7}, rng), random_tensor({7, 2}, rng)});
  run("matmul_batched", [](Tp, const V& v) { return matmul(v[0], v[1]); },
      {random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 3}, rng)});
  run("transpose_last2", [](Tp, const V& v) { return transpose_last2(v[0]); },
      {random_tensor({2, 3, 4}, rng)});
  run("tile_batch", [](Tp, const V& v) { return tile_batch(v[0], 3); },
      {random_tensor({2, 3}, rng)});
  run("linear", [](Tp, const V& v) { return linear(v[0], v[1], std::optional<Var<double>>(v[2])); },
      {random_tensor({3, 2, 4}, rng), random_tensor({4, 5}, rng), random_tensor({5}, rng)});
  run("batched_linear", [](Tp, const V& v) { return batched_linear(v[0], v[1]); },
      {random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 3}, rng)});
  run("slice_concat",
      [](Tp, const V& v) { return concat_last(slice_last(v[0], 1, 2), v[1]); },
      {random_tensor({3, 4}, rng), random_tensor({3, 2}, rng)});

  // Convolution.
  run("conv3d", [](Tp, const V& v) {
        return conv3d(v[0], v[1], std::optional<Var<double>>(v[2]), Triple{1, 1, 1}, Triple{1, 1, 1});
      },
      {random_tensor({4, 4, 3, 2}, rng), random_tensor({3, 3, 3, 2, 2}, rng), random_tensor({2}, rng)});
  run("conv3d_strided", [](Tp, const V& v) {
        return conv3d(v[0], v[1], std::optional<Var<double>>(v[2]), Triple{2, 2, 1}, Triple{1, 1, 0});
      },
      {random_tensor({5, 4, 3, 2}, rng), random_tensor({3, 3, 1, 2, 3}, rng), random_tensor({3}, rng)});
  run("conv3d_batched", [](Tp, const V& v) {
        return conv3d(v[0], v[1], std::optional<Var<double>>(), Triple{1, 1, 1}, Triple{0, 0, 1});
      },
      {random_tensor({2, 3, 3, 4, 2}, rng), random_tensor({1, 1, 3, 2, 2}, rng)});

  // Nonlinearities.
  run("softmax_last", [](Tp, const V& v) { return softmax(v[0], -1); },
      {random_tensor({3, 5}, rng, -2, 2)});
  run("softmax_first", [](Tp, const V& v) { return softmax(v[0], 0); },
      {random_tensor({4, 3}, rng, -2, 2)});
  run("sigmoid", [](Tp, const V& v) { return sigmoid(v[0]); }, {random_tensor({3, 4}, rng, -3, 3)});
  run("gelu", [](Tp, const V& v) { return gelu(v[0]); }, {random_tensor({3, 4}, rng, -3, 3)});

  // Pooling, interpolation, band mixing, normalisation.
  run("global_avg_pool", [](Tp, const V& v) { return global_avg_pool(v[0]); },
      {random_tensor({3, 5, 4, 2}, rng)});
  run("global_avg_pool_batched", [](Tp, const V& v) { return global_avg_pool(v[0]); },
      {random_tensor({2, 2, 3, 3, 2}, rng)});
  run("trilinear_upsample", [](Tp, const V& v) { return trilinear_upsample(v[0], Triple{2, 2, 1}); },
      {random_tensor({3, 2, 3, 2}, rng)});
  run("trilinear_upsample_3axis",
      [](Tp, const V& v) { return trilinear_upsample(v[0], Triple{2, 3, 2}); },
      {random_tensor({2, 2, 3, 1}, rng)});
  run("band_aggregate", [](Tp, const V& v) { return band_aggregate(v[0], v[1]); },
      {random_tensor({2, 3, 4, 2}, rng), random_tensor({4, 4}, rng)});
  {
    Parameter<double> rm("bn.running_mean", Tensor<double>::zeros({3}), false);
    Parameter<double> rv("bn.running_var", Tensor<double>::ones({3}), false);
    run("batch_norm_train", [&](Tp, const V& v) {
          return batch_norm(v[0], v[1], v[2], BatchNormState<double>{&rm, &rv}, NormMode::kTrain);
        },
        {random_tensor({3, 3, 2, 3}, rng), random_tensor({3}, rng, 0.5, 1.5), random_tensor({3}, rng)});
    run("batch_norm_eval", [&](Tp, const V& v) {
          return batch_norm(v[0], v[1], v[2], BatchNormState<double>{&rm, &rv}, NormMode::kEval);
        },
        {random_tensor({2, 2, 2, 3}, rng), random_tensor({3}, rng, 0.5, 1.5), random_tensor({3}, rng)});
  }

  // Layers.
  for (auto variant : {S3ConvVariant::kParallel2, S3ConvVariant::kSingleSpatial,
                       S3ConvVariant::kSequential, S3ConvVariant::kConv3D}) {
    for (std::size_t stride : {1, 2}) {
      Rng init(seed, 100 + static_cast<std::uint64_t>(variant) * 2 + stride);
      S3ConvLayer<double> layer(variant, 2, 3, stride, "s3", init);
      run(std::string("s3conv[") + to_string(variant) + ",stride" + std::to_string(stride) + "]",
          [&](Tp t, const V& v) { return layer.forward(v[0], t); }, {random_tensor({4, 4, 3, 2}, rng)},
          trainable(layer));
    }
  }
  {
    Rng init(seed, 200);
    GssaLayer<double> layer(3, 4, "gssa", init);
    randomize(trainable(layer), rng);
    for (auto mode : {AttentionMode::kSelf, AttentionMode::kCross}) {
      const std::string tag = mode == AttentionMode::kSelf ? "sa" : "ca";
      run("gssa[" + tag + "]", [&](Tp t, const V& v) { return layer.forward(v[0], t, mode); },
          {random_tensor({3, 3, 4, 3}, rng)}, trainable(layer));
      run("gssa_fast[" + tag + "]", [&](Tp t, const V& v) { return layer.forward_fast(v[0], t, mode); },
          {random_tensor({3, 3, 4, 3}, rng)}, trainable(layer));
      run("gssa_fast_batched[" + tag + "]",
          [&](Tp t, const V& v) { return layer.forward_fast(v[0], t, mode); },
          {random_tensor({2, 2, 3, 4, 3}, rng)}, trainable(layer));
    }
  }
  {
    Rng init(seed, 300);
    SmFfnLayer<double> layer(3, "smffn", init);
    run("smffn", [&](Tp t, const V& v) { return layer.forward(v[0], t); },
        {random_tensor({2, 3, 2, 3}, rng)}, trainable(layer));
  }
  {
    Rng init(seed, 400);
    TransformerBlock<double> block(S3ConvVariant::kParallel2, 2, 3, 1, 4, "block", init);
    randomize(trainable(block), rng, 0.2);
    for (auto mode : {AttentionMode::kSelf, AttentionMode::kCross}) {
      const BlockMode bm{NormMode::kTrain, mode, true};
      run(std::string("block[") + (mode == AttentionMode::kSelf ? "sa" : "ca") + "]",
          [&](Tp t, const V& v) { return block.forward(v[0], t, bm); },
          {random_tensor({4, 4, 4, 2}, rng)}, trainable(block));
    }
  }
  {
    HsdtConfig cfg;
    cfg.base_channels = 4;
    cfg.d_train = 4;
    HsdtModel<double> model(cfg, seed);
    auto params = trainable(model);
    for (auto& v : model.tail_weight.value.data()) v = rng.uniform(-0.5, 0.5);
    model.tail_bias.value[0] = rng.uniform(-0.1, 0.1);
    for (auto mode : {AttentionPolicy::kSelf, AttentionPolicy::kCross}) {
      ForwardOptions fo;
      fo.norm = NormMode::kTrain;
      fo.attention = mode;
      run(std::string("model[") + (mode == AttentionPolicy::kSelf ? "sa" : "ca") + "]",
          [&](Tp t, const V& v) { return model.forward(v[0], std::nullopt, t, fo); },
          {random_tensor({8, 8, 4}, rng, 0, 1)}, params);
    }
  }
  for (auto kind : {LossKind::kMse, LossKind::kSqrtMse}) {
    run(std::string("loss[") + to_string(kind) + "]",
        [kind](Tp, const V& v) { return loss(v[0], v[1], kind); },
        {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)});
  }

  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace hsdt
