// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "hsdt/gradcheck.hpp"
#include "hsdt/metrics.hpp"
#include "hsdt/pnp.hpp"
#include "hsdt/synthetic.hpp"
#include "json.hpp"

namespace hsdt::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

const std::set<std::string> kModelKeys{"preset",   "base_channels",  "n_scales", "extra_inner_blocks",
                                       "d_train",  "input_channels", "variant"};
const std::set<std::string> kTrainKeys{
    "noise", "sigma",    "blind_lo", "blind_hi",          "epochs",   "steps_per_epoch",
    "batch", "patch",    "patch_h",  "patch_w",           "lr",       "loss",
    "clip_norm", "cross_probability", "schedule", "schedule_divisor", "first_epoch"};
const std::set<std::string> kProblemKeys{
    "operator",    "scale",      "step",     "mask_probability", "clean",      "observation",
    "mask",        "bands",      "iterations", "rho_first",      "rho_last",   "sigma_first",
    "sigma_last",  "cg_iterations", "cg_tolerance", "noise_sigma", "denoiser", "model",
    "checkpoint",  "output",     "diagnostics"};

bool is_preset(const std::string& s) { return s == "hsdt-s" || s == "hsdt-m" || s == "hsdt-l"; }

void reject_unknown(const KeyValueConfig& kv, const std::set<std::string>& a,
                    const std::set<std::string>& b, const std::string& what) {
  for (const auto& [key, value] : kv.values()) {
    if (!a.count(key) && !b.count(key)) throw ContractError(what + ": unknown key '" + key + "'");
  }
}

std::size_t as_size(long long v, const std::string& key) {
  if (v < 0) throw ContractError("key '" + key + "' must be >= 0");
  return static_cast<std::size_t>(v);
}

void write_json_file(const json& j, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << j.dump(2) << "\n";
  if (!f) throw std::runtime_error("write failed: " + path);
}

HsdtModel<float> load_model(const std::string& config_arg, const std::string& checkpoint) {
  const HsdtConfig config = resolve_model_config(config_arg);
  HsdtModel<float> model(config, 0);
  OptimState<float> state;
  load_checkpoint(checkpoint, model, state);
  return model;
}

// Edge-replicates the spatial extents up to multiples of `divisor`.
template <typename T>
Tensor<T> pad_spatial(const Tensor<T>& x, std::size_t divisor) {
  if (x.rank() != 3) throw ShapeError("expected an [H,W,D] cube, got " + shape_str(x.shape()));
  const std::size_t h = x.dim(0), w = x.dim(1), d = x.dim(2);
  const std::size_t ph = (h + divisor - 1) / divisor * divisor;
  const std::size_t pw = (w + divisor - 1) / divisor * divisor;
  if (ph == h && pw == w) return x;
  Tensor<T> out({ph, pw, d});
  for (std::size_t i = 0; i < ph; ++i)
    for (std::size_t j = 0; j < pw; ++j)
      for (std::size_t b = 0; b < d; ++b)
        out.at({i, j, b}) = x.at({std::min(i, h - 1), std::min(j, w - 1), b});
  return out;
}

template <typename T>
Tensor<T> crop_spatial(const Tensor<T>& x, std::size_t h, std::size_t w) {
  if (x.dim(0) == h && x.dim(1) == w) return x;
  const std::size_t d = x.dim(2);
  Tensor<T> out({h, w, d});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t b = 0; b < d; ++b) out.at({i, j, b}) = x.at({i, j, b});
  return out;
}

Tensor<float> sigma_map(const Tensor<float>& cube, double sigma_255) {
  return Tensor<float>(cube.shape(), static_cast<float>(sigma_255 / 255.0));
}

// ---------------------------------------------------------------------------------------------

struct SimulateArgs {
  std::string input, output, log, clean_output, kind = "gaussian";
  double sigma = 50.0;
  std::size_t height = 64, width = 64, bands = 31, rank = 3;
  std::uint64_t seed = 0;
};

int run_simulate(const SimulateArgs& a, std::ostream& out) {
  Tensor<double> clean;
  if (!a.input.empty()) {
    clean = read_hsi_file(a.input);
  } else {
    Rng rng(a.seed, 100);
    clean = low_rank_hsi(a.height, a.width, a.bands, rng, a.rank);
  }
  NoiseSpec spec = NoiseSpec::of_kind(parse_noise_kind(a.kind), a.seed);
  spec.sigma = a.sigma;
  auto [noisy, log] = apply_noise(clean, spec);
  write_hsi_file(noisy, a.output);
  if (!a.clean_output.empty()) write_hsi_file(clean, a.clean_output);
  if (!a.log.empty()) write_json_file(log.to_json(), a.log);
  out << "wrote " << a.output << " " << shape_str(noisy.shape()) << " kind=" << to_string(spec.kind)
      << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::string config = "hsdt-s", data, out, curve, resume;
  std::uint64_t seed = 0;
};

std::vector<Tensor<float>> load_dataset(const std::string& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("dataset directory not found: " + dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".hsic") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("no .hsic files in " + dir);
  std::vector<Tensor<float>> data;
  for (const auto& f : files) data.push_back(read_hsi_file(f.string()).cast<float>());
  return data;
}

int run_train(const TrainArgs& a, std::ostream& out) {
  const KeyValueConfig kv = load_config_arg(a.config);
  reject_unknown(kv, kModelKeys, kTrainKeys, "train config");
  const HsdtConfig config = model_config_from(kv);
  const TrainOptions opts = train_options_from(kv, a.seed);
  const NoiseSpec noise = noise_spec_from(kv, a.seed);
  const auto data = load_dataset(a.data);

  HsdtModel<float> model(config, a.seed);
  OptimState<float> state;
  if (!a.resume.empty()) load_checkpoint(a.resume, model, state);
  const TrainResult result = train_loop(model, data, noise, opts, state);
  save_checkpoint(model, state, a.out);
  if (!a.curve.empty()) write_json_file(result.to_json(), a.curve);
  for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) {
    out << "epoch " << opts.first_epoch + e << " loss " << result.epoch_loss[e] << "\n";
  }
  out << "wrote " << a.out << " (step " << state.step << ")\n";
  return kExitOk;
}

struct DenoiseArgs {
  std::string config = "hsdt-s", checkpoint, input, output, attention = "sa";
  std::optional<double> sigma;
};

AttentionMode parse_attention(const std::string& s) {
  if (s == "sa") return AttentionMode::kSelf;
  if (s == "ca") return AttentionMode::kCross;
  throw ContractError("attention must be sa or ca, got '" + s + "'");
}

int run_denoise(const DenoiseArgs& a, std::ostream& out) {
  const HsdtModel<float> model = load_model(a.config, a.checkpoint);
  const Tensor<float> raw = read_hsi_file(a.input).cast<float>();
  const Tensor<float> noisy = pad_spatial(raw, model.config().spatial_divisor());
  std::optional<Tensor<float>> map;
  if (model.config().input_channels == 2) {
    if (!a.sigma) throw ContractError("this model takes a noise-level map; pass --sigma");
    map = sigma_map(noisy, *a.sigma);
  }
  const AttentionPolicy policy = parse_attention(a.attention) == AttentionMode::kCross
                                     ? AttentionPolicy::kCross
                                     : AttentionPolicy::kSelf;
  const Tensor<float> clean = crop_spatial(model.denoise(noisy, map ? &*map : nullptr, policy),
                                           raw.dim(0), raw.dim(1));
  write_hsi_file(clean.cast<double>(), a.output);
  out << "wrote " << a.output << "\n";
  return kExitOk;
}

int run_eval(const std::string& ref_path, const std::string& est_path, const std::string& output,
             std::ostream& out) {
  const Tensor<double> ref = read_hsi_file(ref_path);
  const Tensor<double> est = read_hsi_file(est_path);
  const json j = evaluate(ref, est).to_json();
  if (!output.empty()) write_json_file(j, output);
  out << j.dump(2) << "\n";
  return kExitOk;
}

int run_params(const std::string& config_arg, bool as_json, std::ostream& out) {
  const HsdtConfig config = resolve_model_config(config_arg);
  HsdtModel<double> model(config, 0);
  // Rows are the first three name components, e.g. "encoder.1.gssa".
  std::vector<std::pair<std::string, std::size_t>> rows;
  std::size_t total = 0;
  for (const auto* p : model.parameters()) {
    if (!p->trainable) continue;
    std::string key = p->name;
    std::size_t cut = 0;
    for (int i = 0; i < 3 && cut != std::string::npos; ++i) cut = key.find('.', cut ? cut + 1 : 0);
    if (cut != std::string::npos) key = key.substr(0, cut);
    if (rows.empty() || rows.back().first != key) rows.emplace_back(key, 0);
    rows.back().second += p->value.numel();
    total += p->value.numel();
  }
  if (as_json) {
    json layers = json::array();
    for (const auto& [k, n] : rows) layers.push_back({{"layer", k}, {"params", n}});
    out << json{{"total", total}, {"layers", layers}}.dump(2) << "\n";
    return kExitOk;
  }
  for (const auto& [k, n] : rows) out << std::left << std::setw(24) << k << n << "\n";
  out << "total " << total << "\n";
  return kExitOk;
}

int run_gradcheck(std::uint64_t seed, const std::string& output, std::ostream& out) {
  const GradCheckReport report = run_gradcheck_suite(seed);
  for (const auto& c : report.cases) {
    out << (c.passed ? "ok   " : "FAIL ") << std::left << std::setw(28) << c.name
        << " max_rel_err " << std::scientific << std::setprecision(3) << c.max_error
        << std::defaultfloat << "  (" << c.checked << " entries)\n";
  }
  out << "max error " << report.max_error() << " tolerance " << report.tolerance << " in "
      << report.seconds << " s\n";
  if (!output.empty()) write_json_file(report.to_json(), output);
  return report.passed() ? kExitOk : kExitFailure;
}

std::unique_ptr<DegradationOp> make_operator(const KeyValueConfig& kv, const Shape& clean_shape,
                                             const Tensor<double>* observation, std::uint64_t seed) {
  const std::string kind = kv.require("operator");
  if (kind == "sr") {
    const std::size_t scale = as_size(kv.get_int("scale", 2), "scale");
    if (!clean_shape.empty()) {
      return std::make_unique<SrOp>(clean_shape[0], clean_shape[1], clean_shape[2], scale);
    }
    const Shape& o = observation->shape();
    return std::make_unique<SrOp>(o[0] * scale, o[1] * scale, o[2], scale);
  }
  if (kind == "cassi") {
    const long step = static_cast<long>(kv.get_int("step", 1));
    Tensor<double> mask;
    std::size_t h = 0, w = 0, d = 0;
    if (!clean_shape.empty()) {
      h = clean_shape[0], w = clean_shape[1], d = clean_shape[2];
    } else {
      d = as_size(kv.get_int("bands", 0), "bands");
      if (d == 0) throw ContractError("cassi problem without a clean cube needs 'bands'");
      h = observation->dim(0);
      const std::size_t shift = (d - 1) * static_cast<std::size_t>(std::max(step, 0L));
      if (observation->dim(1) <= shift) throw ShapeError("cassi observation too narrow for bands");
      w = observation->dim(1) - shift;
    }
    if (kv.has("mask")) {
      const Tensor<double> m = read_hsi_file(kv.require("mask"));
      if (m.dim(2) != 1) throw ShapeError("mask must have one band");
      mask = m.reshaped({m.dim(0), m.dim(1)});
    } else {
      Rng rng(seed, 200);
      mask = random_mask(h, w, rng, kv.get_double("mask_probability", 0.5));
    }
    return std::make_unique<CassiOp>(std::move(mask), d, step);
  }
  throw ContractError("operator must be sr or cassi, got '" + kind + "'");
}

int run_pnp(const std::string& problem, std::uint64_t seed, const std::string& output_flag,
            const std::string& diag_flag, std::ostream& out) {
  const KeyValueConfig kv = KeyValueConfig::load(problem);
  reject_unknown(kv, kProblemKeys, {}, "pnp problem");
  std::optional<Tensor<double>> clean;
  if (kv.has("clean")) clean = read_hsi_file(kv.require("clean"));
  std::optional<Tensor<double>> y;
  if (kv.has("observation")) y = read_hsi_file(kv.require("observation"));
  if (!clean && !y) throw ContractError("pnp problem needs 'clean' or 'observation'");

  const auto op = make_operator(kv, clean ? clean->shape() : Shape{}, y ? &*y : nullptr, seed);
  if (!y) {
    y = op->forward(*clean);
    const double s = kv.get_double("noise_sigma", 0.0);
    if (s > 0.0) {
      Rng rng(seed, 300);
      y = apply_gaussian(*y, s, rng);
    }
  }

  const std::size_t iters = as_size(kv.get_int("iterations", 24), "iterations");
  AdmmOptions opts = default_admm_options(iters);
  if (kv.has("rho_first") || kv.has("rho_last")) {
    opts.rho = log_schedule(kv.get_double("rho_first", opts.rho.front()),
                            kv.get_double("rho_last", opts.rho.back()), iters);
  }
  if (kv.has("sigma_first") || kv.has("sigma_last")) {
    opts.sigma = log_schedule(kv.get_double("sigma_first", opts.sigma.front() * 255.0) / 255.0,
                              kv.get_double("sigma_last", opts.sigma.back() * 255.0) / 255.0, iters);
  }
  opts.cg_iterations = as_size(kv.get_int("cg_iterations", 10), "cg_iterations");
  opts.cg_tolerance = kv.get_double("cg_tolerance", opts.cg_tolerance);

  std::optional<HsdtModel<float>> model;
  Denoiser denoiser;
  const std::string which = kv.get("denoiser", kv.has("checkpoint") ? "model" : "identity");
  if (which == "identity") {
    denoiser = identity_denoiser();
  } else if (which == "model") {
    model.emplace(load_model(kv.get("model", "hsdt-s"), kv.require("checkpoint")));
    const std::size_t div = model->config().spatial_divisor();
    denoiser = [inner = model_denoiser(*model), div](const Tensor<double>& x, double sigma) {
      return crop_spatial(inner(pad_spatial(x, div), sigma), x.dim(0), x.dim(1));
    };
  } else {
    throw ContractError("denoiser must be identity or model, got '" + which + "'");
  }

  const AdmmResult result = admm_restore(*op, *y, denoiser, opts);
  const std::string output = output_flag.empty() ? kv.get("output", "") : output_flag;
  const std::string diag = diag_flag.empty() ? kv.get("diagnostics", "") : diag_flag;
  if (!output.empty()) write_hsi_file(result.x, output);

  json j = result.to_json();
  j["operator"] = op->kind();
  if (clean) {
    j["psnr"] = psnr(*clean, result.x);
    if (op->kind() == "sr") {
      j["bicubic_psnr"] = psnr(*clean, initial_estimate(*op, *y));
    }
  }
  if (!diag.empty()) write_json_file(j, diag);
  out << "fidelity first " << result.fidelity.front() << " last " << result.fidelity.back() << "\n";
  if (clean) out << "psnr " << j["psnr"].get<double>() << "\n";
  if (!output.empty()) out << "wrote " << output << "\n";
  return kExitOk;
}

struct AttnArgs {
  std::string config = "hsdt-s", checkpoint, input, output, mode = "sa";
  std::optional<double> sigma;
  std::uint64_t seed = 0;
};

int run_attnmap(const AttnArgs& a, std::ostream& out) {
  HsdtModel<float> model = a.checkpoint.empty() ? HsdtModel<float>(resolve_model_config(a.config), a.seed)
                                                : load_model(a.config, a.checkpoint);
  const Tensor<float> cube =
      pad_spatial(read_hsi_file(a.input).cast<float>(), model.config().spatial_divisor());
  std::optional<Tensor<float>> map;
  if (model.config().input_channels == 2) {
    if (!a.sigma) throw ContractError("this model takes a noise-level map; pass --sigma");
    map = sigma_map(cube, *a.sigma);
  }
  const auto maps = model.attention_maps(cube, map ? &*map : nullptr, parse_attention(a.mode));
  json layers = json::array();
  for (const auto& [name, t] : maps) {
    layers.push_back({{"layer", name},
                      {"shape", t.shape()},
                      {"values", std::vector<float>(t.data().begin(), t.data().end())}});
  }
  const json j{{"mode", a.mode}, {"bands", cube.dim(2)}, {"maps", layers}};
  if (a.output.empty()) {
    out << j.dump() << "\n";
  } else {
    write_json_file(j, a.output);
    out << "wrote " << maps.size() << " maps to " << a.output << "\n";
  }
  return kExitOk;
}

int run_export(const std::string& input, std::size_t band, const std::string& output,
               std::ostream& out) {
  write_pgm(read_hsi_file(input), band, output);
  out << "wrote " << output << "\n";
  return kExitOk;
}

}  // namespace

// ---------------------------------------------------------------------------------------------

KeyValueConfig load_config_arg(const std::string& arg) {
  if (is_preset(arg)) {
    KeyValueConfig kv;
    kv.set("preset", arg);
    return kv;
  }
  return KeyValueConfig::load(arg);
}

HsdtConfig model_config_from(const KeyValueConfig& kv) {
  HsdtConfig c = HsdtConfig::preset(kv.get("preset", "hsdt-s"));
  c.base_channels = as_size(kv.get_int("base_channels", static_cast<long long>(c.base_channels)),
                            "base_channels");
  c.n_scales = as_size(kv.get_int("n_scales", static_cast<long long>(c.n_scales)), "n_scales");
  c.extra_inner_blocks = as_size(
      kv.get_int("extra_inner_blocks", static_cast<long long>(c.extra_inner_blocks)),
      "extra_inner_blocks");
  c.d_train = as_size(kv.get_int("d_train", static_cast<long long>(c.d_train)), "d_train");
  c.input_channels = as_size(
      kv.get_int("input_channels", static_cast<long long>(c.input_channels)), "input_channels");
  if (kv.has("variant")) c.variant = parse_variant(kv.require("variant"));
  c.validate();
  return c;
}

HsdtConfig resolve_model_config(const std::string& arg) {
  const KeyValueConfig kv = load_config_arg(arg);
  reject_unknown(kv, kModelKeys, kTrainKeys, "model config");
  return model_config_from(kv);
}

NoiseSpec noise_spec_from(const KeyValueConfig& kv, std::uint64_t seed) {
  NoiseSpec spec = NoiseSpec::of_kind(parse_noise_kind(kv.get("noise", "gaussian")), seed);
  spec.sigma = kv.get_double("sigma", spec.sigma);
  spec.blind_lo = kv.get_double("blind_lo", spec.blind_lo);
  spec.blind_hi = kv.get_double("blind_hi", spec.blind_hi);
  spec.validate();
  return spec;
}

TrainOptions train_options_from(const KeyValueConfig& kv, std::uint64_t seed) {
  TrainOptions o;
  o.seed = seed;
  o.steps_per_epoch = as_size(kv.get_int("steps_per_epoch", 10), "steps_per_epoch");
  o.batch = as_size(kv.get_int("batch", 16), "batch");
  const std::size_t patch = as_size(kv.get_int("patch", 64), "patch");
  o.patch_h = as_size(kv.get_int("patch_h", static_cast<long long>(patch)), "patch_h");
  o.patch_w = as_size(kv.get_int("patch_w", static_cast<long long>(patch)), "patch_w");
  o.lr = kv.get_double("lr", o.lr);
  o.loss = parse_loss_kind(kv.get("loss", "mse"));
  const double clip = kv.get_double("clip_norm", 0.0);
  if (clip > 0.0) o.clip_norm = clip;
  o.cross_probability = kv.get_double("cross_probability", o.cross_probability);
  o.first_epoch = as_size(kv.get_int("first_epoch", 0), "first_epoch");

  const std::string schedule = kv.get("schedule", "constant");
  if (schedule == "three_stage") {
    const std::size_t div = as_size(kv.get_int("schedule_divisor", 1), "schedule_divisor");
    o.schedule = Schedule::three_stage().scaled(div);
    const std::size_t total = o.schedule->total_epochs();
    if (o.first_epoch >= total) throw ContractError("first_epoch is past the end of the schedule");
    o.epochs = as_size(kv.get_int("epochs", static_cast<long long>(total - o.first_epoch)), "epochs");
  } else if (schedule == "constant") {
    o.epochs = as_size(kv.get_int("epochs", 1), "epochs");
  } else {
    throw ContractError("schedule must be constant or three_stage, got '" + schedule + "'");
  }
  if (o.epochs == 0 || o.steps_per_epoch == 0 || o.batch == 0) {
    throw ContractError("epochs, steps_per_epoch and batch must be >= 1");
  }
  return o;
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
}

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hyperspectral denoising transformer toolkit", "hsdt"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  SimulateArgs sim;
  auto* c_sim = app.add_subcommand("simulate", "Apply a noise model to a cube (or a synthetic one)");
  c_sim->add_option("--input", sim.input, "Clean .hsic input; omit for a synthetic cube");
  c_sim->add_option("--height", sim.height, "Synthetic height")->capture_default_str();
  c_sim->add_option("--width", sim.width, "Synthetic width")->capture_default_str();
  c_sim->add_option("--bands", sim.bands, "Synthetic band count")->capture_default_str();
  c_sim->add_option("--rank", sim.rank, "Synthetic spectral rank")->capture_default_str();
  c_sim->add_option("--kind", sim.kind,
                    "gaussian|gaussian_blind|noniid|stripe|deadline|impulse|mixture")
      ->capture_default_str();
  c_sim->add_option("--sigma", sim.sigma, "Gaussian sigma on the 0..255 scale")->capture_default_str();
  c_sim->add_option("--seed", sim.seed, "Random seed")->required();
  c_sim->add_option("--output", sim.output, "Noisy .hsic output")->required();
  c_sim->add_option("--log", sim.log, "Degradation log (JSON)");
  c_sim->add_option("--clean-output", sim.clean_output, "Also write the clean cube");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train a model on a directory of .hsic cubes");
  c_train->add_option("--config", tr.config, "Preset name or key=value file")->capture_default_str();
  c_train->add_option("--data", tr.data, "Directory of clean .hsic cubes")->required();
  c_train->add_option("--seed", tr.seed, "Random seed")->required();
  c_train->add_option("--out", tr.out, "Checkpoint output")->required();
  c_train->add_option("--curve", tr.curve, "Loss curve output (JSON)");
  c_train->add_option("--resume", tr.resume, "Checkpoint to resume from");

  DenoiseArgs dn;
  auto* c_dn = app.add_subcommand("denoise", "Restore a noisy cube with a trained checkpoint");
  c_dn->add_option("--config", dn.config, "Preset name or key=value file")->capture_default_str();
  c_dn->add_option("--checkpoint", dn.checkpoint, "Checkpoint file")->required();
  c_dn->add_option("--input", dn.input, "Noisy .hsic input")->required();
  c_dn->add_option("--output", dn.output, "Restored .hsic output")->required();
  c_dn->add_option("--sigma", dn.sigma, "Noise level (0..255) for noise-map models");
  c_dn->add_option("--attention", dn.attention, "sa|ca")->capture_default_str();

  std::string ev_ref, ev_est, ev_out;
  auto* c_eval = app.add_subcommand("eval", "PSNR, SSIM and SAM of an estimate against a reference");
  c_eval->add_option("reference", ev_ref, "Reference .hsic")->required();
  c_eval->add_option("estimate", ev_est, "Estimate .hsic")->required();
  c_eval->add_option("--output", ev_out, "Also write the report (JSON)");

  std::string pr_config = "hsdt-s";
  bool pr_json = false;
  auto* c_params = app.add_subcommand("params", "Trainable parameter count per layer");
  c_params->add_option("--config", pr_config, "Preset name or key=value file")->capture_default_str();
  c_params->add_flag("--json", pr_json, "JSON output");

  std::uint64_t gc_seed = 0;
  std::string gc_out;
  auto* c_gc = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  c_gc->add_option("--seed", gc_seed, "Random seed")->required();
  c_gc->add_option("--output", gc_out, "Report (JSON)");

  std::string pn_problem, pn_out, pn_diag;
  std::uint64_t pn_seed = 0;
  auto* c_pnp = app.add_subcommand("pnp", "Plug-and-play ADMM restoration of an SR or CASSI problem");
  c_pnp->add_option("--problem", pn_problem, "Problem key=value file")->required();
  c_pnp->add_option("--seed", pn_seed, "Random seed")->required();
  c_pnp->add_option("--output", pn_out, "Restored .hsic (overrides the problem file)");
  c_pnp->add_option("--diagnostics", pn_diag, "Diagnostics JSON (overrides the problem file)");

  AttnArgs at;
  auto* c_attn = app.add_subcommand("attnmap", "Dump the band-by-band attention maps of every block");
  c_attn->add_option("--config", at.config, "Preset name or key=value file")->capture_default_str();
  c_attn->add_option("--checkpoint", at.checkpoint, "Checkpoint; omit for a freshly seeded model");
  c_attn->add_option("--input", at.input, "Input .hsic")->required();
  c_attn->add_option("--mode", at.mode, "sa|ca")->capture_default_str();
  c_attn->add_option("--sigma", at.sigma, "Noise level (0..255) for noise-map models");
  c_attn->add_option("--seed", at.seed, "Random seed")->required();
  c_attn->add_option("--output", at.output, "Output JSON; stdout when omitted");

  std::string ex_in, ex_out;
  std::size_t ex_band = 0;
  auto* c_export = app.add_subcommand("export", "Write one band as 16-bit PGM");
  c_export->add_option("--input", ex_in, "Input .hsic")->required();
  c_export->add_option("--band", ex_band, "Band index")->capture_default_str();
  c_export->add_option("--output", ex_out, "Output .pgm")->required();

  if (argc > 1 && argv[1][0] != '-') {
    const auto subs = app.get_subcommands({});
    const bool known = std::any_of(subs.begin(), subs.end(),
                                   [&](const CLI::App* s) { return s->get_name() == argv[1]; });
    if (!known) {
      err << "error: unknown command '" << argv[1] << "'\n\n" << app.help();
      return kExitUsage;
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (c_sim->parsed()) return run_simulate(sim, out);
    if (c_train->parsed()) return run_train(tr, out);
    if (c_dn->parsed()) return run_denoise(dn, out);
    if (c_eval->parsed()) return run_eval(ev_ref, ev_est, ev_out, out);
    if (c_params->parsed()) return run_params(pr_config, pr_json, out);
    if (c_gc->parsed()) return run_gradcheck(gc_seed, gc_out, out);
    if (c_pnp->parsed()) return run_pnp(pn_problem, pn_seed, pn_out, pn_diag, out);
    if (c_attn->parsed()) return run_attnmap(at, out);
    if (c_export->parsed()) return run_export(ex_in, ex_band, ex_out, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace hsdt::cli
