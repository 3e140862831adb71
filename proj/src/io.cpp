// SPDX-License-Identifier: Apache-2.0
#include "hsdt/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace hsdt {
namespace {

constexpr char kHsiMagic[8] = {'H', 'S', 'I', 'C', '0', '0', '0', '1'};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void write_hsi(const Tensor<double>& cube, std::ostream& sink, HsiDtype dtype) {
  if (cube.rank() != 3) throw ShapeError("write_hsi: expected [H,W,D], got " + shape_str(cube.shape()));
  for (double v : cube.data()) {
    if (!std::isfinite(v)) throw NonFiniteError("write_hsi: cube contains non-finite values");
  }
  const std::size_t h = cube.dim(0), w = cube.dim(1), d = cube.dim(2);
  sink.write(kHsiMagic, sizeof(kHsiMagic));
  binary::put_uint<std::uint8_t>(sink, static_cast<std::uint8_t>(dtype));
  binary::put_uint<std::uint8_t>(sink, 0);
  binary::put_uint<std::uint16_t>(sink, 0);
  binary::put_uint<std::uint32_t>(sink, static_cast<std::uint32_t>(d));
  binary::put_uint<std::uint32_t>(sink, static_cast<std::uint32_t>(h));
  binary::put_uint<std::uint32_t>(sink, static_cast<std::uint32_t>(w));
  for (std::size_t b = 0; b < d; ++b)
    for (std::size_t p = 0; p < h * w; ++p) {
      const double v = cube[p * d + b];
      if (dtype == HsiDtype::kFloat32) binary::put_f32(sink, static_cast<float>(v));
      else binary::put_f64(sink, v);
    }
  if (!sink) throw FormatError("write_hsi: write failed");
}

Tensor<double> read_hsi(std::istream& source, HsiDtype* dtype_out) {
  if (binary::get_bytes(source, 8, "container magic") != std::string(kHsiMagic, 8)) {
    throw BadMagicError("bad magic: not an HSIC0001 container");
  }
  const auto dtype = binary::get_uint<std::uint8_t>(source, "dtype");
  const auto layout = binary::get_uint<std::uint8_t>(source, "layout");
  const auto reserved = binary::get_uint<std::uint16_t>(source, "reserved field");
  if (dtype > 1) throw FormatError("unsupported container dtype " + std::to_string(dtype));
  if (layout != 0) throw FormatError("unsupported container layout " + std::to_string(layout));
  if (reserved != 0) throw FormatError("container reserved field must be zero");
  const std::size_t d = binary::get_uint<std::uint32_t>(source, "band count");
  const std::size_t h = binary::get_uint<std::uint32_t>(source, "height");
  const std::size_t w = binary::get_uint<std::uint32_t>(source, "width");
  if (d == 0 || h == 0 || w == 0) throw FormatError("container extents must be >= 1");
  Tensor<double> cube({h, w, d});
  for (std::size_t b = 0; b < d; ++b)
    for (std::size_t p = 0; p < h * w; ++p) {
      const double v = dtype == 0 ? static_cast<double>(binary::get_f32(source, "payload"))
                                  : binary::get_f64(source, "payload");
      if (!std::isfinite(v)) {
        throw NonFiniteError("container holds a non-finite value at band " + std::to_string(b));
      }
      cube[p * d + b] = v;
    }
  if (dtype_out) *dtype_out = static_cast<HsiDtype>(dtype);
  return cube;
}

void write_hsi_file(const Tensor<double>& cube, const std::string& path, HsiDtype dtype) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  write_hsi(cube, out, dtype);
}

Tensor<double> read_hsi_file(const std::string& path, HsiDtype* dtype) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "' for reading");
  return read_hsi(in, dtype);
}

KeyValueConfig KeyValueConfig::parse(std::istream& in, const std::string& origin) {
  KeyValueConfig cfg;
  cfg.origin_ = origin;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw FormatError(origin + ":" + std::to_string(lineno) + ": expected key=value");
    }
    const std::string key = trim(t.substr(0, eq));
    if (key.empty()) throw FormatError(origin + ":" + std::to_string(lineno) + ": empty key");
    if (cfg.values_.count(key)) {
      throw FormatError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
    cfg.values_[key] = trim(t.substr(eq + 1));
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config '" + path + "'");
  return parse(in, path);
}

std::string KeyValueConfig::get(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

std::string KeyValueConfig::require(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw FormatError(origin_ + ": missing required key '" + key + "'");
  return it->second;
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    std::size_t used = 0;
    const double v = std::stod(it->second, &used);
    if (used == it->second.size()) return v;
  } catch (const std::exception&) {
  }
  throw FormatError(origin_ + ": key '" + key + "' is not a number: '" + it->second + "'");
}

long long KeyValueConfig::get_int(const std::string& key, long long fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  long long v = 0;
  const auto& s = it->second;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw FormatError(origin_ + ": key '" + key + "' is not an integer: '" + s + "'");
  }
  return v;
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const auto& s = it->second;
  if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
  if (s == "0" || s == "false" || s == "no" || s == "off") return false;
  throw FormatError(origin_ + ": key '" + key + "' is not a boolean: '" + s + "'");
}

void write_pgm(const Tensor<double>& cube, std::size_t band, const std::string& path) {
  if (cube.rank() != 3) throw ShapeError("write_pgm: expected [H,W,D]");
  const std::size_t h = cube.dim(0), w = cube.dim(1), d = cube.dim(2);
  if (band >= d) throw ContractError("write_pgm: band " + std::to_string(band) + " out of range");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  out << "P5\n" << w << " " << h << "\n65535\n";
  for (std::size_t p = 0; p < h * w; ++p) {
    const double v = std::clamp(cube[p * d + band], 0.0, 1.0);
    const auto q = static_cast<std::uint16_t>(std::lround(v * 65535.0));
    const char bytes[2] = {static_cast<char>(q >> 8), static_cast<char>(q & 0xff)};
    out.write(bytes, 2);
  }
  if (!out) throw FormatError("write_pgm: write failed");
}

}  // namespace hsdt
