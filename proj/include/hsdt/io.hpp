// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <map>
#include <string>

#include "hsdt/binary_io.hpp"
#include "hsdt/tensor.hpp"

namespace hsdt {

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class NonFiniteError : public FormatError {
 public:
  using FormatError::FormatError;
};

using binary::TruncatedError;

enum class HsiDtype : std::uint8_t { kFloat32 = 0, kFloat64 = 1 };

/// Container: "HSIC0001", u8 dtype, u8 layout (0 = band-major D,H,W), u16 reserved 0,
/// u32 D, H, W, then D*H*W little-endian scalars. In memory the cube is [H,W,D].
void write_hsi(const Tensor<double>& cube, std::ostream& sink, HsiDtype dtype = HsiDtype::kFloat32);
Tensor<double> read_hsi(std::istream& source, HsiDtype* dtype = nullptr);

void write_hsi_file(const Tensor<double>& cube, const std::string& path,
                    HsiDtype dtype = HsiDtype::kFloat32);
Tensor<double> read_hsi_file(const std::string& path, HsiDtype* dtype = nullptr);

/// Flat key=value text. Blank lines and lines starting with '#' are ignored; whitespace
/// around keys and values is trimmed.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::istream& in, const std::string& origin = "<config>");
  static KeyValueConfig load(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::string get(const std::string& key, const std::string& fallback) const;
  std::string require(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
  std::string origin_;
};

/// One band as a 16-bit binary PGM, values clamped to [0, 1] and scaled to 0..65535.
void write_pgm(const Tensor<double>& cube, std::size_t band, const std::string& path);

}  // namespace hsdt
