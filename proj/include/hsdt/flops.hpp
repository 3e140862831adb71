// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace hsdt {

/// Counts scalar arithmetic operations (multiply and add counted separately) issued by
/// the forward kernels on the current thread while the scope is alive. Scopes nest.
class FlopScope {
 public:
  FlopScope();
  ~FlopScope();
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;

  std::uint64_t count() const { return count_; }

  static void add(std::uint64_t n);

 private:
  std::uint64_t count_ = 0;
  FlopScope* parent_ = nullptr;
};

}  // namespace hsdt
