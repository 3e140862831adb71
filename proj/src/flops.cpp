// SPDX-License-Identifier: Apache-2.0
#include "hsdt/flops.hpp"

namespace hsdt {
namespace {
thread_local FlopScope* active_scope = nullptr;
}  // namespace

FlopScope::FlopScope() : parent_(active_scope) { active_scope = this; }

FlopScope::~FlopScope() {
  active_scope = parent_;
  if (parent_) parent_->count_ += count_;
}

void FlopScope::add(std::uint64_t n) {
  if (active_scope) active_scope->count_ += n;
}

}  // namespace hsdt
