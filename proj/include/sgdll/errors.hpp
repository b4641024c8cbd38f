// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace sgdll {

/// A tensor that must be finite is not. Carries the offending block name.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& block, const std::string& what)
      : std::runtime_error(block.empty() ? what : block + ": " + what), block_(block) {}
  const std::string& block() const noexcept { return block_; }

 private:
  std::string block_;
};

/// Training produced a non-finite loss, activation, gradient or parameter.
class DivergenceError : public NumericError {
 public:
  using NumericError::NumericError;
};

/// A caller broke an API precondition (stale cache, mismatched layouts, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid run or model configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace sgdll
