#pragma once

#include <stdexcept>
#include <string>

namespace moelab {

// Error taxonomy maps onto CLI exit codes: ConfigError -> 2,
// ContractViolation -> 3, IoError -> 4.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad configuration or malformed request (unknown keys, out-of-range values).
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// A precondition or invariant was violated by the caller or by corrupt state.
struct ContractViolation : Error {
  explicit ContractViolation(const std::string& msg) : Error(msg) {}
};

// Filesystem / serialization failures.
struct IoError : Error {
  explicit IoError(const std::string& msg) : Error(msg) {}
};

// Shape or rank mismatch in tensor operations.
struct DimensionError : ContractViolation {
  explicit DimensionError(const std::string& msg) : ContractViolation(msg) {}
};

// NaN/Inf where finite values are required.
struct NumericError : ContractViolation {
  explicit NumericError(const std::string& msg) : ContractViolation(msg) {}
};

}  // namespace moelab
