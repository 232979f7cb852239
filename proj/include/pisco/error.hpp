#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

#include "pisco/precision.hpp"

namespace pisco {
inline namespace PISCO_ABI {

enum class ErrorCode {
  shape_mismatch,
  invalid_argument,
  non_finite,
  io,
  format,
  overflow,
  missing_artifact,
  config,
  out_of_memory,
};

std::string_view to_string(ErrorCode code);

/// Structured error carrying a machine-readable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace PISCO_ABI
}  // namespace pisco
