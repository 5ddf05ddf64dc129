#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mvpcbm {

enum class ErrorCode {
  ZeroNorm,
  NonPositiveTemperature,
  ShapeMismatch,
  LabelOutOfRange,
  NonScalarLoss,
  NonFiniteValue,
  IoError,
  ValidationFailed,
  BadMagic,
  UnsupportedVersion,
  HeaderPayloadMismatch,
  ConfigInvalid,
  TooFewPatches,
  NonFiniteLoss,
  DimensionMismatch,
  IndexOutOfRange,
};

std::string_view to_string(ErrorCode code);

/// Single exception type for the library; `code()` carries the failure kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace mvpcbm
