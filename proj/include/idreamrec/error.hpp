#pragma once

#include <stdexcept>
#include <string>

namespace idr {

enum class ErrorCode {
  kDegenerateInput,
  kInvalidInput,
  kSingularTransform,
  kDimensionMismatch,
  kInvalidSchedule,
  kInvalidVariance,
  kOutOfRange,
  kDivergedTraining,
  kCorruptFile,
  kIo,
  kTransport,
  kInconsistentModel,
  kTooFewPairs,
};

const char* to_string(ErrorCode code);

/// Exception carrying a machine-checkable error code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Transport failure that keeps the last HTTP status seen (0 when no response arrived).
class TransportError : public Error {
 public:
  TransportError(int status, const std::string& what)
      : Error(ErrorCode::kTransport, what), status_(status) {}

  int status() const noexcept { return status_; }

 private:
  int status_;
};

}  // namespace idr
