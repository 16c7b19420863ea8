#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dcca {

enum class ErrorCode {
  kDimension,
  kConvergence,
  kNotPositiveSemidefinite,
  kInsufficientSamples,
  kPrecondition,
  kDegenerateBatch,
  kNumeric,
  kInvalidConfig,
  kState,
  kDiverged,
  kDegenerateVector,
  kBounds,
  kRange,
  kEmptyDataset,
  kFormat,
  kVersion,
  kChecksum,
  kIo,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kDimension: return "dimension";
    case ErrorCode::kConvergence: return "convergence";
    case ErrorCode::kNotPositiveSemidefinite: return "not-positive-semidefinite";
    case ErrorCode::kInsufficientSamples: return "insufficient-samples";
    case ErrorCode::kPrecondition: return "precondition";
    case ErrorCode::kDegenerateBatch: return "degenerate-batch";
    case ErrorCode::kNumeric: return "numeric";
    case ErrorCode::kInvalidConfig: return "invalid-config";
    case ErrorCode::kState: return "state";
    case ErrorCode::kDiverged: return "diverged";
    case ErrorCode::kDegenerateVector: return "degenerate-vector";
    case ErrorCode::kBounds: return "bounds";
    case ErrorCode::kRange: return "range";
    case ErrorCode::kEmptyDataset: return "empty-dataset";
    case ErrorCode::kFormat: return "format";
    case ErrorCode::kVersion: return "version";
    case ErrorCode::kChecksum: return "checksum";
    case ErrorCode::kIo: return "io";
  }
  return "unknown";
}

/// Every failure raised by the library carries one of the codes above so the
/// CLI can map it to an exit status without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + " error: " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

  /// File-level corruption (bad magic, truncation, CRC, version).
  bool is_format_error() const noexcept {
    return code_ == ErrorCode::kFormat || code_ == ErrorCode::kVersion ||
           code_ == ErrorCode::kChecksum;
  }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace dcca
