#pragma once

#include <stdexcept>
#include <string>

namespace mfar {

enum class ErrorCode {
  GridTooSmall,
  InvalidGrid,
  PointNotOnGrid,
  BadBasisOrder,
  ShapeError,
  NumericalBreakdown,
  InitFailure,
  SweepFailure,
  EvidenceFailure,
  IngestError,
  DegenerateInput,
  DegenerateKernel,
  ConfigError,
  IoError,
};

inline const char* to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::GridTooSmall: return "GridTooSmall";
    case ErrorCode::InvalidGrid: return "InvalidGrid";
    case ErrorCode::PointNotOnGrid: return "PointNotOnGrid";
    case ErrorCode::BadBasisOrder: return "BadBasisOrder";
    case ErrorCode::ShapeError: return "ShapeError";
    case ErrorCode::NumericalBreakdown: return "NumericalBreakdown";
    case ErrorCode::InitFailure: return "InitFailure";
    case ErrorCode::SweepFailure: return "SweepFailure";
    case ErrorCode::EvidenceFailure: return "EvidenceFailure";
    case ErrorCode::IngestError: return "IngestError";
    case ErrorCode::DegenerateInput: return "DegenerateInput";
    case ErrorCode::DegenerateKernel: return "DegenerateKernel";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::IoError: return "IoError";
  }
  return "UnknownError";
}

/// All library failures surface as this exception; `code` is stable for
/// programmatic handling, `where` names the operation that threw.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, std::string where, std::string detail)
      : std::runtime_error(std::string(to_string(code)) + " in " + where + ": " + detail),
        code_(code),
        where_(std::move(where)) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& where() const noexcept { return where_; }

 private:
  ErrorCode code_;
  std::string where_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& where, const std::string& detail) {
  throw Error(code, where, detail);
}

inline void require(bool ok, ErrorCode code, const std::string& where, const std::string& detail) {
  if (!ok) fail(code, where, detail);
}

}  // namespace mfar
