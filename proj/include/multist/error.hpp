#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace multist {

enum class ErrorCode {
  // configuration
  InvalidArgument,
  UnknownConfigKey,
  // data
  MissingFile,
  BarcodeMismatch,
  MalformedRow,
  EmptyResult,
  EmbeddingShapeMismatch,
  MissingEmbeddingFile,
  CenterOutsideImage,
  RowMisalignment,
  DimensionMismatch,
  // numerical
  NonFinite,
  TooFewPoints,
  TooFewSpots,
  DegenerateCluster,
  ZeroBandwidth,
  SampleTooSmall,
  SingleRow,
  EmptyGenerated,
  TooFewQualifiedPatches,
  DegenerateStats,
  DivergedLoss,
  ClusterCollapse,
};

enum class ErrorCategory { Config, Data, Numerical };

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::UnknownConfigKey: return "UnknownConfigKey";
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::BarcodeMismatch: return "BarcodeMismatch";
    case ErrorCode::MalformedRow: return "MalformedRow";
    case ErrorCode::EmptyResult: return "EmptyResult";
    case ErrorCode::EmbeddingShapeMismatch: return "EmbeddingShapeMismatch";
    case ErrorCode::MissingEmbeddingFile: return "MissingEmbeddingFile";
    case ErrorCode::CenterOutsideImage: return "CenterOutsideImage";
    case ErrorCode::RowMisalignment: return "RowMisalignment";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::TooFewPoints: return "TooFewPoints";
    case ErrorCode::TooFewSpots: return "TooFewSpots";
    case ErrorCode::DegenerateCluster: return "DegenerateCluster";
    case ErrorCode::ZeroBandwidth: return "ZeroBandwidth";
    case ErrorCode::SampleTooSmall: return "SampleTooSmall";
    case ErrorCode::SingleRow: return "SingleRow";
    case ErrorCode::EmptyGenerated: return "EmptyGenerated";
    case ErrorCode::TooFewQualifiedPatches: return "TooFewQualifiedPatches";
    case ErrorCode::DegenerateStats: return "DegenerateStats";
    case ErrorCode::DivergedLoss: return "DivergedLoss";
    case ErrorCode::ClusterCollapse: return "ClusterCollapse";
  }
  return "Unknown";
}

constexpr ErrorCategory category_of(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument:
    case ErrorCode::UnknownConfigKey:
      return ErrorCategory::Config;
    case ErrorCode::MissingFile:
    case ErrorCode::BarcodeMismatch:
    case ErrorCode::MalformedRow:
    case ErrorCode::EmptyResult:
    case ErrorCode::EmbeddingShapeMismatch:
    case ErrorCode::MissingEmbeddingFile:
    case ErrorCode::CenterOutsideImage:
    case ErrorCode::RowMisalignment:
    case ErrorCode::DimensionMismatch:
      return ErrorCategory::Data;
    default:
      return ErrorCategory::Numerical;
  }
}

/// Single exception type for the library; `code()` identifies the failure.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }
  ErrorCategory category() const noexcept { return category_of(code_); }

 private:
  ErrorCode code_;
};

/// Re-throws `e` with a stage prefix, keeping the code.
[[noreturn]] inline void rethrow_with_context(const Error& e, std::string_view stage) {
  std::string msg = e.what();
  throw Error(e.code(), std::string(stage) + ": " + msg.substr(msg.find(": ") + 2));
}

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) throw Error(code, what);
}

}  // namespace multist
