#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace fcl {

enum class ErrorCode {
  ShapeMismatch,
  InvalidRate,
  ZeroNormRow,
  NonScalarLoss,
  NonFinite,
  InvalidConfig,
  EmptyCorpus,
  TooFewTokens,
  SentenceTooLong,
  EmptyTestSet,
  IoError,
  VersionMismatch,
  CorruptChecksum,
  PassMisalignment,
  WeightShapeMismatch,
  InvalidGoldId,
  NonFiniteLoss,
  LengthMismatch,
  EmptyText,
  TextTooShort,
  UndefinedDiversity,
  NotAPartition,
  DegenerateRow,
  SubsetTooSmall,
  BucketTooSmall,
  EigenFailure,
};

const char* error_code_name(ErrorCode code);

/// Single exception type for the library. `index()` carries the offending
/// row / bucket / step when the error refers to one.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message,
        std::optional<std::size_t> index = std::nullopt);

  ErrorCode code() const noexcept { return code_; }
  std::optional<std::size_t> index() const noexcept { return index_; }

 private:
  ErrorCode code_;
  std::optional<std::size_t> index_;
};

}  // namespace fcl
