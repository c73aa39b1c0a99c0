#include "fcl/error.hpp"

namespace fcl {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::InvalidRate: return "InvalidRate";
    case ErrorCode::ZeroNormRow: return "ZeroNormRow";
    case ErrorCode::NonScalarLoss: return "NonScalarLoss";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::EmptyCorpus: return "EmptyCorpus";
    case ErrorCode::TooFewTokens: return "TooFewTokens";
    case ErrorCode::SentenceTooLong: return "SentenceTooLong";
    case ErrorCode::EmptyTestSet: return "EmptyTestSet";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::CorruptChecksum: return "CorruptChecksum";
    case ErrorCode::PassMisalignment: return "PassMisalignment";
    case ErrorCode::WeightShapeMismatch: return "WeightShapeMismatch";
    case ErrorCode::InvalidGoldId: return "InvalidGoldId";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::EmptyText: return "EmptyText";
    case ErrorCode::TextTooShort: return "TextTooShort";
    case ErrorCode::UndefinedDiversity: return "UndefinedDiversity";
    case ErrorCode::NotAPartition: return "NotAPartition";
    case ErrorCode::DegenerateRow: return "DegenerateRow";
    case ErrorCode::SubsetTooSmall: return "SubsetTooSmall";
    case ErrorCode::BucketTooSmall: return "BucketTooSmall";
    case ErrorCode::EigenFailure: return "EigenFailure";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message,
             std::optional<std::size_t> index)
    : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
      code_(code),
      index_(index) {}

}  // namespace fcl
