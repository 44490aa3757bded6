#include "rceg/errors.hpp"

namespace rceg {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kValidation: return "validation_error";
    case ErrorCode::kParse: return "parse_error";
    case ErrorCode::kMissingField: return "missing_field";
    case ErrorCode::kLengthOverflow: return "length_overflow";
    case ErrorCode::kShapeMismatch: return "shape_mismatch";
    case ErrorCode::kVersionMismatch: return "version_mismatch";
    case ErrorCode::kCorruption: return "corruption";
    case ErrorCode::kIo: return "io_error";
    case ErrorCode::kMissingPrerequisite: return "missing_prerequisite";
    case ErrorCode::kNonFinite: return "non_finite";
    case ErrorCode::kUnavailable: return "service_unavailable";
  }
  return "unknown";
}

RecordError::RecordError(ErrorCode code, std::size_t line, std::string field,
                         const std::string& message)
    : Error(code, "line " + std::to_string(line) +
                      (field.empty() ? "" : " field '" + field + "'") + ": " +
                      message),
      line_(line),
      field_(std::move(field)) {}

}  // namespace rceg
