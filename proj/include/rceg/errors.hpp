#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace rceg {

/// Machine-readable error categories. The HTTP layer maps these onto status
/// codes and echoes the name in the error body.
enum class ErrorCode {
  kInvalidArgument,
  kValidation,
  kParse,
  kMissingField,
  kLengthOverflow,
  kShapeMismatch,
  kVersionMismatch,
  kCorruption,
  kIo,
  kMissingPrerequisite,
  kNonFinite,
  kUnavailable,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// A dataset record failed to load. Carries the 1-based line number and,
/// when applicable, the offending field.
class RecordError : public Error {
 public:
  RecordError(ErrorCode code, std::size_t line, std::string field,
              const std::string& message);

  std::size_t line() const noexcept { return line_; }
  const std::string& field() const noexcept { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

}  // namespace rceg
