#pragma once

#include <stdexcept>
#include <string>

namespace msrn {

// Base of every error the toolkit raises. code() is a stable, machine-parseable
// identifier; what() is the human message.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

#define MSRN_DEFINE_ERROR(Name, Code)                                   \
  class Name : public Error {                                           \
   public:                                                              \
    explicit Name(const std::string& message) : Error(Code, message) {} \
  }

MSRN_DEFINE_ERROR(ShapeError, "E_SHAPE");
MSRN_DEFINE_ERROR(NumericError, "E_NUMERIC");
MSRN_DEFINE_ERROR(ConfigError, "E_CONFIG");
MSRN_DEFINE_ERROR(DataError, "E_DATA");
MSRN_DEFINE_ERROR(UsageError, "E_USAGE");
MSRN_DEFINE_ERROR(IoError, "E_IO");
MSRN_DEFINE_ERROR(BadMagicError, "E_BAD_MAGIC");
MSRN_DEFINE_ERROR(TruncatedError, "E_TRUNCATED");
MSRN_DEFINE_ERROR(FormatError, "E_FORMAT");
MSRN_DEFINE_ERROR(DimensionMismatchError, "E_DIM_MISMATCH");
MSRN_DEFINE_ERROR(DegenerateError, "E_DEGENERATE");

#undef MSRN_DEFINE_ERROR

}  // namespace msrn
