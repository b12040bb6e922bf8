#pragma once

#include <stdexcept>
#include <string>

namespace mflow {

// Numeric values mirror the C API status codes in c_api.h.
enum class ErrorCode : int {
  kShape = 10,
  kDomain = 11,
  kParameter = 12,
  kFormat = 13,
  kIntegrity = 14,
  kCoverage = 15,
  kUsage = 16,
  kIo = 17,
  kNumeric = 18,
  kPlan = 19,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

#define MFLOW_DEFINE_ERROR(Name, Code)                                 \
  class Name : public Error {                                          \
   public:                                                             \
    explicit Name(const std::string& what) : Error(Code, what) {}      \
  };

MFLOW_DEFINE_ERROR(ShapeError, ErrorCode::kShape)
MFLOW_DEFINE_ERROR(DomainError, ErrorCode::kDomain)
MFLOW_DEFINE_ERROR(ParameterError, ErrorCode::kParameter)
MFLOW_DEFINE_ERROR(FormatError, ErrorCode::kFormat)
MFLOW_DEFINE_ERROR(IntegrityError, ErrorCode::kIntegrity)
MFLOW_DEFINE_ERROR(CoverageError, ErrorCode::kCoverage)
MFLOW_DEFINE_ERROR(UsageError, ErrorCode::kUsage)
MFLOW_DEFINE_ERROR(IoError, ErrorCode::kIo)
MFLOW_DEFINE_ERROR(NumericError, ErrorCode::kNumeric)
MFLOW_DEFINE_ERROR(PlanError, ErrorCode::kPlan)

#undef MFLOW_DEFINE_ERROR

}  // namespace mflow
