#pragma once

#include <stdexcept>
#include <string>

namespace dx {

// Every domain failure derives from Error; the CLI maps these to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define DX_DEFINE_ERROR(Name)            \
  class Name : public Error {            \
   public:                               \
    using Error::Error;                  \
  }

DX_DEFINE_ERROR(FormatError);
DX_DEFINE_ERROR(DimensionError);
DX_DEFINE_ERROR(DataError);
DX_DEFINE_ERROR(NotFoundError);
DX_DEFINE_ERROR(EmptySupportError);
DX_DEFINE_ERROR(ZeroNormError);
DX_DEFINE_ERROR(ConfigError);
DX_DEFINE_ERROR(EmptyHighlightError);
DX_DEFINE_ERROR(InsufficientSupportError);
DX_DEFINE_ERROR(NoTumorError);
DX_DEFINE_ERROR(TemplateError);
DX_DEFINE_ERROR(ContractError);
DX_DEFINE_ERROR(SessionError);
DX_DEFINE_ERROR(EmptyEvalError);

#undef DX_DEFINE_ERROR

class BackendUnavailable : public Error {
 public:
  BackendUnavailable(const std::string& what, int attempts)
      : Error(what), attempts_(attempts) {}
  int attempts() const noexcept { return attempts_; }

 private:
  int attempts_;
};

class BackendRejected : public Error {
 public:
  BackendRejected(int status, std::string body)
      : Error("backend rejected request with status " + std::to_string(status)),
        status_(status),
        body_(std::move(body)) {}
  int status() const noexcept { return status_; }
  const std::string& body() const noexcept { return body_; }

 private:
  int status_;
  std::string body_;
};

}  // namespace dx
