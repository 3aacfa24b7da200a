#pragma once

#include <stdexcept>
#include <string>

namespace admkd {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define ADMKD_DEFINE_ERROR(Name)            \
  class Name : public Error {               \
   public:                                  \
    using Error::Error;                     \
  }

// Tensor layer.
ADMKD_DEFINE_ERROR(DimensionError);
ADMKD_DEFINE_ERROR(ParameterError);
ADMKD_DEFINE_ERROR(ContractError);

// Models and losses.
ADMKD_DEFINE_ERROR(SpecError);
ADMKD_DEFINE_ERROR(InputError);
ADMKD_DEFINE_ERROR(AdapterError);
ADMKD_DEFINE_ERROR(LabelError);
ADMKD_DEFINE_ERROR(PairingError);
ADMKD_DEFINE_ERROR(CacheError);

// Training, data and persistence.
ADMKD_DEFINE_ERROR(ConfigError);
ADMKD_DEFINE_ERROR(OptimizerError);
ADMKD_DEFINE_ERROR(PlanError);
ADMKD_DEFINE_ERROR(DataError);
ADMKD_DEFINE_ERROR(FormatError);
ADMKD_DEFINE_ERROR(CheckpointError);
ADMKD_DEFINE_ERROR(AnalysisError);
ADMKD_DEFINE_ERROR(PathError);

#undef ADMKD_DEFINE_ERROR

/// A loss component evaluated to NaN or Inf.
class NumericError : public Error {
 public:
  NumericError(std::string component, const std::string& what)
      : Error(what), component_(std::move(component)) {}
  const std::string& component() const noexcept { return component_; }

 private:
  std::string component_;
};

}  // namespace admkd
