#pragma once

#include <stdexcept>
#include <string>

namespace nnm {

/// Root of every error raised by the library. `exit_code()` is the process
/// exit status the CLI maps the error to.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 2; }
};

// Shape or extent mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Caller broke an API precondition (e.g. backward on a non-scalar).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Invalid input values (e.g. soft-label rows not summing to one).
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 1; }
};

class DataError : public Error {
 public:
  using Error::Error;
};

class FormatError : public DataError {
 public:
  using DataError::DataError;
};

class CompatibilityError : public DataError {
 public:
  using DataError::DataError;
};

class NumericalError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

// A metric has no defined value for the given input (e.g. AUC with a single
// class present). Reports carry these as absent values with the message.
class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

}  // namespace nnm
