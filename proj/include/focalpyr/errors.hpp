#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace focalpyr {

// Root of every error thrown by the library. The CLI maps subclasses onto
// process exit codes (see exit_code()).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

/// Shape or length mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

/// Input value outside an operation's mathematical domain (log of a
/// nonpositive number, probability outside [0,1], ...).
class DomainError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

/// Invalid hyperparameter (negative gamma, nonpositive temperature, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// Caller broke an API precondition (non-scalar backward root, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

class FormatError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

class TruncationError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ParseError : public FormatError {
 public:
  ParseError(std::size_t line, const std::string& what)
      : FormatError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class SchemaError : public FormatError {
 public:
  using FormatError::FormatError;
};

class IoError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

/// Non-finite loss or prediction during training.
class NumericError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 4; }
};

}  // namespace focalpyr
