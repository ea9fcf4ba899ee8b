#pragma once

#include <stdexcept>
#include <string>

namespace id2face {

// Error categories double as process exit codes for the CLI.
enum class ErrorKind : int {
  kValidation = 1,
  kRuntime = 2,
  kIo = 3,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error(ErrorKind::kValidation, what) {}
};

class RangeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(ErrorKind::kRuntime, what) {}
};

class DegenerateError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class SamplingFailure : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class DatasetError : public Error {
 public:
  explicit DatasetError(const std::string& what) : Error(ErrorKind::kRuntime, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorKind::kIo, what) {}
};

}  // namespace id2face
