#pragma once

#include <stdexcept>
#include <string>

namespace densiscope {

// Root of the library's exception hierarchy. The CLI maps each subclass to an
// exit code: ValidationError -> 2, NumericError -> 3, IoError -> 4.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid arguments, parameters or configuration.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Tensor dimensions that do not fit together.
class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Non-finite values or other numerical breakdown at run time.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// File system and serialization failures.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace densiscope
