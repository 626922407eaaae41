#pragma once

#include <stdexcept>
#include <string>

namespace tpr {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or an invalid axis.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, solver non-convergence, invalid numeric arguments.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values or inconsistent option combinations.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failures (unreadable / unwritable paths).
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed on-disk artifacts. `kind()` distinguishes the failure.
class FormatError : public Error {
 public:
  enum class Kind { BadMagic, TruncatedHeader, TruncatedPayload, SizeMismatch, InvalidHeader, CrcMismatch, Incompatible };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace tpr
