#pragma once

#include <stdexcept>
#include <string>

namespace heros {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A precondition or configuration value is out of range.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file. Carries the offending line (1-based, 0 if unknown).
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(line > 0 ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Operands of an array operation have incompatible shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of an operation (log of <= 0, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A feature vector or plan has no usable content (zero norm, zero variance, zero mass).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

/// Training or a solver produced non-finite values.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Filesystem access failed.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace heros
