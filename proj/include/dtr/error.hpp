#pragma once

#include <stdexcept>
#include <string>

namespace dtr {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Argument outside the operation's domain (bad step index, width mismatch, single-arm data).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A dataset or bundle does not match the expected column layout.
class SchemaError : public Error {
 public:
  SchemaError(const std::string& column, const std::string& what)
      : Error(what), column_(column) {}
  const std::string& column() const noexcept { return column_; }

 private:
  std::string column_;
};

/// Malformed input text. `row` is the 1-based data row (0 for header problems).
class ParseError : public Error {
 public:
  ParseError(std::size_t row, const std::string& what) : Error(what), row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

/// Well-formed input that violates a value constraint (e.g. a treatment outside {0,1}).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A model fit that cannot produce usable estimates (separation, no valid root leaf).
class DegenerateFitError : public Error {
 public:
  using Error::Error;
};

/// The forest neighbourhood of a query carries no treatment variation.
class UndefinedEffectError : public Error {
 public:
  using Error::Error;
};

/// An internal precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace dtr
