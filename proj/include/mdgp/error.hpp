#ifndef MDGP_ERROR_HPP
#define MDGP_ERROR_HPP

#include <stdexcept>
#include <string>

namespace mdgp {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Numerical failures: factorizations, non-finite objectives.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class NotPositiveDefinite : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class IllConditionedFisher : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

class DegenerateInput : public Error {
 public:
  using Error::Error;
};

class StaleCache : public Error {
 public:
  using Error::Error;
};

class NotOneHot : public Error {
 public:
  using Error::Error;
};

class EmptyInput : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Data ingestion.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, long line)
      : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  long line() const noexcept { return line_; }

 private:
  long line_;
};

class OverlappingSplits : public Error {
 public:
  using Error::Error;
};

class InsufficientClasses : public Error {
 public:
  using Error::Error;
};

class InsufficientRows : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace mdgp

#endif  // MDGP_ERROR_HPP
