#pragma once

#include <stdexcept>
#include <string>

namespace cfpanel {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent configuration (bad keys, invalid parameter values).
class ConfigError : public Error {
public:
  using Error::Error;
};

/// Input data problems: unreadable files, non-numeric cells, unbalanced panels.
class DataError : public Error {
public:
  using Error::Error;
};

/// Numerical failure: singular moment matrices, non-invertible M(V), degenerate fits.
class NumericalError : public Error {
public:
  using Error::Error;
};

/// Raised when the conditional projector mean is numerically singular at a point.
class SingularMError : public NumericalError {
public:
  SingularMError(const std::string& what, double lambda_min)
      : NumericalError(what), lambda_min_(lambda_min) {}
  double lambda_min() const noexcept { return lambda_min_; }

private:
  double lambda_min_;
};

} // namespace cfpanel
