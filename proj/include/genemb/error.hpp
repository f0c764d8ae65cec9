#pragma once

#include <stdexcept>
#include <string>

namespace genemb {

// Base class for every error raised by the library. The CLI maps the
// subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, degenerate numerics, aborted optimisation steps.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Response grammar / template violations.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Missing, truncated or inconsistent data files.
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace genemb
