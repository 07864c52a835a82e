#pragma once

#include <stdexcept>
#include <string>

namespace semiseg {

// Base for every error raised by the library. The CLI maps subclasses to
// process exit codes (config 2, data 3, numeric 4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Corrupt or inconsistent on-disk data.
class DataError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf detected where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A caller broke a documented precondition of the training protocol.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

}  // namespace semiseg
