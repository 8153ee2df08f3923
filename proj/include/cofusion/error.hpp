#pragma once

#include <stdexcept>
#include <string>

namespace cofusion {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor or image dimensions.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Value outside the accepted range of an argument.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Invalid model or runtime configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Operation requested in a state that does not allow it (e.g. missing gradient).
class StateError : public Error {
 public:
  using Error::Error;
};

// Metric evaluated on data for which it is undefined.
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

// Inconsistent dataset contents.
class DataError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf encountered where a finite value is required.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  enum class Kind { open_failed, bad_magic, truncated_payload, size_mismatch, bad_header, write_failed };

  IoError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace cofusion
