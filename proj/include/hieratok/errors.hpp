#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hieratok {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes do not conform for an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An axis or element index is out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Spatial sizes are incompatible with a stride or kernel.
class ShapeError : public DimensionError {
 public:
  using DimensionError::DimensionError;
};

/// NaN/Inf encountered where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid model, run, or scale configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Scale list is not strictly ascending or does not end at the base grid.
class ScheduleError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Malformed file contents. `offset()` is the byte position where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Bad command line or unknown configuration key.
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace hieratok
