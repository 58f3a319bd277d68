#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace pan {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inconsistent tensor extents. `dimension()` names the offending axis or field.
class ShapeError : public Error {
 public:
  ShapeError(std::string dimension, const std::string& message)
      : Error(message), dimension_(std::move(dimension)) {}
  const std::string& dimension() const noexcept { return dimension_; }

 private:
  std::string dimension_;
};

/// NaN or Inf produced where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value; `field()` names the key.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& message)
      : Error(message), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Malformed or truncated file payload; `offset()` is the byte position where parsing failed.
class FormatError : public Error {
 public:
  FormatError(std::uint64_t offset, const std::string& message)
      : Error(message + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace pan
