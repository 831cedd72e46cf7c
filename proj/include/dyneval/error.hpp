#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dyneval {

// Base of every library error. The CLI maps ValidationError (and subclasses)
// to exit code 2 and DivergenceError to exit code 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ValidationError : Error {
  using Error::Error;
};

struct ShapeError : ValidationError {
  using ValidationError::ValidationError;
};

struct FormatError : ValidationError {
  using ValidationError::ValidationError;
};

struct ConfigError : ValidationError {
  using ValidationError::ValidationError;
};

// Non-finite loss or parameters. `segment` is the segment (or batch) index at
// which the problem surfaced.
struct DivergenceError : Error {
  DivergenceError(const std::string& what, std::size_t segment)
      : Error(what + " (segment " + std::to_string(segment) + ")"),
        segment(segment) {}
  std::size_t segment;
};

}  // namespace dyneval
