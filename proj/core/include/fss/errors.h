#pragma once

#include <stdexcept>
#include <string>

namespace fss {

// Base of every error raised by the library. The subclasses map one-to-one to
// the failure categories surfaced by the command line tool's exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents disagree with what an operation requires.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid hyper-parameter or configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Input data violates a domain invariant (non-binary mask, empty mask, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

// Operation invoked in the wrong lifecycle state.
class StateError : public Error {
 public:
  using Error::Error;
};

// Malformed container file. Carries the byte offset at which parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

// Episode sampling cannot satisfy its preconditions.
class SamplingError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace fss
