#pragma once

#include <stdexcept>
#include <string>

namespace splitnn {

// Error taxonomy used across the library. Everything derives from Error so a
// CLI boundary can catch the whole family and map it to an exit code.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/layer dimension mismatches. Messages name the offending shapes.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// NaN/Inf encountered where finite values are required.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

// File-format or filesystem failures. Messages carry byte offsets when known.
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

// Operation attempted in the wrong lifecycle state (uninitialized running
// stats, phase ordering violations, checkpoint mismatches).
class StateError : public Error {
 public:
  explicit StateError(const std::string& msg) : Error(msg) {}
};

// Invalid user-supplied configuration.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

}  // namespace splitnn
