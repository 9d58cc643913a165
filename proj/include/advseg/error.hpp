#pragma once

#include <stdexcept>
#include <string>

namespace advseg {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents or channel counts do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A forward value came out NaN or infinite. `op()` names the producing op.
class NonFiniteError : public Error {
 public:
  explicit NonFiniteError(std::string op)
      : Error("non-finite value produced by op '" + op + "'"), op_(std::move(op)) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

/// Invalid architecture, schedule, or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// File-system or serialization failure.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace advseg
