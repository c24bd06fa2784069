#pragma once

#include <stdexcept>
#include <string>

namespace ppks {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents or dimensions that do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Argument outside its documented domain.
class ValueError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss, gradient or coordinate during optimization.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// File system, PNG or checkpoint format problems.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace ppks
