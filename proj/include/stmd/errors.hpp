#pragma once

#include <stdexcept>
#include <string>

namespace stmd {

/// Raised when a computation produces non-finite values or diverges.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for malformed files (bad magic, version, or payload).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace stmd
