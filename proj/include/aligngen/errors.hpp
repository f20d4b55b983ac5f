#pragma once

#include <stdexcept>
#include <string>

namespace aligngen {

// Shape or dimension contract violated by an operation's inputs.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf produced or consumed, or training diverged.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent input data (files, prompts, catalogs).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Precondition on a caller-supplied argument.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace aligngen
