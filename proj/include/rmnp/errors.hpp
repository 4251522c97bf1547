#pragma once

#include <stdexcept>
#include <string>

namespace rmnp {

/// A caller broke an operation's precondition (shape mismatch, empty split, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed or inconsistent on-disk data. The message names the file and line.
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training or inference produced a non-finite value.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace rmnp
