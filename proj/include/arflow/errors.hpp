#pragma once

#include <stdexcept>
#include <string>

namespace arflow {

// Caller broke a precondition (shape mismatch, out-of-range argument).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Input data could not be used: unreadable file, bad image, too small for a crop.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Missing, corrupt, or version-mismatched checkpoint.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Autodiff misuse: backward on a consumed tape, non-scalar root.
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractError(what);
}

}  // namespace detail
}  // namespace arflow
