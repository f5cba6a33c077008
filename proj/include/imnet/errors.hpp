#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace imnet {

// shape or dimensionality violation in a tensor operation
class dimension_error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// API misuse: wrong tape, non-scalar root, bad argument range, bad input ids
class usage_error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// invalid configuration value (rejected before any computation starts)
class config_error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// non-finite value produced by an iterative numeric procedure;
// carries the iteration index where it was detected
class numeric_divergence_error : public std::runtime_error {
public:
  numeric_divergence_error(const std::string& msg, int64_t step)
      : std::runtime_error(msg), step_(step) {}
  int64_t step() const noexcept { return step_; }

private:
  int64_t step_;
};

}  // namespace imnet
