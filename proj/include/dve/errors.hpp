#pragma once

#include <stdexcept>
#include <string>

namespace dve {

// Each error family maps to one CLI exit code (see tools/dve_main.cpp).

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace dve

namespace dve {

/// A training pair with no valid correspondences left after masking.
struct UnusablePairError : DataError {
  using DataError::DataError;
};

}  // namespace dve
