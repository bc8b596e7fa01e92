#pragma once

#include <stdexcept>
#include <string>

namespace musclab {

// Error taxonomy. The C API maps these onto status codes and the CLI onto
// exit codes, so new error kinds need entries in both tables.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace musclab
