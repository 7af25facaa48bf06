#pragma once

#include <stdexcept>
#include <string>

namespace ptp {

/// Invalid configuration or shape: maps to exit code 2 at the CLI.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// API misuse (stepping a finished episode, double backward, ...): exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN/Inf produced during computation.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Cache or checkpoint fingerprint does not match what is being used with it.
class StaleCacheError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ptp
