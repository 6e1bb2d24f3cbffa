#pragma once

#include <iostream>
#include <stdexcept>
#include <string>

namespace mossl {

// Exit-code families used by the CLI: 1 config, 2 data, 3 numerical.

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class CheckpointError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DomainError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

namespace logging {

inline bool& quiet() {
  static bool q = false;
  return q;
}

inline void info(const std::string& msg) {
  if (!quiet()) std::cerr << msg << '\n';
}

inline void warn(const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }

}  // namespace logging
}  // namespace mossl
