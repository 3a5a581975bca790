#pragma once

#include <stdexcept>
#include <string>

namespace kgcl {

// Error taxonomy mirrors the CLI exit codes: config 1, numeric 2, io 3.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace kgcl
