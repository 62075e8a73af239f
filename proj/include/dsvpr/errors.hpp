#pragma once

#include <stdexcept>
#include <string>

namespace dsvpr {

// Error categories used across the library. All derive from std::runtime_error
// so callers can catch broadly or per category.

struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ParameterError : std::runtime_error {
  explicit ParameterError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IndexError : std::runtime_error {
  explicit IndexError(const std::string& msg) : std::runtime_error(msg) {}
};

struct EvaluationError : std::runtime_error {
  explicit EvaluationError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// File container problems (bad magic, version, truncation). Carries the byte
// offset at which the problem was detected.
struct FormatError : std::runtime_error {
  FormatError(const std::string& msg, std::uint64_t at_offset)
      : std::runtime_error(msg + " (at byte offset " + std::to_string(at_offset) + ")"),
        offset(at_offset) {}
  std::uint64_t offset;
};

struct DegenerateGeometryError : std::runtime_error {
  explicit DegenerateGeometryError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace dsvpr
