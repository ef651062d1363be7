#pragma once

#include <stdexcept>
#include <string>

namespace mixline {

// Error taxonomy mirrored by the CLI exit codes:
//   ConfigError/FormatError/CorruptionError -> 2,
//   CollectionError/CompositionError -> 3, NumericError -> 4.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Recognizable file with an unsupported layout or version.
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : std::invalid_argument {
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CollectionError : std::runtime_error {
  explicit CollectionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CompositionError : std::runtime_error {
  explicit CompositionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CorruptionError : std::runtime_error {
  explicit CorruptionError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mixline
