#pragma once

#include <stdexcept>
#include <string>

namespace gs {

struct ShapeMismatchError : std::runtime_error {
  explicit ShapeMismatchError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NonFiniteImageError : std::runtime_error {
  explicit NonFiniteImageError(const std::string& msg) : std::runtime_error(msg) {}
};

struct GroupDivisibilityError : std::runtime_error {
  explicit GroupDivisibilityError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct BadMagicError : IoError {
  explicit BadMagicError(const std::string& msg) : IoError(msg) {}
};

struct TruncatedPayloadError : IoError {
  explicit TruncatedPayloadError(const std::string& msg) : IoError(msg) {}
};

struct BitDepthError : IoError {
  explicit BitDepthError(const std::string& msg) : IoError(msg) {}
};

struct TrainingAbort : std::runtime_error {
  explicit TrainingAbort(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace gs
