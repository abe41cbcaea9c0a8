#pragma once

#include <stdexcept>
#include <string>

namespace moelab {

// Exit-code taxonomy used by the CLI: usage errors are handled by the
// argument parser, ValidationError maps to exit 2, NumericalError to exit 3.
struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : ValidationError {
  explicit IoError(const std::string& msg) : ValidationError(msg) {}
};

// Container loading failures, kept distinct so callers can tell a stale file
// from a corrupt one.
struct BadMagicError : ValidationError {
  explicit BadMagicError(const std::string& msg) : ValidationError(msg) {}
};
struct BadVersionError : ValidationError {
  explicit BadVersionError(const std::string& msg) : ValidationError(msg) {}
};
struct BadDigestError : ValidationError {
  explicit BadDigestError(const std::string& msg) : ValidationError(msg) {}
};
struct BadShapeError : ValidationError {
  explicit BadShapeError(const std::string& msg) : ValidationError(msg) {}
};

}  // namespace moelab
