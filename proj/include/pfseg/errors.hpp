#pragma once

#include <stdexcept>
#include <string>

namespace pfseg {

enum class ErrorKind {
  InvalidShape,
  ShapeMismatch,
  InvalidGeometry,
  Contract,
  Numeric,
  Checkpoint,
  Config,
  Io,
};

const char* to_string(ErrorKind kind);

/// Library-wide exception. Every failure carries a kind so the CLI can map
/// it to an exit code without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) throw Error(kind, message);
}

}  // namespace pfseg
