#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lvfsr {

/// Broad failure category. The CLI prints it as the machine-readable error code.
enum class ErrorKind {
  shape,
  numeric,
  format,
  io,
  range,
  config,
  usage,
  state,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::shape: return "shape";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::format: return "format";
    case ErrorKind::io: return "io";
    case ErrorKind::range: return "range";
    case ErrorKind::config: return "config";
    case ErrorKind::usage: return "usage";
    case ErrorKind::state: return "state";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace lvfsr
