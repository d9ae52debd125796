#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace vflbd {

enum class ErrorKind {
  Format,
  Alignment,
  Scheme,
  Scarcity,
  Configuration,
  Contract,
  Numeric,
  Connectivity,
  Placement,
  Geometry,
  Domain,
  Precondition,
  Estimation,
  Degenerate,
  Io,
};

std::string_view to_string(ErrorKind kind);

// Every failure raised by the library carries a kind so callers (and tests)
// can distinguish e.g. an alignment error from a scheme error.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind), detail_(what) {}

  ErrorKind kind() const noexcept { return kind_; }
  // Message without the kind prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorKind kind_;
  std::string detail_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace vflbd
