#pragma once

#include <stdexcept>
#include <string>

namespace layerlens {

// Broad failure categories. The CLI maps these onto process exit codes.
enum class ErrorKind {
  kConfig,       // invalid configuration or arguments
  kIo,           // filesystem problems, unwritable paths
  kFormat,       // corrupt or inconsistent dump / map files
  kEnvironment,  // unreachable endpoint, missing external resources
  kProtocol,     // malformed request or response on the resume wire
  kCompute,      // numerical failure (divergence, non-finite values)
  kUnsupported,  // operation not defined for the given map class
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Thrown by the resume client for timeouts and transient network failures.
class RetryableError : public Error {
 public:
  explicit RetryableError(const std::string& what)
      : Error(ErrorKind::kEnvironment, what) {}
};

}  // namespace layerlens
