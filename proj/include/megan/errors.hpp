#pragma once

#include <stdexcept>
#include <string>

namespace megan {

/// Base of every error raised by the library. `kind()` is a stable
/// machine-readable tag used by the CLI error line.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& m) : Error("ShapeError", m) {}
};
struct DomainError : Error {
  explicit DomainError(const std::string& m) : Error("DomainError", m) {}
};
struct StateError : Error {
  explicit StateError(const std::string& m) : Error("StateError", m) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("ConfigError", m) {}
};
struct EmptyInput : Error {
  explicit EmptyInput(const std::string& m) : Error("EmptyInput", m) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error("NumericError", m) {}
};
struct IoError : Error {
  explicit IoError(const std::string& m) : Error("IoError", m) {}
};
struct ConfigHashError : Error {
  explicit ConfigHashError(const std::string& m) : Error("ConfigHashError", m) {}
};

}  // namespace megan
