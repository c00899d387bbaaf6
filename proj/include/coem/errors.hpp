#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace coem {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller supplied something outside a documented range or shape.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// No alive fragment to select from.
class EmptyPoolError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

// State transition that has already happened (e.g. feedback submitted twice).
class ConflictError : public Error {
 public:
  using Error::Error;
};

class StorageError : public Error {
 public:
  using Error::Error;
};

class CorruptLogError : public Error {
 public:
  CorruptLogError(std::size_t line, const std::string& what)
      : Error("event log line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class AttributionError : public Error {
 public:
  explicit AttributionError(const std::string& what, std::optional<std::size_t> index = std::nullopt)
      : Error(index ? what + " (fragment index " + std::to_string(*index) + ")" : what), index_(index) {}
  std::optional<std::size_t> index() const { return index_; }

 private:
  std::optional<std::size_t> index_;
};

enum class BackendErrorKind { auth, timeout, transient, malformed, unavailable };

const char* to_string(BackendErrorKind kind);

class BackendError : public Error {
 public:
  BackendError(BackendErrorKind kind, const std::string& what)
      : Error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}
  BackendErrorKind kind() const { return kind_; }

 private:
  BackendErrorKind kind_;
};

}  // namespace coem
