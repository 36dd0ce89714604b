#pragma once

#include <stdexcept>
#include <string>

namespace keycomp {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File could not be opened or read.
class LoadError : public Error {
 public:
  using Error::Error;
};

/// Malformed input. `line()` is 1-based, 0 when not line-oriented.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0) : Error(what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class TemplateError : public Error {
 public:
  using Error::Error;
};

/// Strict replay asked for a transcript that was never recorded.
class ReplayMissError : public Error {
 public:
  explicit ReplayMissError(const std::string& key)
      : Error("replay miss: no transcript recorded for key " + key), key_(key) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

/// Network failure or retryable HTTP status that survived every retry.
class TransportError : public Error {
 public:
  TransportError(const std::string& what, int status = 0) : Error(what), status_(status) {}
  int status() const noexcept { return status_; }

 private:
  int status_;
};

/// The endpoint answered but the answer is unusable (empty, rejected prompt, ...).
class ModelError : public Error {
 public:
  using Error::Error;
};

/// Compare-and-set failure, e.g. a second selection for the same slot.
class ConflictError : public Error {
 public:
  using Error::Error;
};

}  // namespace keycomp
