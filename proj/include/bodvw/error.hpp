#pragma once

#include <stdexcept>
#include <string>

namespace bodvw {

/// Base for every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad user input: malformed manifest, invalid config value, unknown option.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// File could not be parsed (wrong magic, truncated, checksum mismatch, version).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// I/O failures (missing or unreadable files, unwritable paths).
class IoError : public Error {
 public:
  using Error::Error;
};

/// A precondition on the shape or state of numerical inputs was violated.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Two artifacts that must agree (codebook/model/layer) do not.
class CompatibilityError : public Error {
 public:
  using Error::Error;
};

/// The network could not be evaluated (unsupported operator, missing tensor).
class InferenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace bodvw
