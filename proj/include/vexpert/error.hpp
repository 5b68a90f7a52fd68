// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace vexpert {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes; the message names the shapes involved.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Numerically degenerate input, e.g. a softmax row with every entry masked.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument or violated precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Malformed configuration document.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Filesystem or file-format failure.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Text that failed to parse; `offset()` is the first offending character.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " at offset " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Record that violates a dataset schema; `line()` is 1-based.
class DataError : public Error {
 public:
  DataError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace vexpert
