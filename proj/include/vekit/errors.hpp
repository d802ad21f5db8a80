#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace vekit {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Input lies outside the mathematical domain of the operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Inconsistent or unsupported configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A required field is missing or has the wrong type.
class SchemaError : public Error {
 public:
  using Error::Error;
};

/// A referenced input (feature file, caption, checkpoint) does not exist.
class NotFoundError : public Error {
 public:
  using Error::Error;
};

/// Text input could not be parsed; carries the 1-based line number.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Binary file has the wrong magic, version or header layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Binary payload ended early or is internally inconsistent.
class CorruptionError : public Error {
 public:
  CorruptionError(std::size_t offset, const std::string& what)
      : Error("byte offset " + std::to_string(offset) + ": " + what), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace vekit
