// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace polypseg {

/// Base class for every error this library raises on purpose.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Tensor dimensions do not satisfy an operation's requirements.
class ShapeError : public Error {
public:
  explicit ShapeError(const std::string& what) : Error(what) {}
};

/// An argument violates a documented precondition (non-shape).
class ContractError : public Error {
public:
  explicit ContractError(const std::string& what) : Error(what) {}
};

/// Invalid configuration (architecture sizes, CLI-level settings).
class ConfigError : public Error {
public:
  explicit ConfigError(const std::string& what) : Error(what) {}
};

/// Filesystem-level failure (open, read, write).
class IoError : public Error {
public:
  explicit IoError(const std::string& what) : Error(what) {}
};

/// Malformed file contents. Carries the byte offset where parsing stopped.
class FormatError : public Error {
public:
  FormatError(const std::string& what, std::size_t byte_offset)
      : Error(what + " (byte offset " + std::to_string(byte_offset) + ")"),
        offset_(byte_offset) {}

  std::size_t byte_offset() const { return offset_; }

private:
  std::size_t offset_;
};

}  // namespace polypseg
