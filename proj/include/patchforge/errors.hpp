#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace patchforge {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or layer chains that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the domain an operation is defined on.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Class label or element index out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Bad training data (e.g. a label the network cannot emit).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary file. Carries the byte offset where decoding failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), reason_(what), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }
  const std::string& reason() const noexcept { return reason_; }

  /// Same failure, prefixed with the file it came from.
  FormatError in_file(const std::string& path) const { return {path + ": " + reason_, offset_}; }

 private:
  std::string reason_;
  std::uint64_t offset_;
};

/// Filesystem failure; the message always names the path.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Invalid run configuration or manifest content.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint that cannot serve the requested role (wrong class count,
/// missing parameters, mismatched stage).
class CheckpointError : public Error {
 public:
  using Error::Error;
};

/// Synthetic case generation could not satisfy its constraints.
class GenerationError : public Error {
 public:
  using Error::Error;
};

}  // namespace patchforge
