#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace xgram {

// Base of every error thrown by the library. The CLI maps the concrete
// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad parameters, inconsistent configs, out-of-range IDs. Exit code 2.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// A token ID outside the vocabulary, with the stream position that held it.
class TokenRangeError : public ValidationError {
 public:
  TokenRangeError(std::size_t position, std::size_t token, std::size_t vocab_size)
      : ValidationError("token id " + std::to_string(token) + " at position " +
                        std::to_string(position) + " is outside vocabulary of size " +
                        std::to_string(vocab_size)),
        position_(position) {}

  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

// Non-finite loss or parameters during training. Exit code 3.
class NumericError : public Error {
 public:
  using Error::Error;
};

// File system failures. Exit code 4.
class IoError : public Error {
 public:
  using Error::Error;
};

// Corrupt, truncated or otherwise unparseable artifact.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

// Well-formed artifact with an unsupported version tag.
class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace xgram
