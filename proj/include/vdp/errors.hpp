#pragma once

// Exception hierarchy shared by every module. All errors carry a readable
// message; a few carry a machine-checkable kind for callers that dispatch.

#include <stdexcept>
#include <string>

namespace vdp {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Incompatible tensor shapes (messages always name both shapes).
struct ShapeError : Error {
  using Error::Error;
};

// Numeric-domain violation: log of a nonpositive value, division by zero,
// Bernoulli data outside {0,1}, and the like.
struct DomainError : Error {
  using Error::Error;
};

// Invalid argument value (bad axis, empty size list, out-of-range t, ...).
struct ValueError : Error {
  using Error::Error;
};

// A computation produced a non-finite result.
struct NumericError : Error {
  using Error::Error;
};

// Filesystem / stream failure.
struct IoError : Error {
  using Error::Error;
};

// Config text could not be parsed or validated.
struct ConfigError : Error {
  using Error::Error;
};

// Checkpoint file rejected; kind() says why.
struct CheckpointError : Error {
  enum class Kind {
    BadMagic,
    VersionMismatch,
    Truncated,
    ChecksumMismatch,
    Malformed,
    MissingTensor,
    PriorMismatch,
  };

  CheckpointError(Kind k, const std::string& msg) : Error(msg), kind_(k) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

}  // namespace vdp
