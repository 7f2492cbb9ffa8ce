#pragma once

#include <stdexcept>
#include <string>

namespace ospd {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
  using Error::Error;
};

struct EmptyPartitionError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct CacheError : Error {
  using Error::Error;
};

struct CorpusError : Error {
  using Error::Error;
};

// Raised when fewer than lambda_min virtual prompts can be built.
struct ObfuscationAbort : Error {
  using Error::Error;
};

struct ProtocolError : Error {
  using Error::Error;
};

// Any use of a released weight handle.
struct WeightAccessError : Error {
  using Error::Error;
};

}  // namespace ospd
