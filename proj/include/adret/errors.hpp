#pragma once

#include <stdexcept>
#include <string>

namespace adret {

// Base class for all library failures. Subclasses distinguish the broad
// failure families so callers (and the command-line driver) can map them
// to distinct exit codes or retry policies.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad user input: malformed config files, unknown keys, invalid flag values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent dataset files (dangling ids, bad JSON lines, ...).
class IngestionError : public Error {
 public:
  using Error::Error;
};

// Operands with incompatible dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Vectors with (near-)zero norm fed into direction-sensitive operations.
class DegenerateVectorError : public NumericError {
 public:
  using NumericError::NumericError;
};

// A forward-pass record replayed against parameters it was not produced by.
class TapeError : public Error {
 public:
  using Error::Error;
};

// Embedding service failures: transport errors, bad payloads, wrong
// dimensions, exhausted retries, missing credentials.
class ProviderError : public Error {
 public:
  using Error::Error;
};

// Index misuse: duplicate ids, stale derived embeddings, no legal negative.
class IndexError : public Error {
 public:
  using Error::Error;
};

// A query split that would leave one side empty, or similar.
class SplitError : public Error {
 public:
  using Error::Error;
};

// Training left the healthy regime: non-finite loss/gradients or a loss
// blow-up past the configured guard factor.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

// A metric that is mathematically undefined for the given inputs.
class MetricError : public Error {
 public:
  using Error::Error;
};

// Corrupt or truncated artifact files (checkpoints, caches, snapshots).
class SerializationError : public Error {
 public:
  using Error::Error;
};

}  // namespace adret
