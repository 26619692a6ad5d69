#pragma once

#include <stdexcept>
#include <string>

namespace emorag {

// Base for everything this library throws on purpose. The CLI maps these
// onto exit codes: input/validation failures -> 2, stale artifacts -> 3,
// endpoint/protocol failures -> 4.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dimension or layout mismatch between tensors, vectors, or tables.
struct ShapeError : Error {
  using Error::Error;
};

// Input data violates a documented invariant (range, uniqueness, schema).
struct ValidationError : Error {
  using Error::Error;
};

// A file or record could not be ingested (missing file, short read).
struct IngestError : ValidationError {
  using ValidationError::ValidationError;
};

// Structurally malformed on-disk content (ragged rows, bad header).
struct FormatError : ValidationError {
  using ValidationError::ValidationError;
};

// An operation was called outside its contract.
struct PreconditionError : Error {
  using Error::Error;
};

// Non-finite values where finite math was required.
struct NumericError : Error {
  using Error::Error;
};

// A referenced artifact (record id, prompt, sample) cannot be resolved.
struct ProvenanceError : Error {
  using Error::Error;
};

// Stored content fails its own integrity checks.
struct CorruptionError : Error {
  using Error::Error;
};

// A cached artifact no longer matches the inputs it was derived from.
struct StaleCacheError : Error {
  using Error::Error;
};

// Remote endpoint unreachable or persistently failing.
struct EndpointError : Error {
  using Error::Error;
};

// Remote endpoint answered, but not in the agreed shape.
struct ProtocolError : Error {
  using Error::Error;
};

}  // namespace emorag
