#pragma once

#include <stdexcept>
#include <string>

namespace lmlab {

// Error taxonomy used across the library. Everything derives from
// std::runtime_error so callers can catch broadly; the CLI maps the
// concrete types onto exit codes.

// Mismatched extents, overlong sequences, rank problems.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Token id outside [0, V) or position outside a table.
struct IndexError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// API misuse: non-scalar loss, double backward, bad batch sizes.
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid user-facing configuration (regimes, schedules, experiment files).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Unusable corpus input (empty file, split too short).
struct IngestionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// NaN/Inf surfaced where finite values are required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A referenced run directory, checkpoint, or report does not exist.
struct MissingArtifactError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace lmlab
