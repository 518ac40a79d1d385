#pragma once

#include <stdexcept>
#include <string>

namespace pit {

// Dimension/shape mismatch between tensors.
class ShapeError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid architecture or run configuration.
class ConfigError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// API contract violation (non-scalar loss, wrong element type, ...).
class ContractError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Checkpoint directory / manifest problems.
class CheckpointError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dataset parsing and ingestion problems.
class DataError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Report/CSV output failures.
class IoError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training aborted (divergence).
class TrainError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace pit
