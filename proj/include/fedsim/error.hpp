#pragma once

#include <stdexcept>
#include <string>

namespace fedsim {

/// Invalid experiment configuration, incompatible shapes or architectures.
/// The CLI maps this family to exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid operand values: labels out of range, negative distances,
/// mismatched vector lengths, non-finite inputs.
struct InputError : std::runtime_error {
  explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Data pipeline failures: CSV parsing, partition retries exhausted,
/// degenerate shards or splits.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Training failures: degenerate batches, non-finite losses or gradients.
struct TrainingError : std::runtime_error {
  explicit TrainingError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace fedsim
