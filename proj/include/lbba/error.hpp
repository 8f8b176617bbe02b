#pragma once

#include <stdexcept>
#include <string>

namespace lbba {

// Error taxonomy shared across the library. The CLI maps these onto exit
// codes: ConfigError -> 2, SequencingError -> 3, DivergenceError -> 4,
// everything else -> 1.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct InvalidBoxError : Error {
  using Error::Error;
};

struct DimensionError : Error {
  using Error::Error;
};

struct EmptyProposalError : Error {
  using Error::Error;
};

struct NoPositiveClassError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

struct ModeError : Error {
  using Error::Error;
};

// Stale checkpoints, missing ledger entries, stages run out of order.
struct SequencingError : Error {
  using Error::Error;
};

// Non-finite loss or gradient during training.
struct DivergenceError : Error {
  using Error::Error;
};

struct GradCheckError : Error {
  using Error::Error;
};

}  // namespace lbba
