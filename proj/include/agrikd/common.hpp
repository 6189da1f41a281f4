#pragma once

#include <random>
#include <stdexcept>
#include <string>

namespace agrikd {

// Error taxonomy. The CLI maps DataError/ConfigError/ContractError/DimensionError
// to exit code 1 and NumericalError (NaN abort) to exit code 2.

/// Shape or axis disagreement between tensors.
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid run or model configuration.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed or out-of-range input data.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// API precondition violated by the caller.
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Non-finite value encountered during training.
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Single RNG type used everywhere; one seeded stream per run keeps runs reproducible.
using Rng = std::mt19937_64;

}  // namespace agrikd
