#pragma once

#include <stdexcept>
#include <string>

namespace attnkit {

// Error taxonomy shared by the whole library. The CLI maps these onto
// process exit codes (config/usage -> 1, data format -> 2).
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or size disagreement between tensors / layer contracts.
struct DimensionError : Error {
    using Error::Error;
};

// A caller violated an API precondition (non-scalar backward root, bad axis
// permutation, out-of-range index, ...).
struct ContractError : Error {
    using Error::Error;
};

// Inconsistent module or architecture configuration (r does not divide C,
// all attention branches disabled, bad channel arithmetic, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Malformed external data (dataset files, checkpoints, JSON documents).
struct FormatError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// Name lookups that failed (unknown layer, unknown parameter).
struct LookupError : Error {
    using Error::Error;
};

}  // namespace attnkit
