#pragma once

#include <stdexcept>
#include <string>

namespace caps {

// Error families map onto CLI exit codes: config -> 2, data -> 3, checkpoint -> 4.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// API misuse by the caller (e.g. backward on a tensor the tape never produced).
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dimension mismatches are configuration problems.
struct ShapeError : ConfigError {
    using ConfigError::ConfigError;
};

struct IdxMagicError : DataError {
    using DataError::DataError;
};

struct IdxCountError : DataError {
    using DataError::DataError;
};

struct IdxTruncatedError : DataError {
    using DataError::DataError;
};

}  // namespace caps
