#pragma once

#include <stdexcept>
#include <string>

namespace cpslab {

// Base for every failure raised by the library. Callers that only care
// about "something went wrong" catch this; the CLI maps it to exit code 1.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor or map shapes that do not line up.
struct DimensionError : Error {
    using Error::Error;
};

// A value outside the documented domain of an operation.
struct ArgumentError : Error {
    using Error::Error;
};

// Invalid configuration detected before any compute starts.
struct ConfigError : Error {
    using Error::Error;
};

// Malformed input data (bad labels, corrupt files).
struct DataError : Error {
    using Error::Error;
};

struct EvaluationError : Error {
    using Error::Error;
};

} // namespace cpslab
