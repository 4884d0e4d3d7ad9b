#pragma once

#include <stdexcept>
#include <string>

namespace sca {

// Base class for all engine errors. Messages are single-line and name the
// offending quantity so CLI diagnostics stay greppable.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor/layer dimension disagreement.
struct ShapeError : Error {
    using Error::Error;
};

// Bad configuration: unknown key, out-of-range value, invalid architecture.
struct ConfigError : Error {
    using Error::Error;
};

// File and directory failures, including corrupt containers.
struct IoError : Error {
    using Error::Error;
};

// A prune configuration that cannot be satisfied (min-channel floors etc.).
struct InfeasibleError : Error {
    using Error::Error;
};

// Non-finite values or other numeric contract violations.
struct NumericError : Error {
    using Error::Error;
};

}  // namespace sca
