#pragma once

#include <stdexcept>
#include <string>

namespace aff {

// Error taxonomy. Each maps to a distinct failure class so callers (and the
// CLI exit-code mapping) can tell shape bugs from bad configs from bad files.

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Operand shapes do not line up (conv channel mismatch, fuse on unequal maps, ...).
struct DimensionError : Error {
    using Error::Error;
};

// Invalid construction-time choice (C % r != 0, lr <= 0, unknown fusion kind, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Malformed on-disk bytes (truncated CIFAR record, bad container magic, ...).
struct FormatError : Error {
    using Error::Error;
};

// Semantically invalid runtime input (label out of range, empty metric input).
struct InputError : Error {
    using Error::Error;
};

// API used out of order (grad read before backward, backward before forward).
struct StateError : Error {
    using Error::Error;
};

// Operation not defined for this configuration (weight map of an add fusion).
struct UnsupportedError : Error {
    using Error::Error;
};

// Training produced a non-finite value (diverged loss etc).
struct NumericError : Error {
    using Error::Error;
};

} // namespace aff
