#pragma once

#include <stdexcept>
#include <string>

namespace jointseg {

// Error taxonomy. Every failure surfaced by the library derives from Error;
// the CLI maps the subclasses onto process exit codes (see tools/).
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/dimension mismatch between tensors or images.
struct ShapeError : Error {
    using Error::Error;
};

// API misuse that is detectable from values (non-scalar loss, bad axis, ...).
struct ContractError : Error {
    using Error::Error;
};

// Object is in the wrong state for the call (e.g. backward through a
// consumed graph).
struct StateError : Error {
    using Error::Error;
};

// Unknown task id at a task-routing point.
struct RegistryError : Error {
    using Error::Error;
};

// Bad or inconsistent configuration (unknown keys, missing seed, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Filesystem / format problems.
struct IoError : Error {
    using Error::Error;
};

// Training aborted because a loss stopped being finite.
struct NanAbortError : Error {
    using Error::Error;
};

}  // namespace jointseg
