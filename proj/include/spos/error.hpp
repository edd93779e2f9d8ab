#pragma once

#include <stdexcept>
#include <string>

namespace spos {

// Base for every error thrown by the library. Each subclass covers one
// failure family so callers (and the CLI) can map them to exit messages
// without string matching.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape or rank mismatch between tensors handed to an op.
struct DimError : Error {
    using Error::Error;
};

// An op precondition other than shape was violated (bad axis, bad extent,
// invalid enum value, out-of-range slice, ...).
struct ContractError : Error {
    using Error::Error;
};

// Math domain violation, e.g. log of a non-positive value.
struct DomainError : Error {
    using Error::Error;
};

// Invalid or inconsistent configuration (CLI flags, model config, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Malformed annotation or feature input (parse errors, missing fields,
// out-of-range boundary indices).
struct AnnotationError : Error {
    using Error::Error;
};

// Evaluation set problems, e.g. predictions without matching ground truth.
struct EvalError : Error {
    using Error::Error;
};

// File I/O failures: unreadable paths, truncated binaries, bad magic.
struct IoError : Error {
    using Error::Error;
};

}  // namespace spos
