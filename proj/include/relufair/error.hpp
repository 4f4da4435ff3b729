#pragma once

#include <stdexcept>
#include <string>

namespace relufair {

// Base of every error thrown by the library. The CLI maps the concrete
// subclasses onto process exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Non-finite value produced by an operation, or training diverged.
class NumericError : public Error {
public:
    using Error::Error;
};

// Tensor or network shapes do not agree.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Caller violated a documented precondition (bad argument value, empty group, ...).
class PreconditionError : public Error {
public:
    using Error::Error;
};

// Operation is not valid in the network's current gate mode.
class ModeError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int generic = 1;
inline constexpr int config = 2;
inline constexpr int numeric = 3;
inline constexpr int io = 4;
} // namespace exit_code

} // namespace relufair
