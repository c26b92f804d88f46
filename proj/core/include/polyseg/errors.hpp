#pragma once

#include <stdexcept>
#include <string>

namespace polyseg {

/// Base class for all errors raised by this library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Tensor dimensions violate an operation's contract.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A value is outside its admissible domain (thresholds, fractions, empty inputs...).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Malformed configuration: unknown architecture, bad JSON field, unknown flag.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Dataset or file loading failed; the message names the offending file.
class LoadError : public Error {
public:
    using Error::Error;
};

/// A computation produced a non-finite value (training abort path).
class NumericError : public Error {
public:
    using Error::Error;
};

} // namespace polyseg
