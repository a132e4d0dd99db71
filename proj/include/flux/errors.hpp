#pragma once

#include <stdexcept>
#include <string>

namespace flux {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid argument or violated precondition (bad counts, out-of-range gamma, ...).
class ArgumentError : public Error {
public:
    using Error::Error;
};

/// Function evaluated outside its domain, e.g. a singular likelihood.
class DomainError : public Error {
public:
    using Error::Error;
};

/// Measurement model not supported by the requested method.
class UnsupportedModelError : public Error {
public:
    using Error::Error;
};

/// Inconsistent configuration (too few collocation points, ...).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Failures of the numerical pipeline. The CLI maps all of these to exit code 2.
class NumericalError : public Error {
public:
    using Error::Error;
};

class SingularSystemError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class DivergenceError : public NumericalError {
public:
    DivergenceError(const std::string& what, double gamma)
        : NumericalError(what + " (gamma = " + std::to_string(gamma) + ")"), gamma_(gamma) {}

    [[nodiscard]] double gamma() const { return gamma_; }

private:
    double gamma_;
};

class StiffnessError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class FlowCollapseError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class DegeneracyError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class NoOverlapError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

}  // namespace flux
