#pragma once

#include <stdexcept>
#include <string>

namespace signadapt {

/// Base of every error the library throws. Each subclass maps to one CLI exit code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual int exit_code() const noexcept = 0;
};

class ConfigError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 2; }
};

/// Tensor or image dimensions that do not agree with the model.
class ShapeError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

/// An argument outside its documented domain (severity, ratio, threshold, ...).
class ValidationError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

/// A caller broke an operation precondition (e.g. pushing an unflagged verdict).
class ContractViolation : public ConfigError {
public:
    using ConfigError::ConfigError;
};

class DataError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 3; }
};

class IoError : public DataError {
public:
    using DataError::DataError;
};

/// Non-finite values during optimization. `term()` names the loss component that failed.
class NumericalError : public Error {
public:
    NumericalError(const std::string& message, std::string term)
        : Error(message), term_(std::move(term)) {}
    explicit NumericalError(const std::string& message) : Error(message) {}

    int exit_code() const noexcept override { return 4; }
    const std::string& term() const noexcept { return term_; }

private:
    std::string term_;
};

/// Training diverged. Carries the epoch where the loss stopped being finite.
class TrainingError : public NumericalError {
public:
    TrainingError(const std::string& message, int epoch)
        : NumericalError(message, "total"), epoch_(epoch) {}

    int epoch() const noexcept { return epoch_; }

private:
    int epoch_;
};

}  // namespace signadapt
