#pragma once

#include <stdexcept>
#include <string>

namespace magus {

/// Base class for every error raised by the library. The CLI maps these to
/// exit code 2.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// An argument is outside its valid range.
class ParameterError : public Error {
public:
    using Error::Error;
};

/// Tensor shapes or dimensions do not agree.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A prompt token is not in the encoder vocabulary.
class VocabularyError : public Error {
public:
    explicit VocabularyError(std::string token)
        : Error("unknown token '" + token + "' (not in encoder vocabulary)"), token_(std::move(token)) {}

    const std::string& token() const noexcept { return token_; }

private:
    std::string token_;
};

/// A required collaborator (captioner, scorer, caption bank) is missing or empty.
class ConfigurationError : public Error {
public:
    using Error::Error;
};

/// An object is used before it is ready (for example, a denoiser without weights).
class StateError : public Error {
public:
    using Error::Error;
};

/// A computation produced a non-finite value.
class NumericError : public Error {
public:
    NumericError(const std::string& what, int timestep)
        : Error(what + " (timestep " + std::to_string(timestep) + ")"), timestep_(timestep) {}

    int timestep() const noexcept { return timestep_; }

private:
    int timestep_;
};

/// Training diverged. Carries the last epoch whose loss was finite (-1 if none).
class TrainingError : public Error {
public:
    TrainingError(const std::string& what, int last_finite_epoch)
        : Error(what + " (last finite epoch " + std::to_string(last_finite_epoch) + ")"),
          last_finite_epoch_(last_finite_epoch) {}

    int last_finite_epoch() const noexcept { return last_finite_epoch_; }

private:
    int last_finite_epoch_;
};

/// DDIM inversion diverged.
class InversionError : public Error {
public:
    using Error::Error;
};

/// The trained toy model fails the benchmark quality gate.
class ModelQualityError : public Error {
public:
    using Error::Error;
};

/// A file does not follow the expected container format.
class FormatError : public Error {
public:
    using Error::Error;
};

}  // namespace magus
