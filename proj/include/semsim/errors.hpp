#pragma once

#include <stdexcept>
#include <string>

namespace semsim {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incompatible shapes or non-integral output sizes.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// NaN / infinity where finite values are required.
class NumericError : public Error {
public:
    using Error::Error;
};

/// A hyperparameter outside its admissible range.
class ParameterError : public Error {
public:
    using Error::Error;
};

/// A caller violated a documented precondition.
class ContractError : public Error {
public:
    using Error::Error;
};

/// Malformed on-disk data; `offset` is the byte position of the problem.
class FormatError : public Error {
public:
    FormatError(const std::string& what, long long offset)
        : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
    long long offset() const noexcept { return offset_; }

private:
    long long offset_;
};

/// Invalid configuration, batch composition or CLI usage.
class ConfigError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class GenerationError : public Error {
public:
    using Error::Error;
};

}  // namespace semsim
