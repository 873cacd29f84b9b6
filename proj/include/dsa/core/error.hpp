#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dsa {

/// Root of every failure raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

/// Raised when a double-backward passes through an operator whose backward is not itself differentiable.
class SecondOrderError : public Error {
public:
    explicit SecondOrderError(const std::string& op)
      : Error("operator '" + op + "' does not support second-order differentiation"), op_(op)
    { }

    const std::string& op() const noexcept { return op_; }

private:
    std::string op_;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

/// Numerical divergence during optimization (non-finite or exploding loss).
class DivergenceError : public Error {
public:
    using Error::Error;
};

/// Data ingestion / persistence failure. Carries the offending file and byte offset.
class DataError : public Error {
public:
    DataError(const std::string& what, std::string path, std::int64_t offset = -1)
      : Error(path + (offset >= 0 ? " @" + std::to_string(offset) : std::string()) + ": " + what),
        path_(std::move(path)), offset_(offset)
    { }

    const std::string& path() const noexcept { return path_; }
    std::int64_t offset() const noexcept { return offset_; }

private:
    std::string path_;
    std::int64_t offset_;
};

class BadMagicError : public DataError {
public:
    using DataError::DataError;
};

class TruncatedError : public DataError {
public:
    using DataError::DataError;
};

class CountMismatchError : public DataError {
public:
    using DataError::DataError;
};

class FileSizeError : public DataError {
public:
    using DataError::DataError;
};

class VersionError : public DataError {
public:
    using DataError::DataError;
};

class ChecksumError : public DataError {
public:
    using DataError::DataError;
};

} // namespace dsa
