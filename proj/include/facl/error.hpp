#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace facl {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Operand extents do not line up.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Argument outside its documented domain (bad label, delta outside [0,1], ...).
class ValueError : public Error {
public:
    using Error::Error;
};

// An operation produced NaN or Inf from finite inputs.
class NumericError : public Error {
public:
    using Error::Error;
};

// Malformed on-disk data. Carries the byte offset where parsing stopped.
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::size_t offset)
        : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

// Invalid run configuration. `key()` names the offending entry when there is one.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what, std::string key = {})
        : Error(what), key_(std::move(key)) {}

    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

}  // namespace facl
