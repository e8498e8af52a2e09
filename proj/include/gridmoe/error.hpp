// Copyright 2026 The gridmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace gridmoe {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Input tensors or buffers whose shapes do not fit the operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Invalid hyperparameters or config files. `field()` names the offending
// dotted config key when one is known.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& message, std::string field = {})
        : Error(field.empty() ? message : field + ": " + message), field_(std::move(field)) {}

    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

// Arguments outside a function's mathematical domain (e.g. log of zero).
class DomainError : public Error {
public:
    using Error::Error;
};

// API misuse: unknown layer ids, non-scalar backward roots, and so on.
class UsageError : public Error {
public:
    using Error::Error;
};

}  // namespace gridmoe
