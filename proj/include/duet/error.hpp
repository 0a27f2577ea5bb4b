#pragma once

#include <stdexcept>
#include <string>

namespace duet {

/// Base for every error the library raises on purpose.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Bad inputs: shapes, parameters, contracts. CLI exit code 2.
struct ValidationError : Error {
    using Error::Error;
};

struct ShapeError : ValidationError {
    using ValidationError::ValidationError;
};

struct ParamError : ValidationError {
    using ValidationError::ValidationError;
};

struct ContractError : ValidationError {
    using ValidationError::ValidationError;
};

struct IndexError : ValidationError {
    using ValidationError::ValidationError;
};

struct RoutingError : ValidationError {
    using ValidationError::ValidationError;
};

/// NaN/Inf or a failed numeric routine. CLI exit code 3.
struct NumericError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

/// A scorer plug-in failed on a sample; message carries the sample id.
struct ScoringError : Error {
    using Error::Error;
};

}  // namespace duet
