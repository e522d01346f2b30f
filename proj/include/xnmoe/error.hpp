#pragma once

#include <stdexcept>
#include <string>

namespace xnmoe {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incompatible shapes, ranks or widths.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf detected in checked mode, or a non-finite loss during training.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Bad configuration key or value.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Manifest, image or batch problems.
class DataError : public Error {
public:
    using Error::Error;
};

/// Corrupt, truncated or incompatible checkpoint file.
class CheckpointError : public Error {
public:
    using Error::Error;
};

} // namespace xnmoe
