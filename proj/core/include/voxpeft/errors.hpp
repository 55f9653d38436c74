#pragma once

#include <stdexcept>
#include <string>

namespace voxpeft {

// Every failure raised by the library derives from Error so callers can map
// families of failures onto exit codes without string matching.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// Caller broke an API precondition (non-scalar loss, double merge, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

class UnsupportedSiteError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

class FeasibilityError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

class NumericError : public Error {
public:
    using Error::Error;
};

// Metric undefined for the given data, e.g. NRMSE against a constant volume.
class DegenerateRangeError : public NumericError {
public:
    using NumericError::NumericError;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class HeaderError : public FormatError {
public:
    using FormatError::FormatError;
};

class PayloadError : public FormatError {
public:
    using FormatError::FormatError;
};

class SizeMismatchError : public FormatError {
public:
    using FormatError::FormatError;
};

class VersionError : public FormatError {
public:
    using FormatError::FormatError;
};

} // namespace voxpeft
