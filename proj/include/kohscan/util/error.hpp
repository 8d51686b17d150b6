#pragma once

#include <stdexcept>
#include <string>

namespace kohscan {

/// Base for every error the library raises deliberately.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A caller violated an operation's precondition (bad argument, empty split, ...).
class PreconditionError : public Error {
public:
    using Error::Error;
};

/// Malformed input file or payload.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Stored data failed its checksum or is truncated.
class IntegrityError : public Error {
public:
    using Error::Error;
};

/// Stored data was written by an incompatible format version.
class VersionError : public Error {
public:
    using Error::Error;
};

/// Numerical failure during optimisation (non-finite loss, exploding weights).
class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace kohscan
