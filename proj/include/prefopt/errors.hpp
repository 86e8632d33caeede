#pragma once

#include <stdexcept>
#include <string>

namespace prefopt {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed arguments: out-of-range tokens, bad shapes, non-finite scalars.
class InvalidInput : public Error {
public:
    using Error::Error;
};

/// An enumeration or grid would exceed the configured size cap.
class CapacityError : public Error {
public:
    using Error::Error;
};

/// A loss or estimator produced a non-finite intermediate.
class NumericError : public Error {
public:
    using Error::Error;
};

class GenerationError : public Error {
public:
    using Error::Error;
};

/// q(y) = 0 where p(y) > 0 in a divergence computation.
class SupportError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace prefopt
