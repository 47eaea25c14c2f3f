#pragma once

#include <stdexcept>
#include <string>

namespace calibre {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Value outside the domain of an operation (log of a non-positive number,
/// non-finite result).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Caller violated an operation precondition.
class ContractError : public Error {
public:
    using Error::Error;
};

class DegenerateVectorError : public Error {
public:
    using Error::Error;
};

class ParameterError : public Error {
public:
    using Error::Error;
};

class PartitionInfeasibleError : public Error {
public:
    using Error::Error;
};

class ClusterCoverageError : public Error {
public:
    using Error::Error;
};

/// Local training produced a non-finite loss.
class DivergenceFailureError : public Error {
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

} // namespace calibre
