#pragma once

#include <stdexcept>
#include <string>

namespace focustune {

/// Failure categories. The CLI maps each one onto a process exit code.
enum class ErrorKind {
    usage,     // bad arguments or an invalid configuration
    data,      // malformed or missing input data
    numeric,   // non-finite values, failed gradient checks
    transport  // external encoder endpoint failures
};

inline const char* to_string(ErrorKind kind) noexcept {
    switch (kind) {
    case ErrorKind::usage: return "usage";
    case ErrorKind::data: return "data";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::transport: return "transport";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

class UsageError : public Error {
public:
    explicit UsageError(const std::string& message) : Error(ErrorKind::usage, message) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& message) : Error(ErrorKind::data, message) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& message) : Error(ErrorKind::numeric, message) {}
};

class TransportError : public Error {
public:
    explicit TransportError(const std::string& message) : Error(ErrorKind::transport, message) {}
};

} // namespace focustune
