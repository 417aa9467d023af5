#pragma once

#include <stdexcept>
#include <string>

namespace cacs {

// Error taxonomy shared by library and CLI. The CLI maps kinds to exit
// codes: Usage/Input -> 2, everything else -> 1.
enum class ErrorKind {
    Usage,       // bad flags, bad arguments
    Io,          // filesystem failures
    Format,      // malformed or unsupported file content
    Validation,  // input violates a documented precondition
    Compute,     // runtime failure (divergence, non-finite values, ...)
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

}  // namespace cacs
