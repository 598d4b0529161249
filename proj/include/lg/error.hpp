#pragma once

#include <stdexcept>
#include <string>

namespace lg {

// Every recoverable failure in the runtime carries one of these kinds so
// callers (and tests) can dispatch on the failure class instead of parsing
// message strings.
enum class ErrorKind {
    Syntax,
    ZeroDivisor,
    UnboundSymbol,
    SchemaError,
    CycleError,
    UnknownOperator,
    UndeclaredSymbol,
    ShapeArityError,
    ConfigError,
    RankMismatch,
    BroadcastError,
    NonDivisibleReshape,
    UnsupportedDynamicAttr,
    ScheduleCycle,
    NonPositiveDim,
    ExceedsPreallocation,
    OddPackingError,
    NonFinite,
    BadMagic,
    TruncatedStream,
    CapacityExceeded,
    PositionMismatch,
    MetadataMissing,
    ShapeMismatch,
    SchemeUnsupported,
    IoError,
};

const char* error_kind_name(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(std::string(error_kind_name(kind)) + ": " + message),
          kind_(kind) {}

    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

}  // namespace lg
