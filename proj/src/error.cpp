#include "lg/error.hpp"

namespace lg {

const char* error_kind_name(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Syntax: return "Syntax";
        case ErrorKind::ZeroDivisor: return "ZeroDivisor";
        case ErrorKind::UnboundSymbol: return "UnboundSymbol";
        case ErrorKind::SchemaError: return "SchemaError";
        case ErrorKind::CycleError: return "CycleError";
        case ErrorKind::UnknownOperator: return "UnknownOperator";
        case ErrorKind::UndeclaredSymbol: return "UndeclaredSymbol";
        case ErrorKind::ShapeArityError: return "ShapeArityError";
        case ErrorKind::ConfigError: return "ConfigError";
        case ErrorKind::RankMismatch: return "RankMismatch";
        case ErrorKind::BroadcastError: return "BroadcastError";
        case ErrorKind::NonDivisibleReshape: return "NonDivisibleReshape";
        case ErrorKind::UnsupportedDynamicAttr: return "UnsupportedDynamicAttr";
        case ErrorKind::ScheduleCycle: return "ScheduleCycle";
        case ErrorKind::NonPositiveDim: return "NonPositiveDim";
        case ErrorKind::ExceedsPreallocation: return "ExceedsPreallocation";
        case ErrorKind::OddPackingError: return "OddPackingError";
        case ErrorKind::NonFinite: return "NonFinite";
        case ErrorKind::BadMagic: return "BadMagic";
        case ErrorKind::TruncatedStream: return "TruncatedStream";
        case ErrorKind::CapacityExceeded: return "CapacityExceeded";
        case ErrorKind::PositionMismatch: return "PositionMismatch";
        case ErrorKind::MetadataMissing: return "MetadataMissing";
        case ErrorKind::ShapeMismatch: return "ShapeMismatch";
        case ErrorKind::SchemeUnsupported: return "SchemeUnsupported";
        case ErrorKind::IoError: return "IoError";
    }
    return "Unknown";
}

}  // namespace lg
