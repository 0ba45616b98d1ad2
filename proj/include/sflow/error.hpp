#pragma once

#include <stdexcept>
#include <string>

namespace sflow {

enum class ErrorCode {
    BadMagic,
    TruncatedFile,
    NonFiniteCoordinate,
    IoFailure,
    InvalidCloud,
    NonPositiveCellSize,
    KTooLarge,
    EmptyCloud,
    LengthMismatch,
    TooFewPoints,
    ShapeMismatch,
    TraceMismatch,
    DivergenceDetected,
    InvalidArgument,
};

inline const char* to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::BadMagic: return "BadMagic";
        case ErrorCode::TruncatedFile: return "TruncatedFile";
        case ErrorCode::NonFiniteCoordinate: return "NonFiniteCoordinate";
        case ErrorCode::IoFailure: return "IoFailure";
        case ErrorCode::InvalidCloud: return "InvalidCloud";
        case ErrorCode::NonPositiveCellSize: return "NonPositiveCellSize";
        case ErrorCode::KTooLarge: return "KTooLarge";
        case ErrorCode::EmptyCloud: return "EmptyCloud";
        case ErrorCode::LengthMismatch: return "LengthMismatch";
        case ErrorCode::TooFewPoints: return "TooFewPoints";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::TraceMismatch: return "TraceMismatch";
        case ErrorCode::DivergenceDetected: return "DivergenceDetected";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
    }
    return "Unknown";
}

/// Every failure raised by the library carries a machine-checkable code.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace sflow
