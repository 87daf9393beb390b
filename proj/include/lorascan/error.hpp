#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

namespace lorascan {

enum class ErrorKind {
    // container format
    TruncatedFile,
    MalformedHeader,
    UnsupportedDtype,
    OffsetMismatch,
    DuplicateName,
    // adapter extraction
    OrphanTensor,
    RankMismatch,
    NoLoraPairs,
    // spectral computation
    InconsistentInputDim,
    OversizedProjection,
    NonFiniteTensor,
    NumericalFailure,
    DegenerateSpectrum,
    ZeroVarianceEntries,
    // calibration
    InsufficientBank,
    SingleClassInput,
    EmptyClass,
    // generation
    RateOutOfSpec,
    // artifact files
    VersionMismatch,
    IoError,
    InvalidArgument,
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::TruncatedFile: return "TruncatedFile";
        case ErrorKind::MalformedHeader: return "MalformedHeader";
        case ErrorKind::UnsupportedDtype: return "UnsupportedDtype";
        case ErrorKind::OffsetMismatch: return "OffsetMismatch";
        case ErrorKind::DuplicateName: return "DuplicateName";
        case ErrorKind::OrphanTensor: return "OrphanTensor";
        case ErrorKind::RankMismatch: return "RankMismatch";
        case ErrorKind::NoLoraPairs: return "NoLoraPairs";
        case ErrorKind::InconsistentInputDim: return "InconsistentInputDim";
        case ErrorKind::OversizedProjection: return "OversizedProjection";
        case ErrorKind::NonFiniteTensor: return "NonFiniteTensor";
        case ErrorKind::NumericalFailure: return "NumericalFailure";
        case ErrorKind::DegenerateSpectrum: return "DegenerateSpectrum";
        case ErrorKind::ZeroVarianceEntries: return "ZeroVarianceEntries";
        case ErrorKind::InsufficientBank: return "InsufficientBank";
        case ErrorKind::SingleClassInput: return "SingleClassInput";
        case ErrorKind::EmptyClass: return "EmptyClass";
        case ErrorKind::RateOutOfSpec: return "RateOutOfSpec";
        case ErrorKind::VersionMismatch: return "VersionMismatch";
        case ErrorKind::IoError: return "IoError";
        case ErrorKind::InvalidArgument: return "InvalidArgument";
    }
    return "Unknown";
}

// Single error type for the whole pipeline. `path` and `byte_offset` are
// attached where a file or a container position is known, so CLI-facing
// messages can point at the failing file and byte.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, std::string message,
          std::optional<std::string> path = std::nullopt,
          std::optional<uint64_t> byte_offset = std::nullopt)
        : std::runtime_error(compose(kind, message, path, byte_offset)),
          kind(kind),
          message(std::move(message)),
          path(std::move(path)),
          byte_offset(byte_offset) {}

    ErrorKind kind;
    std::string message;  // without kind/path decoration
    std::optional<std::string> path;
    std::optional<uint64_t> byte_offset;

private:
    static std::string compose(ErrorKind kind, const std::string& message,
                               const std::optional<std::string>& path,
                               const std::optional<uint64_t>& offset) {
        std::string out = to_string(kind);
        out += ": ";
        out += message;
        if (path) {
            out += " [file: ";
            out += *path;
            out += "]";
        }
        if (offset) {
            out += " [byte offset: ";
            out += std::to_string(*offset);
            out += "]";
        }
        return out;
    }
};

// Re-throws `e` with the adapter path attached (kept if already set).
[[noreturn]] inline void rethrow_with_path(const Error& e, const std::string& path) {
    throw Error(e.kind, e.message, e.path ? e.path : std::optional<std::string>(path),
                e.byte_offset);
}

}  // namespace lorascan
