#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace phyto {

enum class Errc {
    InvalidArgument,
    ParseError,
    IoFailure,
    // stack ingest
    UnrecognisedName,
    DuplicateSlice,
    MissingKey,
    NonPositiveScale,
    GapInStack,
    DimensionMismatch,
    UnsupportedFormat,
    // focus engine
    EmptyStack,
    ImageTooSmall,
    SingularFit,
    OffsetTooLarge,
    // segmenter
    EmptyCloud,
    BBoxOutOfBounds,
    // catalog
    UnknownSegment,
    CodeNotInCodebook,
    MissingReviewer,
    ClassTooSmall,
    EmptyAfterExclusions,
    // inference gate
    RowSumInvalid,
    NegativeProbability,
    DuplicateSegment,
    UnknownQualityClass,
    UntrainedModel,
    // assemblage
    EmptyInput,
    NonPositiveProportion,
    AllZero,
    TooFewSamples,
    DegenerateTable,
    ZeroExpected,
    // mixture
    TooFewDraws,
    NonFiniteValue,
    // service
    NoTableLoaded,
    WorkspaceCorrupt,
    BindFailure,
};

constexpr std::string_view errc_name(Errc code) noexcept {
    switch (code) {
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::ParseError: return "ParseError";
    case Errc::IoFailure: return "IoFailure";
    case Errc::UnrecognisedName: return "UnrecognisedName";
    case Errc::DuplicateSlice: return "DuplicateSlice";
    case Errc::MissingKey: return "MissingKey";
    case Errc::NonPositiveScale: return "NonPositiveScale";
    case Errc::GapInStack: return "GapInStack";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::UnsupportedFormat: return "UnsupportedFormat";
    case Errc::EmptyStack: return "EmptyStack";
    case Errc::ImageTooSmall: return "ImageTooSmall";
    case Errc::SingularFit: return "SingularFit";
    case Errc::OffsetTooLarge: return "OffsetTooLarge";
    case Errc::EmptyCloud: return "EmptyCloud";
    case Errc::BBoxOutOfBounds: return "BBoxOutOfBounds";
    case Errc::UnknownSegment: return "UnknownSegment";
    case Errc::CodeNotInCodebook: return "CodeNotInCodebook";
    case Errc::MissingReviewer: return "MissingReviewer";
    case Errc::ClassTooSmall: return "ClassTooSmall";
    case Errc::EmptyAfterExclusions: return "EmptyAfterExclusions";
    case Errc::RowSumInvalid: return "RowSumInvalid";
    case Errc::NegativeProbability: return "NegativeProbability";
    case Errc::DuplicateSegment: return "DuplicateSegment";
    case Errc::UnknownQualityClass: return "UnknownQualityClass";
    case Errc::UntrainedModel: return "UntrainedModel";
    case Errc::EmptyInput: return "EmptyInput";
    case Errc::NonPositiveProportion: return "NonPositiveProportion";
    case Errc::AllZero: return "AllZero";
    case Errc::TooFewSamples: return "TooFewSamples";
    case Errc::DegenerateTable: return "DegenerateTable";
    case Errc::ZeroExpected: return "ZeroExpected";
    case Errc::TooFewDraws: return "TooFewDraws";
    case Errc::NonFiniteValue: return "NonFiniteValue";
    case Errc::NoTableLoaded: return "NoTableLoaded";
    case Errc::WorkspaceCorrupt: return "WorkspaceCorrupt";
    case Errc::BindFailure: return "BindFailure";
    }
    return "Unknown";
}

/// Single exception type for the library; `code()` identifies the failure.
class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& message)
        : std::runtime_error(std::string(errc_name(code)) + ": " + message), code_(code) {}

    [[nodiscard]] Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& message) { throw Error(code, message); }

}  // namespace phyto
