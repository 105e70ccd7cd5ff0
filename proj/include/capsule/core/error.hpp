#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace capsule {

enum class ErrorCode {
    // panel
    NoTradingDay,
    HorizonUnavailable,
    MissingPrice,
    DuplicateKey,
    ParseError,
    InvalidCalendar,
    // scorer
    TemplateError,
    NotJson,
    SchemaViolation,
    BinSumViolation,
    RangeViolation,
    UnknownDriverTag,
    TransportError,
    // metrics
    InsufficientData,
    SectorTooSmall,
    InvalidPrice,
    InvalidBook,
    NoRoot,
    GrowthNonPositive,
    InvalidEnterpriseValue,
    // econometrics
    EmptyDesign,
    RankDeficient,
    DegenerateTimeDimension,
    InsufficientSections,
    ShapeError,
    SingularRestriction,
    // portfolio
    TooFewFirms,
    AsymmetricInput,
    Infeasible,
    RiskModelInvalid,
    SharpeUndefined,
    // plumbing
    InvalidArgument,
    IoError,
    ConfigError,
};

constexpr std::string_view to_string(ErrorCode c) noexcept {
    switch (c) {
        case ErrorCode::NoTradingDay: return "NoTradingDay";
        case ErrorCode::HorizonUnavailable: return "HorizonUnavailable";
        case ErrorCode::MissingPrice: return "MissingPrice";
        case ErrorCode::DuplicateKey: return "DuplicateKey";
        case ErrorCode::ParseError: return "ParseError";
        case ErrorCode::InvalidCalendar: return "InvalidCalendar";
        case ErrorCode::TemplateError: return "TemplateError";
        case ErrorCode::NotJson: return "NotJson";
        case ErrorCode::SchemaViolation: return "SchemaViolation";
        case ErrorCode::BinSumViolation: return "BinSumViolation";
        case ErrorCode::RangeViolation: return "RangeViolation";
        case ErrorCode::UnknownDriverTag: return "UnknownDriverTag";
        case ErrorCode::TransportError: return "TransportError";
        case ErrorCode::InsufficientData: return "InsufficientData";
        case ErrorCode::SectorTooSmall: return "SectorTooSmall";
        case ErrorCode::InvalidPrice: return "InvalidPrice";
        case ErrorCode::InvalidBook: return "InvalidBook";
        case ErrorCode::NoRoot: return "NoRoot";
        case ErrorCode::GrowthNonPositive: return "GrowthNonPositive";
        case ErrorCode::InvalidEnterpriseValue: return "InvalidEnterpriseValue";
        case ErrorCode::EmptyDesign: return "EmptyDesign";
        case ErrorCode::RankDeficient: return "RankDeficient";
        case ErrorCode::DegenerateTimeDimension: return "DegenerateTimeDimension";
        case ErrorCode::InsufficientSections: return "InsufficientSections";
        case ErrorCode::ShapeError: return "ShapeError";
        case ErrorCode::SingularRestriction: return "SingularRestriction";
        case ErrorCode::TooFewFirms: return "TooFewFirms";
        case ErrorCode::AsymmetricInput: return "AsymmetricInput";
        case ErrorCode::Infeasible: return "Infeasible";
        case ErrorCode::RiskModelInvalid: return "RiskModelInvalid";
        case ErrorCode::SharpeUndefined: return "SharpeUndefined";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::IoError: return "IoError";
        case ErrorCode::ConfigError: return "ConfigError";
    }
    return "Unknown";
}

/// Every failure in the library surfaces as this exception; callers branch on code().
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& detail)
        : std::runtime_error(std::string(to_string(code)) + ": " + detail),
          code_(code), detail_(detail) {}

    ErrorCode code() const noexcept { return code_; }
    const std::string& detail() const noexcept { return detail_; }

private:
    ErrorCode code_;
    std::string detail_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& detail) {
    throw Error(code, detail);
}

}  // namespace capsule
