#include "ipat/error.hpp"

#include <cstdio>

namespace ipat {

std::string_view error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::UnknownSymbol: return "UnknownSymbol";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::OovWord: return "OovWord";
    case ErrorCode::RuleGap: return "RuleGap";
    case ErrorCode::EmptyCorpus: return "EmptyCorpus";
    case ErrorCode::IdOutOfRange: return "IdOutOfRange";
    case ErrorCode::TooShort: return "TooShort";
    case ErrorCode::BadConfig: return "BadConfig";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::MissingAudio: return "MissingAudio";
    case ErrorCode::InsufficientData: return "InsufficientData";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::NonScalarLoss: return "NonScalarLoss";
    case ErrorCode::PrefixTooLong: return "PrefixTooLong";
    case ErrorCode::TargetTooLong: return "TargetTooLong";
    case ErrorCode::BadLabel: return "BadLabel";
    case ErrorCode::BadStep: return "BadStep";
    case ErrorCode::FingerprintMismatch: return "FingerprintMismatch";
    case ErrorCode::NoTrainableData: return "NoTrainableData";
    case ErrorCode::VocabMissingSymbols: return "VocabMissingSymbols";
    case ErrorCode::WrongParentStage: return "WrongParentStage";
    case ErrorCode::EmptyEncoding: return "EmptyEncoding";
    case ErrorCode::EmptyReference: return "EmptyReference";
    case ErrorCode::IdMismatch: return "IdMismatch";
    case ErrorCode::InsufficientFrames: return "InsufficientFrames";
    case ErrorCode::TooFewPoints: return "TooFewPoints";
    case ErrorCode::BadPerplexity: return "BadPerplexity";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::StageOrderError: return "StageOrderError";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
  }
  return "Unknown";
}

ErrorCategory exit_category(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::BadConfig:
    case ErrorCode::ConfigError:
    case ErrorCode::StageOrderError:
    case ErrorCode::WrongParentStage:
    case ErrorCode::FingerprintMismatch:
    case ErrorCode::BadStep:
    case ErrorCode::BadPerplexity:
      return ErrorCategory::Config;
    case ErrorCode::NonFinite:
    case ErrorCode::ShapeMismatch:
    case ErrorCode::NonScalarLoss:
      return ErrorCategory::Numeric;
    case ErrorCode::IoError:
    case ErrorCode::BadMagic:
    case ErrorCode::VersionMismatch:
      return ErrorCategory::Io;
    default:
      return ErrorCategory::Data;
  }
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

namespace {

std::string describe_symbol(std::size_t position, char32_t cp, std::size_t line) {
  char buf[96];
  if (line > 0) {
    std::snprintf(buf, sizeof buf, "line %zu position %zu codepoint U+%04X", line, position,
                  static_cast<unsigned>(cp));
  } else {
    std::snprintf(buf, sizeof buf, "position %zu codepoint U+%04X", position,
                  static_cast<unsigned>(cp));
  }
  return buf;
}

}  // namespace

UnknownSymbolError::UnknownSymbolError(std::size_t position, char32_t codepoint, std::size_t line)
    : Error(ErrorCode::UnknownSymbol, describe_symbol(position, codepoint, line)),
      position_(position),
      codepoint_(codepoint),
      line_(line) {}

void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

}  // namespace ipat
