#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace ipat {

/// Every failure the library can report. The CLI maps these onto exit codes
/// through `exit_category`.
enum class ErrorCode : std::uint8_t {
  // phoneset / g2p / bpe
  UnknownSymbol,
  EmptyInput,
  ParseError,
  OovWord,
  RuleGap,
  EmptyCorpus,
  IdOutOfRange,
  // frontend
  TooShort,
  BadConfig,
  DuplicateId,
  MissingAudio,
  InsufficientData,
  // autodiff / model
  ShapeMismatch,
  NonFinite,
  NonScalarLoss,
  PrefixTooLong,
  // training
  TargetTooLong,
  BadLabel,
  BadStep,
  FingerprintMismatch,
  NoTrainableData,
  // transfer
  VocabMissingSymbols,
  WrongParentStage,
  // eval
  EmptyEncoding,
  EmptyReference,
  IdMismatch,
  // viz
  InsufficientFrames,
  TooFewPoints,
  BadPerplexity,
  // cli / io
  IoError,
  ConfigError,
  StageOrderError,
  BadMagic,
  VersionMismatch,
};

enum class ErrorCategory : std::uint8_t { Config, Data, Numeric, Io };

std::string_view error_code_name(ErrorCode code) noexcept;
ErrorCategory exit_category(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Raised by the IPA parser. `line` is 0 unless the caller was reading a
/// multi-line source (inventories, lexicons).
class UnknownSymbolError : public Error {
 public:
  UnknownSymbolError(std::size_t position, char32_t codepoint, std::size_t line = 0);

  std::size_t position() const noexcept { return position_; }
  char32_t codepoint() const noexcept { return codepoint_; }
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t position_;
  char32_t codepoint_;
  std::size_t line_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& message);

}  // namespace ipat
