#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace ipat::text {

std::u32string utf8_to_u32(std::string_view s);
std::string u32_to_utf8(std::u32string_view s);
std::string codepoint_to_utf8(char32_t cp);

/// Canonical decomposition (Unicode NFD).
std::u32string nfd(std::u32string_view s);
std::string nfd(std::string_view s);

std::string to_lower(std::string_view s);

bool is_space(char32_t cp) noexcept;

std::vector<std::string> split_whitespace(std::string_view s);
std::string_view trim(std::string_view s);

/// Lowercasing + punctuation stripping shared by g2p, bpe and scoring.
/// Punctuation codepoints are deleted, runs of whitespace collapse to a single
/// space and the result is trimmed.
struct Normalizer {
  bool lowercase = true;
  std::u32string punctuation = default_punctuation();

  static std::u32string default_punctuation();

  std::string apply(std::string_view s) const;
  /// One-line description recorded in run metadata and score reports.
  std::string describe() const;
};

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL) noexcept;

}  // namespace ipat::text
