#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace ipat::phoneset {

enum class TokenKind : std::uint8_t { Base, Modifier };

struct IpaToken {
  std::string text;
  TokenKind kind = TokenKind::Base;

  friend bool operator==(const IpaToken&, const IpaToken&) = default;
  /// Lexicographic by codepoint sequence (UTF-8 byte order is equivalent).
  friend std::strong_ordering operator<=>(const IpaToken& a, const IpaToken& b) {
    if (auto c = a.text.compare(b.text); c != 0) return c <=> 0;
    return a.kind <=> b.kind;
  }
};

inline constexpr char32_t kTieBar = U'\u0361';

/// A set of codepoints read from a table file: one hex codepoint per line,
/// `#` starts a comment.
class SymbolTable {
 public:
  SymbolTable() = default;
  explicit SymbolTable(std::vector<char32_t> codepoints);

  static SymbolTable parse(std::string_view text);
  static SymbolTable load(const std::filesystem::path& path);

  bool contains(char32_t cp) const { return set_.contains(cp); }
  const std::vector<char32_t>& codepoints() const { return sorted_; }
  std::size_t size() const { return sorted_.size(); }

 private:
  std::unordered_set<char32_t> set_;
  std::vector<char32_t> sorted_;
};

const SymbolTable& default_modifiers();
const SymbolTable& default_bases();

struct ParseOptions {
  const SymbolTable* modifiers = &default_modifiers();
  const SymbolTable* bases = &default_bases();
  bool tie_bar_joins = true;
};

/// Splits an IPA string into base and modifier tokens. The input is NFD
/// normalized first; whitespace is dropped. Error positions are codepoint
/// offsets into the normalized string.
std::vector<IpaToken> parse_ipa(std::string_view s, const SymbolTable& modifiers,
                                bool tie_bar_joins = true,
                                const SymbolTable& bases = default_bases());
std::vector<IpaToken> parse_ipa(std::string_view s, const ParseOptions& options = {});

/// Joins token texts; the inverse of parse_ipa up to whitespace.
std::string join_tokens(std::span<const IpaToken> tokens, std::string_view separator = "");

class PhoneInventory {
 public:
  PhoneInventory() = default;
  PhoneInventory(std::string language, std::vector<IpaToken> tokens);

  const std::string& language() const { return language_; }
  /// Sorted, unique.
  const std::vector<IpaToken>& tokens() const { return tokens_; }
  std::size_t size() const { return tokens_.size(); }
  bool contains(std::string_view text) const;

  /// One-line JSON record {"language":..,"size":..}.
  std::string summary() const;

  std::string to_text() const;
  static PhoneInventory from_text(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static PhoneInventory load(const std::filesystem::path& path);

  friend bool operator==(const PhoneInventory&, const PhoneInventory&) = default;

 private:
  std::string language_;
  std::vector<IpaToken> tokens_;
};

/// Builds the inventory of every token observed in `transcripts`. A parse
/// failure is rethrown with the 1-based transcript line number.
PhoneInventory build_inventory(std::string language, std::span<const std::string> transcripts,
                               const ParseOptions& options = {});
PhoneInventory build_inventory(std::string language, std::istream& transcripts,
                               const ParseOptions& options = {});

enum class VocabKind : std::uint8_t { Ipa, Bpe };

std::string_view vocab_kind_name(VocabKind kind);

/// Model output vocabulary. Ids 0..3 are reserved for the specials; token
/// files store one entry per line with id == line index after the leading
/// `# key=value` comment block.
class Vocabulary {
 public:
  static constexpr int kBlank = 0;
  static constexpr int kUnk = 1;
  static constexpr int kSosEos = 2;
  static constexpr int kPad = 3;
  static constexpr int kNumSpecials = 4;
  static constexpr std::string_view kSpecials[kNumSpecials] = {"<blank>", "<unk>", "<sos/eos>",
                                                               "<pad>"};

  Vocabulary() = default;
  /// `tokens` are the non-special entries in id order; duplicates or
  /// collisions with the specials are rejected.
  Vocabulary(VocabKind kind, std::vector<std::string> tokens,
             std::map<std::string, std::string> metadata = {});

  VocabKind kind() const { return kind_; }
  const std::vector<std::string>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t non_special_size() const { return entries_.size() - kNumSpecials; }
  std::span<const std::string> non_special() const {
    return std::span<const std::string>(entries_).subspan(kNumSpecials);
  }

  const std::string& token(int id) const;
  std::optional<int> find(std::string_view token) const;
  int id_or_unk(std::string_view token) const;

  const std::map<std::string, std::string>& metadata() const { return metadata_; }
  void set_metadata(const std::string& key, const std::string& value) { metadata_[key] = value; }

  /// Hash over kind and entries (metadata excluded).
  std::uint64_t content_hash() const;

  std::string to_text() const;
  static Vocabulary from_text(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  /// Equal entries and kind; metadata is ignored.
  bool same_entries(const Vocabulary& other) const {
    return kind_ == other.kind_ && entries_ == other.entries_;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.same_entries(b) && a.metadata_ == b.metadata_;
  }

 private:
  VocabKind kind_ = VocabKind::Ipa;
  std::vector<std::string> entries_;
  std::unordered_map<std::string, int> index_;
  std::map<std::string, std::string> metadata_;
};

/// Union of the inventories, sorted by codepoint sequence, with the specials
/// in front. The result does not depend on input order.
Vocabulary union_vocabulary(std::span<const PhoneInventory> inventories);

}  // namespace ipat::phoneset
