#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "ipat/phoneset.hpp"
#include "ipat/text.hpp"

namespace ipat::g2p {

/// Pronunciation lexicon: lowercased headword -> pronunciations in file order.
class Lexicon {
 public:
  Lexicon() = default;
  explicit Lexicon(std::string language) : language_(std::move(language)) {}

  const std::string& language() const { return language_; }
  const std::map<std::string, std::vector<std::string>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  /// Adds a pronunciation, validating it with parse_ipa.
  void add(std::string_view word, std::string_view pronunciation,
           const phoneset::ParseOptions& options = {});
  const std::vector<std::string>* find(std::string_view word) const;

  std::string to_text() const;

 private:
  std::string language_;
  std::map<std::string, std::vector<std::string>> entries_;
};

/// Reads "word<TAB>ipa tokens" lines. Duplicate headwords accumulate
/// pronunciations in order.
Lexicon load_lexicon(const std::filesystem::path& path, std::string language = {},
                     const phoneset::ParseOptions& options = {});
Lexicon parse_lexicon(std::string_view text, std::string language = {},
                      const phoneset::ParseOptions& options = {});

struct Rule {
  std::u32string grapheme;
  std::string ipa;
};

/// Greedy rewrite rules: at each position the longest matching grapheme
/// wins, ties going to the earlier rule.
class RuleSet {
 public:
  RuleSet() = default;
  explicit RuleSet(std::vector<Rule> rules);

  const std::vector<Rule>& rules() const { return rules_; }
  bool empty() const { return rules_.empty(); }

  /// Rewrites one lowercased word; returns the IPA pieces in order. Throws
  /// RuleGap when no rule matches at some position.
  std::vector<std::string> apply(std::string_view word) const;

  std::string to_text() const;

 private:
  std::vector<Rule> rules_;
  // Rule indices sorted by grapheme length (desc), then file order.
  std::vector<std::size_t> order_;
};

RuleSet load_rules(const std::filesystem::path& path);
RuleSet parse_rules(std::string_view text);

enum class OovPolicy { Rules, Error, Skip };

/// Orthographic text -> space-separated IPA tokens. Each word uses its first
/// lexicon pronunciation, else the rules (Rules policy).
std::string convert(std::string_view text, const Lexicon& lexicon, const RuleSet& rules,
                    OovPolicy policy = OovPolicy::Rules,
                    const text::Normalizer& normalizer = {});

}  // namespace ipat::g2p
