#include "ipat/g2p.hpp"

#include <algorithm>
#include <numeric>

#include "ipat/error.hpp"
#include "ipat/io.hpp"

namespace ipat::g2p {

namespace {

std::string collapse_spaces(std::string_view s) {
  std::string out;
  for (const auto& piece : text::split_whitespace(s)) {
    if (!out.empty()) out.push_back(' ');
    out += piece;
  }
  return out;
}

}  // namespace

void Lexicon::add(std::string_view word, std::string_view pronunciation,
                  const phoneset::ParseOptions& options) {
  std::string pron = collapse_spaces(pronunciation);
  if (pron.empty()) fail(ErrorCode::ParseError, "empty pronunciation for '" + std::string(word) + "'");
  phoneset::parse_ipa(pron, options);
  entries_[text::to_lower(word)].push_back(std::move(pron));
}

const std::vector<std::string>* Lexicon::find(std::string_view word) const {
  auto it = entries_.find(std::string(word));
  return it == entries_.end() ? nullptr : &it->second;
}

std::string Lexicon::to_text() const {
  std::string out;
  for (const auto& [word, prons] : entries_) {
    for (const auto& p : prons) out += word + "\t" + p + "\n";
  }
  return out;
}

Lexicon parse_lexicon(std::string_view text, std::string language,
                      const phoneset::ParseOptions& options) {
  Lexicon lex(std::move(language));
  std::size_t line_no = 0;
  for (const auto& line : io::split_lines(text)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos || text::trim(std::string_view(line).substr(0, tab)).empty()) {
      fail(ErrorCode::ParseError, "lexicon line " + std::to_string(line_no) +
                                      ": expected 'word<TAB>pronunciation'");
    }
    std::string_view word = text::trim(std::string_view(line).substr(0, tab));
    std::string_view pron = std::string_view(line).substr(tab + 1);
    try {
      lex.add(word, pron, options);
    } catch (const UnknownSymbolError& e) {
      throw UnknownSymbolError(e.position(), e.codepoint(), line_no);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::ParseError) throw;
      fail(ErrorCode::ParseError, "lexicon line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return lex;
}

Lexicon load_lexicon(const std::filesystem::path& path, std::string language,
                     const phoneset::ParseOptions& options) {
  return parse_lexicon(io::read_file(path), std::move(language), options);
}

RuleSet::RuleSet(std::vector<Rule> rules) : rules_(std::move(rules)) {
  for (const auto& r : rules_) {
    if (r.grapheme.empty()) fail(ErrorCode::ParseError, "rule with empty grapheme pattern");
  }
  order_.resize(rules_.size());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  std::stable_sort(order_.begin(), order_.end(), [&](std::size_t a, std::size_t b) {
    return rules_[a].grapheme.size() > rules_[b].grapheme.size();
  });
}

std::vector<std::string> RuleSet::apply(std::string_view word) const {
  const std::u32string w = text::utf8_to_u32(word);
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos < w.size()) {
    const Rule* hit = nullptr;
    for (std::size_t idx : order_) {
      const auto& g = rules_[idx].grapheme;
      if (g.size() <= w.size() - pos && w.compare(pos, g.size(), g) == 0) {
        hit = &rules_[idx];
        break;
      }
    }
    if (hit == nullptr) {
      fail(ErrorCode::RuleGap,
           "no rule matches word '" + std::string(word) + "' at position " + std::to_string(pos));
    }
    if (!hit->ipa.empty()) out.push_back(hit->ipa);
    pos += hit->grapheme.size();
  }
  return out;
}

std::string RuleSet::to_text() const {
  std::string out;
  for (const auto& r : rules_) out += text::u32_to_utf8(r.grapheme) + "\t" + r.ipa + "\n";
  return out;
}

RuleSet parse_rules(std::string_view text) {
  std::vector<Rule> rules;
  std::size_t line_no = 0;
  for (const auto& line : io::split_lines(text)) {
    ++line_no;
    if (text::trim(line).empty() || line.starts_with("#")) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) {
      fail(ErrorCode::ParseError,
           "rules line " + std::to_string(line_no) + ": expected 'grapheme<TAB>ipa'");
    }
    Rule r;
    r.grapheme = text::utf8_to_u32(text::to_lower(line.substr(0, tab)));
    r.ipa = collapse_spaces(std::string_view(line).substr(tab + 1));
    phoneset::parse_ipa(r.ipa);
    rules.push_back(std::move(r));
  }
  return RuleSet(std::move(rules));
}

RuleSet load_rules(const std::filesystem::path& path) { return parse_rules(io::read_file(path)); }

std::string convert(std::string_view text, const Lexicon& lexicon, const RuleSet& rules,
                    OovPolicy policy, const text::Normalizer& normalizer) {
  std::string out;
  for (const auto& word : text::split_whitespace(normalizer.apply(text))) {
    std::string pron;
    if (const auto* prons = lexicon.find(word)) {
      pron = prons->front();
    } else {
      switch (policy) {
        case OovPolicy::Error:
          fail(ErrorCode::OovWord, "word '" + word + "' is not in the lexicon");
        case OovPolicy::Skip:
          continue;
        case OovPolicy::Rules:
          for (const auto& piece : rules.apply(word)) {
            if (!pron.empty()) pron.push_back(' ');
            pron += piece;
          }
          break;
      }
    }
    if (pron.empty()) continue;
    if (!out.empty()) out.push_back(' ');
    out += pron;
  }
  return out;
}

}  // namespace ipat::g2p
