#include "ipat/phoneset.hpp"

#include <algorithm>
#include <charconv>
#include <istream>
#include <set>
#include <sstream>

#include "ipat/error.hpp"
#include "ipat/io.hpp"
#include "ipat/text.hpp"

namespace ipat::phoneset {

namespace detail {
extern const std::string_view kModifierTableText;
extern const std::string_view kBaseTableText;
}  // namespace detail

SymbolTable::SymbolTable(std::vector<char32_t> codepoints) : sorted_(std::move(codepoints)) {
  std::sort(sorted_.begin(), sorted_.end());
  sorted_.erase(std::unique(sorted_.begin(), sorted_.end()), sorted_.end());
  set_.insert(sorted_.begin(), sorted_.end());
}

SymbolTable SymbolTable::parse(std::string_view text) {
  std::vector<char32_t> cps;
  std::size_t line_no = 0;
  for (const auto& raw : io::split_lines(text)) {
    ++line_no;
    std::string_view line = raw;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = text::trim(line);
    if (line.empty()) continue;
    if (line.starts_with("U+") || line.starts_with("u+")) line.remove_prefix(2);
    unsigned value = 0;
    auto [ptr, ec] = std::from_chars(line.data(), line.data() + line.size(), value, 16);
    if (ec != std::errc{} || ptr != line.data() + line.size() || value > 0x10FFFF) {
      fail(ErrorCode::ParseError, "symbol table line " + std::to_string(line_no) +
                                      ": expected a hex codepoint, got '" + std::string(line) + "'");
    }
    cps.push_back(static_cast<char32_t>(value));
  }
  return SymbolTable(std::move(cps));
}

SymbolTable SymbolTable::load(const std::filesystem::path& path) {
  return parse(io::read_file(path));
}

const SymbolTable& default_modifiers() {
  static const SymbolTable table = SymbolTable::parse(detail::kModifierTableText);
  return table;
}

const SymbolTable& default_bases() {
  static const SymbolTable table = SymbolTable::parse(detail::kBaseTableText);
  return table;
}

std::vector<IpaToken> parse_ipa(std::string_view s, const SymbolTable& modifiers,
                                bool tie_bar_joins, const SymbolTable& bases) {
  const std::u32string u = text::nfd(text::utf8_to_u32(s));
  std::vector<IpaToken> tokens;
  // True while the previous codepoint closed a Base token, i.e. a tie bar
  // at this point has a base on its left.
  bool after_base = false;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const char32_t cp = u[i];
    if (text::is_space(cp)) {
      after_base = false;
      continue;
    }
    if (cp == kTieBar) {
      if (!tie_bar_joins) {
        after_base = false;
        continue;
      }
      if (!after_base || i + 1 >= u.size() || !bases.contains(u[i + 1])) {
        throw UnknownSymbolError(i, cp);
      }
      tokens.back().text += text::codepoint_to_utf8(cp);
      tokens.back().text += text::codepoint_to_utf8(u[i + 1]);
      ++i;
      continue;
    }
    if (modifiers.contains(cp)) {
      tokens.push_back({text::codepoint_to_utf8(cp), TokenKind::Modifier});
      after_base = false;
    } else if (bases.contains(cp)) {
      tokens.push_back({text::codepoint_to_utf8(cp), TokenKind::Base});
      after_base = true;
    } else {
      throw UnknownSymbolError(i, cp);
    }
  }
  return tokens;
}

std::vector<IpaToken> parse_ipa(std::string_view s, const ParseOptions& options) {
  return parse_ipa(s, *options.modifiers, options.tie_bar_joins, *options.bases);
}

std::string join_tokens(std::span<const IpaToken> tokens, std::string_view separator) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) out += separator;
    out += tokens[i].text;
  }
  return out;
}

PhoneInventory::PhoneInventory(std::string language, std::vector<IpaToken> tokens)
    : language_(std::move(language)), tokens_(std::move(tokens)) {
  std::sort(tokens_.begin(), tokens_.end());
  tokens_.erase(std::unique(tokens_.begin(), tokens_.end()), tokens_.end());
}

bool PhoneInventory::contains(std::string_view text) const {
  auto it = std::lower_bound(tokens_.begin(), tokens_.end(), text,
                             [](const IpaToken& t, std::string_view v) { return t.text < v; });
  return it != tokens_.end() && it->text == text;
}

std::string PhoneInventory::summary() const {
  return "{\"language\":\"" + language_ + "\",\"size\":" + std::to_string(tokens_.size()) + "}";
}

std::string PhoneInventory::to_text() const {
  std::string out = "# kind=inventory\n# language=" + language_ + "\n";
  for (const auto& t : tokens_) out += t.text + "\n";
  return out;
}

namespace {

struct TokenFile {
  std::map<std::string, std::string> header;
  std::vector<std::string> entries;
};

// Leading "# key=value" lines form the header; everything after is one entry
// per line.
TokenFile parse_token_file(std::string_view text) {
  TokenFile f;
  bool in_header = true;
  std::size_t line_no = 0;
  for (auto& line : io::split_lines(text)) {
    ++line_no;
    if (in_header && line.starts_with("#")) {
      std::string_view kv = text::trim(std::string_view(line).substr(1));
      auto eq = kv.find('=');
      if (eq == std::string_view::npos) continue;
      f.header[std::string(kv.substr(0, eq))] = std::string(kv.substr(eq + 1));
      continue;
    }
    in_header = false;
    if (line.empty()) fail(ErrorCode::ParseError, "empty token on line " + std::to_string(line_no));
    f.entries.push_back(std::move(line));
  }
  return f;
}

}  // namespace

PhoneInventory PhoneInventory::from_text(std::string_view text) {
  TokenFile f = parse_token_file(text);
  std::vector<IpaToken> tokens;
  for (auto& e : f.entries) {
    auto parsed = parse_ipa(e);
    if (parsed.size() != 1) fail(ErrorCode::ParseError, "inventory entry is not one token: " + e);
    tokens.push_back(std::move(parsed.front()));
  }
  return PhoneInventory(f.header["language"], std::move(tokens));
}

void PhoneInventory::save(const std::filesystem::path& path) const {
  io::write_file(path, to_text());
}

PhoneInventory PhoneInventory::load(const std::filesystem::path& path) {
  return from_text(io::read_file(path));
}

PhoneInventory build_inventory(std::string language, std::span<const std::string> transcripts,
                               const ParseOptions& options) {
  std::set<IpaToken> seen;
  std::size_t line = 0;
  for (const auto& t : transcripts) {
    ++line;
    try {
      for (auto& tok : parse_ipa(t, options)) seen.insert(std::move(tok));
    } catch (const UnknownSymbolError& e) {
      throw UnknownSymbolError(e.position(), e.codepoint(), line);
    }
  }
  return PhoneInventory(std::move(language), std::vector<IpaToken>(seen.begin(), seen.end()));
}

PhoneInventory build_inventory(std::string language, std::istream& transcripts,
                               const ParseOptions& options) {
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(transcripts, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return build_inventory(std::move(language), lines, options);
}

std::string_view vocab_kind_name(VocabKind kind) {
  return kind == VocabKind::Ipa ? "ipa" : "bpe";
}

Vocabulary::Vocabulary(VocabKind kind, std::vector<std::string> tokens,
                       std::map<std::string, std::string> metadata)
    : kind_(kind), metadata_(std::move(metadata)) {
  entries_.reserve(tokens.size() + kNumSpecials);
  for (auto sp : kSpecials) entries_.emplace_back(sp);
  for (auto& t : tokens) entries_.push_back(std::move(t));
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].empty()) fail(ErrorCode::ParseError, "empty vocabulary entry");
    if (!index_.emplace(entries_[i], static_cast<int>(i)).second) {
      fail(ErrorCode::ParseError, "duplicate vocabulary entry '" + entries_[i] + "'");
    }
  }
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= entries_.size()) {
    fail(ErrorCode::IdOutOfRange, "token id " + std::to_string(id) + " outside vocabulary of " +
                                      std::to_string(entries_.size()));
  }
  return entries_[static_cast<std::size_t>(id)];
}

std::optional<int> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

int Vocabulary::id_or_unk(std::string_view token) const { return find(token).value_or(kUnk); }

std::uint64_t Vocabulary::content_hash() const {
  std::uint64_t h = text::fnv1a(vocab_kind_name(kind_));
  for (const auto& e : entries_) {
    h = text::fnv1a(e, h);
    h = text::fnv1a("\n", h);
  }
  return h;
}

std::string Vocabulary::to_text() const {
  std::string out = "# kind=" + std::string(vocab_kind_name(kind_)) + "\n";
  for (const auto& [k, v] : metadata_) {
    if (k == "kind") continue;
    out += "# " + k + "=" + v + "\n";
  }
  for (const auto& e : entries_) out += e + "\n";
  return out;
}

Vocabulary Vocabulary::from_text(std::string_view text) {
  TokenFile f = parse_token_file(text);
  auto kind_it = f.header.find("kind");
  if (kind_it == f.header.end()) fail(ErrorCode::ParseError, "vocabulary file lacks '# kind='");
  VocabKind kind;
  if (kind_it->second == "ipa") {
    kind = VocabKind::Ipa;
  } else if (kind_it->second == "bpe") {
    kind = VocabKind::Bpe;
  } else {
    fail(ErrorCode::ParseError, "unknown vocabulary kind '" + kind_it->second + "'");
  }
  f.header.erase(kind_it);
  if (f.entries.size() < static_cast<std::size_t>(kNumSpecials)) {
    fail(ErrorCode::ParseError, "vocabulary file shorter than the reserved specials");
  }
  for (int i = 0; i < kNumSpecials; ++i) {
    if (f.entries[static_cast<std::size_t>(i)] != kSpecials[i]) {
      fail(ErrorCode::ParseError, "vocabulary id " + std::to_string(i) + " must be " +
                                      std::string(kSpecials[i]));
    }
  }
  std::vector<std::string> tokens(f.entries.begin() + kNumSpecials, f.entries.end());
  return Vocabulary(kind, std::move(tokens), std::move(f.header));
}

void Vocabulary::save(const std::filesystem::path& path) const { io::write_file(path, to_text()); }

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  return from_text(io::read_file(path));
}

Vocabulary union_vocabulary(std::span<const PhoneInventory> inventories) {
  if (inventories.empty()) fail(ErrorCode::EmptyInput, "union_vocabulary needs at least one inventory");
  std::set<std::string> tokens;
  std::set<std::string> languages;
  for (const auto& inv : inventories) {
    languages.insert(inv.language());
    for (const auto& t : inv.tokens()) tokens.insert(t.text);
  }
  std::string langs;
  for (const auto& l : languages) {
    if (!langs.empty()) langs += ",";
    langs += l;
  }
  return Vocabulary(VocabKind::Ipa, std::vector<std::string>(tokens.begin(), tokens.end()),
                    {{"languages", langs}, {"source", "union_vocabulary"}});
}

}  // namespace ipat::phoneset
