#include "ipat/bpe.hpp"

#include <algorithm>
#include <limits>
#include <set>

#include "ipat/error.hpp"
#include "ipat/io.hpp"

namespace ipat::bpe {

namespace {

using Symbols = std::vector<std::string>;

Symbols initial_symbols(std::string_view word) {
  Symbols s;
  s.emplace_back(kWordBoundary);
  for (char32_t cp : text::utf8_to_u32(word)) s.push_back(text::codepoint_to_utf8(cp));
  return s;
}

void merge_in_place(Symbols& s, const std::string& left, const std::string& right) {
  Symbols out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i + 1 < s.size() && s[i] == left && s[i + 1] == right) {
      out.push_back(left + right);
      ++i;
    } else {
      out.push_back(std::move(s[i]));
    }
  }
  s = std::move(out);
}

}  // namespace

BpeModel::BpeModel(std::vector<Merge> merges, phoneset::Vocabulary vocab,
                   text::Normalizer normalizer)
    : merges_(std::move(merges)), vocab_(std::move(vocab)), normalizer_(std::move(normalizer)) {
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    rank_.emplace(std::make_pair(merges_[r].left, merges_[r].right), r);
  }
}

std::vector<std::string> BpeModel::segment_word(std::string_view word) const {
  Symbols s = initial_symbols(word);
  // Equivalent to replaying the merge list in order: always apply the
  // lowest-ranked present pair whose rank exceeds the last one applied.
  std::size_t floor_rank = 0;
  bool first = true;
  while (s.size() > 1) {
    std::size_t best = std::numeric_limits<std::size_t>::max();
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      auto it = rank_.find({s[i], s[i + 1]});
      if (it == rank_.end()) continue;
      if (!first && it->second <= floor_rank) continue;
      best = std::min(best, it->second);
    }
    if (best == std::numeric_limits<std::size_t>::max()) break;
    merge_in_place(s, merges_[best].left, merges_[best].right);
    floor_rank = best;
    first = false;
  }
  return s;
}

std::vector<int> BpeModel::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& word : text::split_whitespace(normalizer_.apply(text))) {
    for (const auto& piece : segment_word(word)) ids.push_back(vocab_.id_or_unk(piece));
  }
  return ids;
}

std::string BpeModel::decode(std::span<const int> ids) const {
  std::string joined;
  for (int id : ids) {
    const std::string& tok = vocab_.token(id);
    if (id == phoneset::Vocabulary::kUnk) {
      joined += tok;
    } else if (id < phoneset::Vocabulary::kNumSpecials) {
      continue;
    } else {
      joined += tok;
    }
  }
  std::string out;
  std::size_t pos = 0;
  while (pos < joined.size()) {
    if (joined.compare(pos, kWordBoundary.size(), kWordBoundary) == 0) {
      if (!out.empty() && out.back() != ' ') out.push_back(' ');
      pos += kWordBoundary.size();
    } else {
      out.push_back(joined[pos]);
      ++pos;
    }
  }
  return std::string(text::trim(out));
}

std::string BpeModel::merges_text() const {
  std::string out;
  for (const auto& m : merges_) out += m.left + " " + m.right + "\n";
  return out;
}

void BpeModel::save(const std::filesystem::path& merges_path,
                    const std::filesystem::path& vocab_path) const {
  io::write_file(merges_path, merges_text());
  vocab_.save(vocab_path);
}

std::vector<Merge> parse_merges(std::string_view text) {
  std::vector<Merge> merges;
  std::size_t line_no = 0;
  for (const auto& line : io::split_lines(text)) {
    ++line_no;
    if (line.empty()) continue;
    auto sp = line.find(' ');
    if (sp == std::string::npos || sp == 0 || sp + 1 >= line.size() ||
        line.find(' ', sp + 1) != std::string::npos) {
      fail(ErrorCode::ParseError,
           "merges line " + std::to_string(line_no) + ": expected 'left right'");
    }
    merges.push_back({line.substr(0, sp), line.substr(sp + 1)});
  }
  return merges;
}

BpeModel BpeModel::load(const std::filesystem::path& merges_path,
                        const std::filesystem::path& vocab_path) {
  auto vocab = phoneset::Vocabulary::load(vocab_path);
  if (vocab.kind() != phoneset::VocabKind::Bpe) {
    fail(ErrorCode::ParseError, vocab_path.string() + " is not a BPE vocabulary");
  }
  return BpeModel(parse_merges(io::read_file(merges_path)), std::move(vocab));
}

BpeModel train_bpe(std::span<const std::string> corpus, std::size_t target_size,
                   const text::Normalizer& normalizer) {
  std::map<std::string, long> word_freq;
  for (const auto& line : corpus) {
    for (auto& w : text::split_whitespace(normalizer.apply(line))) ++word_freq[w];
  }
  if (word_freq.empty()) fail(ErrorCode::EmptyCorpus, "BPE training corpus has no words");

  std::set<std::string> chars;
  std::vector<std::pair<Symbols, long>> words;
  words.reserve(word_freq.size());
  for (const auto& [w, f] : word_freq) {
    Symbols s = initial_symbols(w);
    chars.insert(s.begin() + 1, s.end());
    words.emplace_back(std::move(s), f);
  }
  const std::size_t specials = phoneset::Vocabulary::kNumSpecials;
  if (target_size <= chars.size() + specials) {
    fail(ErrorCode::BadConfig, "BPE target size " + std::to_string(target_size) +
                                   " must exceed distinct characters (" +
                                   std::to_string(chars.size()) + ") plus specials");
  }

  std::set<std::string> alphabet = chars;
  alphabet.insert(std::string(kWordBoundary));
  std::vector<std::string> tokens(alphabet.begin(), alphabet.end());
  std::set<std::string> known(alphabet.begin(), alphabet.end());
  std::vector<Merge> merges;

  while (tokens.size() + specials < target_size) {
    std::map<std::pair<std::string, std::string>, long> pair_freq;
    for (const auto& [s, f] : words) {
      for (std::size_t i = 0; i + 1 < s.size(); ++i) pair_freq[{s[i], s[i + 1]}] += f;
    }
    const std::pair<std::string, std::string>* best = nullptr;
    long best_count = 0;
    std::string best_merged;
    for (const auto& [pair, count] : pair_freq) {
      std::string merged = pair.first + pair.second;
      if (best == nullptr || count > best_count ||
          (count == best_count &&
           (merged < best_merged || (merged == best_merged && pair.first < best->first)))) {
        best = &pair;
        best_count = count;
        best_merged = std::move(merged);
      }
    }
    if (best == nullptr || best_count < 2) break;
    Merge m{best->first, best->second};
    for (auto& [s, f] : words) merge_in_place(s, m.left, m.right);
    if (known.insert(best_merged).second) tokens.push_back(best_merged);
    merges.push_back(std::move(m));
  }

  phoneset::Vocabulary vocab(phoneset::VocabKind::Bpe, std::move(tokens),
                             {{"target_size", std::to_string(target_size)},
                              {"normalization", normalizer.describe()}});
  return BpeModel(std::move(merges), std::move(vocab), normalizer);
}

}  // namespace ipat::bpe
