#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ipat/phoneset.hpp"
#include "ipat/text.hpp"

namespace ipat::bpe {

/// U+2581, prefixed to every word before segmentation.
inline constexpr std::string_view kWordBoundary = "\xE2\x96\x81";
inline constexpr std::size_t kDefaultTargetSize = 5000;

struct Merge {
  std::string left;
  std::string right;

  std::string merged() const { return left + right; }
  friend bool operator==(const Merge&, const Merge&) = default;
};

class BpeModel {
 public:
  BpeModel() = default;
  BpeModel(std::vector<Merge> merges, phoneset::Vocabulary vocab,
           text::Normalizer normalizer = {});

  const std::vector<Merge>& merges() const { return merges_; }
  const phoneset::Vocabulary& vocab() const { return vocab_; }
  const text::Normalizer& normalizer() const { return normalizer_; }

  /// Segments one already-normalized word into token strings.
  std::vector<std::string> segment_word(std::string_view word) const;

  /// Characters outside the vocabulary become <unk>.
  std::vector<int> encode(std::string_view text) const;
  /// Word-boundary markers become spaces; <unk> is spelled out literally;
  /// the remaining specials are dropped.
  std::string decode(std::span<const int> ids) const;

  std::string merges_text() const;
  void save(const std::filesystem::path& merges_path,
            const std::filesystem::path& vocab_path) const;
  static BpeModel load(const std::filesystem::path& merges_path,
                       const std::filesystem::path& vocab_path);

 private:
  std::vector<Merge> merges_;
  std::map<std::pair<std::string, std::string>, std::size_t> rank_;
  phoneset::Vocabulary vocab_;
  text::Normalizer normalizer_;
};

std::vector<Merge> parse_merges(std::string_view text);

/// Greedy BPE training. Each round merges the most frequent adjacent pair
/// (ties: lexicographically smallest merged string, then smallest left
/// token) until the vocabulary holds `target_size` entries including the
/// specials, or no pair occurs at least twice.
BpeModel train_bpe(std::span<const std::string> corpus, std::size_t target_size,
                   const text::Normalizer& normalizer = {});

}  // namespace ipat::bpe
