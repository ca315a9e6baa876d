#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ipat/g2p.hpp"
#include "ipat/manifest.hpp"

namespace ipat::synth {

/// One synthetic "language": a phone inventory, a lexicon built from CV(C)
/// syllables and a transparent orthography.
struct LanguageSpec {
  std::string code;
  std::vector<std::string> consonants;
  std::vector<std::string> vowels;
  bool long_vowels = false;  // plain-letter vowels may carry the length mark
  std::size_t lexicon_size = 200;
  std::size_t train_utts = 200;
  std::size_t dev_utts = 20;
  std::size_t test_utts = 20;
  /// Fraction of words written to the lexicon file; the rest are left to
  /// the rule fallback.
  double lexicon_coverage = 0.8;
  /// Scale of the language-specific pronunciation offset applied to each
  /// phone prototype.
  double accent = 0.15;
};

/// Generator parameters. Every quantity is drawn from streams derived from
/// `seed`, so a config fully determines the corpus.
struct SynthConfig {
  std::uint64_t seed = 1;
  std::size_t feat_dim = 80;
  int min_token_frames = 8;
  int max_token_frames = 11;
  int edge_silence_frames = 6;
  int max_pause_frames = 2;
  double noise = 0.3;
  int min_words = 1;
  int max_words = 3;
  int min_syllables = 1;
  int max_syllables = 2;
  double long_vowel_prob = 0.2;
  double coda_prob = 0.3;
  std::vector<LanguageSpec> languages;
};

struct LanguageData {
  LanguageSpec spec;
  frontend::Manifest train;
  frontend::Manifest dev;
  frontend::Manifest test;
  g2p::Lexicon lexicon;  // the covered subset
  g2p::RuleSet rules;
  /// Every word with its reference pronunciation (space-separated tokens).
  std::map<std::string, std::string> pronunciations;
};

struct Corpus {
  SynthConfig config;
  std::vector<LanguageData> languages;

  const LanguageData& language(const std::string& code) const;
};

/// Orthography shared by all synthetic languages: ASCII phones spell
/// themselves, the rest use "<letter>h" digraphs; long vowels double.
const std::map<std::string, std::string>& spelling_table();

/// Deterministic acoustic prototype for an IPA token (language independent).
std::vector<float> phone_prototype(const std::string& token, std::size_t feat_dim);

Corpus generate(const SynthConfig& config);

/// Writes <dir>/<lang>.{train,dev,test}.jsonl, feats/<lang>/<id>.feat,
/// <lang>.lexicon.tsv and <lang>.rules.tsv.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);

/// Two high-resource languages (2000 training utterances each) and one
/// low-resource language (100) with overlapping inventories.
SynthConfig three_language_config(std::uint64_t seed);
/// Same inventories at a size suited to smoke tests.
SynthConfig small_three_language_config(std::uint64_t seed);

}  // namespace ipat::synth
