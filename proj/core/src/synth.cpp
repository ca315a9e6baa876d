#include "ipat/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "ipat/error.hpp"
#include "ipat/io.hpp"
#include "ipat/rng.hpp"
#include "ipat/text.hpp"

namespace ipat::synth {

namespace {

constexpr std::string_view kLengthMark = "\xCB\x90";  // U+02D0

struct Syllable {
  std::vector<std::string> tokens;  // IPA tokens
  std::string spelling;
};

bool is_plain_vowel(const std::string& v) {
  return v.size() == 1 && std::string_view("aeiou").find(v[0]) != std::string_view::npos;
}

std::vector<float> language_offset(const std::string& lang, const std::string& token,
                                   std::size_t feat_dim, double accent) {
  Rng rng(derive_seed(derive_seed(0x5eedULL, lang), token));
  std::vector<float> off(feat_dim);
  for (auto& v : off) v = static_cast<float>(accent * rng.normal());
  return off;
}

struct Generator {
  const SynthConfig& cfg;
  const LanguageSpec& spec;

  std::pair<std::string, std::vector<std::string>> make_word(Rng& rng) const {
    const int syllables = rng.range(cfg.min_syllables, cfg.max_syllables);
    std::string spelling;
    std::vector<std::string> tokens;
    for (int s = 0; s < syllables; ++s) {
      const auto& c = spec.consonants[rng.below(spec.consonants.size())];
      const auto& v = spec.vowels[rng.below(spec.vowels.size())];
      tokens.push_back(c);
      spelling += spelling_table().at(c);
      tokens.push_back(v);
      spelling += spelling_table().at(v);
      if (spec.long_vowels && is_plain_vowel(v) && rng.uniform() < cfg.long_vowel_prob) {
        tokens.emplace_back(kLengthMark);
        spelling += v;
      }
      if (s + 1 == syllables && rng.uniform() < cfg.coda_prob) {
        const auto& coda = spec.consonants[rng.below(spec.consonants.size())];
        tokens.push_back(coda);
        spelling += spelling_table().at(coda);
      }
    }
    return {spelling, tokens};
  }
};

std::string capitalize_sentence(const std::string& s) {
  if (s.empty()) return s;
  std::string out = s;
  if (out[0] >= 'a' && out[0] <= 'z') out[0] = static_cast<char>(out[0] - 'a' + 'A');
  return out + ".";
}

}  // namespace

const LanguageData& Corpus::language(const std::string& code) const {
  for (const auto& l : languages) {
    if (l.spec.code == code) return l;
  }
  fail(ErrorCode::ConfigError, "synthetic corpus has no language '" + code + "'");
}

const std::map<std::string, std::string>& spelling_table() {
  static const std::map<std::string, std::string> table = {
      {"p", "p"},   {"b", "b"},   {"t", "t"},   {"d", "d"},   {"k", "k"},
      {"g", "g"},   {"m", "m"},   {"n", "n"},   {"s", "s"},   {"z", "z"},
      {"f", "f"},   {"v", "v"},   {"l", "l"},   {"r", "r"},   {"j", "j"},
      {"w", "w"},   {"x", "x"},   {"a", "a"},   {"e", "e"},   {"i", "i"},
      {"o", "o"},   {"u", "u"},   {"y", "y"},   {"ʃ", "sh"},  {"ʒ", "zh"},
      {"ŋ", "nh"},  {"ɲ", "gh"},  {"t͡ʃ", "ch"}, {"d͡ʒ", "jh"}, {"ɛ", "eh"},
      {"ɔ", "oh"},  {"ə", "ah"},  {"ø", "uh"},
  };
  return table;
}

std::vector<float> phone_prototype(const std::string& token, std::size_t feat_dim) {
  std::vector<float> proto(feat_dim, -1.0f);
  if (token.empty()) {
    std::fill(proto.begin(), proto.end(), -1.5f);
    return proto;
  }
  Rng rng(derive_seed(0x9407ULL, token));
  const double dim = static_cast<double>(feat_dim);
  for (int bump = 0; bump < 3; ++bump) {
    const double center = rng.uniform(0.0, dim);
    const double width = rng.uniform(0.02, 0.07) * dim;
    const double amp = rng.uniform(1.0, 2.5);
    for (std::size_t f = 0; f < feat_dim; ++f) {
      const double z = (static_cast<double>(f) - center) / width;
      proto[f] += static_cast<float>(amp * std::exp(-0.5 * z * z));
    }
  }
  return proto;
}

Corpus generate(const SynthConfig& cfg) {
  if (cfg.feat_dim < 2) fail(ErrorCode::BadConfig, "synthetic feature dimension must be >= 2");
  if (cfg.min_token_frames < 1 || cfg.max_token_frames < cfg.min_token_frames) {
    fail(ErrorCode::BadConfig, "invalid token duration range");
  }
  if (cfg.min_words < 1 || cfg.max_words < cfg.min_words || cfg.min_syllables < 1 ||
      cfg.max_syllables < cfg.min_syllables) {
    fail(ErrorCode::BadConfig, "invalid word or syllable count range");
  }
  Corpus corpus;
  corpus.config = cfg;
  const auto silence = phone_prototype("", cfg.feat_dim);

  for (const auto& spec : cfg.languages) {
    if (spec.consonants.empty() || spec.vowels.empty()) {
      fail(ErrorCode::BadConfig, "language '" + spec.code + "' needs consonants and vowels");
    }
    for (const auto& p : spec.consonants) {
      if (!spelling_table().contains(p)) fail(ErrorCode::BadConfig, "no spelling for phone " + p);
    }
    for (const auto& p : spec.vowels) {
      if (!spelling_table().contains(p)) fail(ErrorCode::BadConfig, "no spelling for phone " + p);
    }
    LanguageData data;
    data.spec = spec;
    Generator gen{cfg, spec};

    // Lexicon.
    Rng lex_rng(derive_seed(cfg.seed, "lexicon:" + spec.code));
    std::vector<std::string> words;
    std::set<std::string> seen;
    std::size_t attempts = 0;
    while (words.size() < spec.lexicon_size && attempts < spec.lexicon_size * 200) {
      ++attempts;
      auto [spelling, tokens] = gen.make_word(lex_rng);
      if (!seen.insert(spelling).second) continue;
      std::string pron;
      for (const auto& t : tokens) {
        if (!pron.empty()) pron.push_back(' ');
        pron += t;
      }
      data.pronunciations[spelling] = pron;
      words.push_back(spelling);
    }
    if (words.empty()) fail(ErrorCode::BadConfig, "could not build a lexicon for " + spec.code);

    data.lexicon = g2p::Lexicon(spec.code);
    for (std::size_t i = 0; i < words.size(); ++i) {
      if (lex_rng.uniform() < spec.lexicon_coverage) {
        data.lexicon.add(words[i], data.pronunciations[words[i]]);
      }
    }
    std::set<std::string> phones(spec.consonants.begin(), spec.consonants.end());
    phones.insert(spec.vowels.begin(), spec.vowels.end());
    std::vector<g2p::Rule> rules;
    for (const auto& p : phones) {
      rules.push_back({text::utf8_to_u32(spelling_table().at(p)), p});
      if (spec.long_vowels && is_plain_vowel(p)) {
        rules.push_back({text::utf8_to_u32(p + p), p + std::string(kLengthMark)});
      }
    }
    data.rules = g2p::RuleSet(std::move(rules));

    // Utterances.
    auto make_split = [&](const std::string& split, std::size_t count) {
      frontend::Manifest m;
      Rng utt_rng(derive_seed(cfg.seed, "utts:" + spec.code + ":" + split));
      for (std::size_t n = 0; n < count; ++n) {
        char idbuf[64];
        std::snprintf(idbuf, sizeof idbuf, "%s-%s-%05zu", spec.code.c_str(), split.c_str(), n);
        const int nwords = utt_rng.range(cfg.min_words, cfg.max_words);
        std::string sentence;
        std::vector<std::vector<std::string>> word_tokens;
        for (int w = 0; w < nwords; ++w) {
          const auto& word = words[utt_rng.below(words.size())];
          if (!sentence.empty()) sentence.push_back(' ');
          sentence += word;
          word_tokens.push_back(text::split_whitespace(data.pronunciations[word]));
        }

        Rng ac(derive_seed(cfg.seed, std::string("acoustic:") + idbuf));
        std::vector<std::vector<float>> frames;
        auto push_segment = [&](const std::vector<float>& target, int len) {
          const std::vector<float> prev = frames.empty() ? silence : frames.back();
          for (int i = 0; i < len; ++i) {
            // Two-frame glide from the previous segment.
            const double alpha = i == 0 ? 0.5 : 1.0;
            std::vector<float> f(cfg.feat_dim);
            for (std::size_t d = 0; d < cfg.feat_dim; ++d) {
              f[d] = static_cast<float>(alpha * target[d] + (1.0 - alpha) * prev[d]);
            }
            frames.push_back(std::move(f));
          }
        };
        const double gain = ac.uniform(-0.3, 0.3);
        push_segment(silence, cfg.edge_silence_frames);
        std::string ipa;
        for (std::size_t w = 0; w < word_tokens.size(); ++w) {
          if (w > 0 && cfg.max_pause_frames > 0) {
            const int pause = ac.range(0, cfg.max_pause_frames);
            if (pause > 0) push_segment(silence, pause);
          }
          std::vector<float> last_base = silence;
          for (const auto& tok : word_tokens[w]) {
            if (!ipa.empty()) ipa.push_back(' ');
            ipa += tok;
            auto proto = phone_prototype(tok, cfg.feat_dim);
            const auto off = language_offset(spec.code, tok, cfg.feat_dim, spec.accent);
            if (tok == kLengthMark) {
              for (std::size_t d = 0; d < cfg.feat_dim; ++d) {
                proto[d] = 0.6f * last_base[d] + 0.4f * proto[d];
              }
            }
            for (std::size_t d = 0; d < cfg.feat_dim; ++d) proto[d] += off[d];
            if (tok != kLengthMark) last_base = proto;
            push_segment(proto, ac.range(cfg.min_token_frames, cfg.max_token_frames));
          }
        }
        push_segment(silence, cfg.edge_silence_frames);

        auto feats = std::make_shared<frontend::FeatureMatrix>(frames.size(), cfg.feat_dim);
        for (std::size_t t = 0; t < frames.size(); ++t) {
          for (std::size_t d = 0; d < cfg.feat_dim; ++d) {
            feats->at(t, d) = static_cast<float>(frames[t][d] + gain + cfg.noise * ac.normal());
          }
        }
        frontend::Utterance u;
        u.id = idbuf;
        u.language = spec.code;
        u.duration_s = static_cast<double>(frames.size()) * 0.01;
        u.text = capitalize_sentence(sentence);
        u.ipa = ipa;
        u.features = std::move(feats);
        m.push_back(std::move(u));
      }
      return m;
    };
    data.train = make_split("train", spec.train_utts);
    data.dev = make_split("dev", spec.dev_utts);
    data.test = make_split("test", spec.test_utts);
    corpus.languages.push_back(std::move(data));
  }
  return corpus;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& lang : corpus.languages) {
    const auto& code = lang.spec.code;
    auto write_split = [&](const std::string& split, const frontend::Manifest& m) {
      frontend::Manifest out;
      for (const auto& u : m) {
        frontend::Utterance w = u;
        w.feats = dir / "feats" / code / (u.id + ".feat");
        frontend::write_features(w.feats, *u.features);
        w.features.reset();
        // Reference IPA stays out of the manifest; the g2p stage derives it.
        w.ipa.reset();
        out.push_back(std::move(w));
      }
      frontend::save_manifest(dir / (code + "." + split + ".jsonl"), out);
    };
    write_split("train", lang.train);
    write_split("dev", lang.dev);
    write_split("test", lang.test);
    io::write_file(dir / (code + ".lexicon.tsv"), lang.lexicon.to_text());
    io::write_file(dir / (code + ".rules.tsv"), lang.rules.to_text());
  }
}

namespace {

SynthConfig base_three_language(std::uint64_t seed, std::size_t high, std::size_t low,
                                std::size_t dev, std::size_t test) {
  SynthConfig cfg;
  cfg.seed = seed;
  LanguageSpec hra;
  hra.code = "hra";
  hra.consonants = {"p", "b", "t", "d", "k", "g", "m", "n", "s", "z", "f", "v", "l", "r", "ʃ",
                    "ʒ", "t͡ʃ"};
  hra.vowels = {"a", "e", "i", "o", "u", "ɛ", "ɔ"};
  hra.long_vowels = true;
  hra.lexicon_size = 400;
  hra.train_utts = high;
  hra.dev_utts = dev;
  hra.test_utts = test;

  LanguageSpec hrb;
  hrb.code = "hrb";
  hrb.consonants = {"p", "t", "k", "m", "n", "s", "l", "r", "j", "w", "x", "ŋ", "ɲ", "d͡ʒ", "f"};
  hrb.vowels = {"a", "e", "i", "o", "u", "ə", "y", "ø"};
  hrb.long_vowels = false;
  hrb.lexicon_size = 400;
  hrb.train_utts = high;
  hrb.dev_utts = dev;
  hrb.test_utts = test;

  LanguageSpec lrc;
  lrc.code = "lrc";
  lrc.consonants = {"p", "t", "k", "b", "d", "m", "n", "s", "ʃ", "l", "r", "j", "x", "ŋ"};
  lrc.vowels = {"a", "e", "i", "o", "u", "ə"};
  lrc.long_vowels = true;
  lrc.lexicon_size = 60;
  lrc.train_utts = low;
  lrc.dev_utts = dev;
  lrc.test_utts = test;

  cfg.languages = {hra, hrb, lrc};
  return cfg;
}

}  // namespace

SynthConfig three_language_config(std::uint64_t seed) {
  return base_three_language(seed, 2000, 100, 40, 60);
}

SynthConfig small_three_language_config(std::uint64_t seed) {
  auto cfg = base_three_language(seed, 60, 20, 6, 8);
  cfg.feat_dim = 24;
  return cfg;
}

}  // namespace ipat::synth
