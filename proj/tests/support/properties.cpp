#include <unistd.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "ipat/bpe.hpp"
#include "ipat/error.hpp"
#include "ipat/io.hpp"
#include "ipat/phoneset.hpp"
#include "ipat/rng.hpp"
#include "ipat/text.hpp"
#include "oracles.hpp"

namespace ipat::testing {

using phoneset::IpaToken;
using phoneset::TokenKind;

std::string unescape(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\' || i + 1 >= s.size()) {
      out += s[i];
      continue;
    }
    const char c = s[++i];
    if (c == 't') {
      out += '\t';
    } else if (c == 'n') {
      out += '\n';
    } else if (c == 'x' || c == 'u' || c == 'U') {
      const std::size_t n = c == 'x' ? 2 : c == 'u' ? 4 : 8;
      const auto cp = static_cast<char32_t>(std::stoul(std::string(s.substr(i + 1, n)), nullptr, 16));
      out += text::codepoint_to_utf8(cp);
      i += n;
    } else {
      out += c;
    }
  }
  return out;
}

namespace {

std::string describe(const std::vector<IpaToken>& toks) {
  std::string s;
  for (const auto& t : toks) {
    if (!s.empty()) s += ' ';
    s += (t.kind == TokenKind::Base ? "B:" : "M:") + t.text;
  }
  return s;
}

}  // namespace

FixtureOutcome run_ipa_fixture(const std::filesystem::path& path) {
  FixtureOutcome out;
  for (const auto& line : io::split_lines(io::read_file(path))) {
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    const std::string input = unescape(line.substr(0, tab));
    const std::string expected = tab == std::string::npos ? "" : unescape(line.substr(tab + 1));
    ++out.cases;
    std::string got;
    try {
      got = describe(phoneset::parse_ipa(input));
    } catch (const UnknownSymbolError& e) {
      got = "!UnknownSymbol@" + std::to_string(e.position());
    }
    if (got != expected) out.failures.push_back("'" + input + "': expected [" + expected + "] got [" + got + "]");
  }
  return out;
}

FixtureOutcome ipa_roundtrip_property(std::size_t trials, std::uint64_t seed) {
  FixtureOutcome out;
  const auto& bases = phoneset::default_bases().codepoints();
  const auto& mods = phoneset::default_modifiers().codepoints();
  const std::u32string spaces = U" \t";
  Rng rng(seed);
  for (std::size_t trial = 0; trial < trials; ++trial) {
    std::u32string s;
    const int segments = static_cast<int>(rng.below(8));
    for (int k = 0; k < segments; ++k) {
      if (rng.uniform() < 0.1) s += mods[rng.below(mods.size())];
      s += bases[rng.below(bases.size())];
      if (rng.uniform() < 0.15) {
        s += phoneset::kTieBar;
        s += bases[rng.below(bases.size())];
      }
      const int n_mod = static_cast<int>(rng.below(3));
      for (int m = 0; m < n_mod; ++m) s += mods[rng.below(mods.size())];
      if (rng.uniform() < 0.2) s += spaces[rng.below(spaces.size())];
    }
    ++out.cases;
    const std::string utf8 = text::u32_to_utf8(s);
    std::u32string expected;
    std::size_t expected_mods = 0;
    for (char32_t cp : text::nfd(std::u32string_view(s))) {
      if (cp == U' ' || cp == U'\t') continue;
      expected += cp;
      if (phoneset::default_modifiers().contains(cp)) ++expected_mods;
    }
    try {
      const auto toks = phoneset::parse_ipa(utf8);
      std::string joined;
      std::size_t mod_tokens = 0;
      bool shapes_ok = true;
      for (const auto& t : toks) {
        joined += t.text;
        const auto cps = text::utf8_to_u32(t.text);
        if (t.kind == TokenKind::Modifier) {
          ++mod_tokens;
          shapes_ok &= cps.size() == 1 && phoneset::default_modifiers().contains(cps[0]);
        } else {
          shapes_ok &= (cps.size() == 1 && phoneset::default_bases().contains(cps[0])) ||
                       (cps.size() == 3 && cps[1] == phoneset::kTieBar);
        }
      }
      if (joined != text::u32_to_utf8(expected) || mod_tokens != expected_mods || !shapes_ok) {
        out.failures.push_back("round trip failed on '" + utf8 + "'");
      }
    } catch (const Error& e) {
      out.failures.push_back("'" + utf8 + "' raised " + e.what());
    }
  }
  return out;
}

UnionOutcome union_properties(std::size_t trials, std::uint64_t seed) {
  UnionOutcome out;
  Rng rng(seed);
  // Token pool: bases, some with a modifier, a few tie-barred pairs.
  std::vector<IpaToken> pool;
  const auto& bases = phoneset::default_bases().codepoints();
  const auto& mods = phoneset::default_modifiers().codepoints();
  for (int i = 0; i < 40; ++i) {
    pool.push_back({text::codepoint_to_utf8(bases[rng.below(bases.size())]), TokenKind::Base});
  }
  for (int i = 0; i < 8; ++i) {
    pool.push_back({text::codepoint_to_utf8(mods[rng.below(mods.size())]), TokenKind::Modifier});
  }
  for (int i = 0; i < 4; ++i) {
    pool.push_back({text::codepoint_to_utf8(bases[rng.below(bases.size())]) + text::codepoint_to_utf8(phoneset::kTieBar) +
                        text::codepoint_to_utf8(bases[rng.below(bases.size())]),
                    TokenKind::Base});
  }
  auto random_inventory = [&](int idx) {
    std::vector<IpaToken> toks;
    const std::size_t n = rng.below(pool.size() / 2 + 1);
    for (std::size_t j = 0; j < n; ++j) toks.push_back(pool[rng.below(pool.size())]);
    return phoneset::PhoneInventory("l" + std::to_string(idx), toks);
  };
  auto entries = [](std::span<const phoneset::PhoneInventory> invs) {
    return phoneset::union_vocabulary(invs).entries();
  };

  for (std::size_t trial = 0; trial < trials; ++trial) {
    ++out.trials;
    std::vector<phoneset::PhoneInventory> invs;
    const int k = 1 + static_cast<int>(rng.below(5));
    for (int i = 0; i < k; ++i) invs.push_back(random_inventory(i));
    const auto base = entries(invs);

    auto perm = invs;
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    if (entries(perm) != base) ++out.order_failures;

    auto doubled = invs;
    doubled.insert(doubled.end(), invs.begin(), invs.end());
    const std::vector<phoneset::PhoneInventory> self{invs[0], invs[0]};
    if (entries(doubled) != base || entries(self) != entries(std::span(invs).first(1))) ++out.idempotence_failures;

    auto grown = invs;
    grown.push_back(random_inventory(k));
    const auto bigger = entries(grown);
    const std::set<std::string> bigger_set(bigger.begin(), bigger.end());
    bool mono = bigger.size() >= base.size();
    for (const auto& e : base) mono &= bigger_set.contains(e);
    if (!mono) ++out.monotonicity_failures;

    // Independent count: a std::set of the token texts (UTF-8 byte order is
    // codepoint order).
    std::set<std::string> u;
    for (const auto& inv : invs) {
      for (const auto& t : inv.tokens()) u.insert(t.text);
    }
    const std::vector<std::string> expected(u.begin(), u.end());
    const auto v = phoneset::union_vocabulary(invs);
    const auto ns = v.non_special();
    bool specials_ok = v.kind() == phoneset::VocabKind::Ipa;
    for (int i = 0; i < phoneset::Vocabulary::kNumSpecials; ++i) {
      specials_ok &= v.entries()[i] == phoneset::Vocabulary::kSpecials[i];
    }
    if (!specials_ok || !std::equal(ns.begin(), ns.end(), expected.begin(), expected.end())) ++out.count_failures;
  }
  return out;
}

namespace {

std::string merges_string(const bpe::BpeModel& m) {
  std::string s;
  for (const auto& mg : m.merges()) s += mg.left + " " + mg.right + "\n";
  return s;
}

std::string join_tokens(const bpe::BpeModel& m, const std::vector<int>& ids) {
  std::string s;
  for (int id : ids) s += (s.empty() ? "" : "|") + m.vocab().token(id);
  return s;
}

}  // namespace

FixtureOutcome bpe_hand_traces() {
  FixtureOutcome out;
  const std::string W(bpe::kWordBoundary);
  auto expect = [&](bool ok, const std::string& what) {
    ++out.cases;
    if (!ok) out.failures.push_back(what);
  };

  // ["aaab", "aaab"]: symbols "▁ a a a b" twice. Pair counts (a,a)=4,
  // (▁,a)=2, (a,b)=2, so round 1 merges (a,a). Then "▁ aa a b": three pairs
  // at 2, smallest merged string "aaa". Then "▁ aaa b": "aaab" < "▁aaa".
  // Then "▁ aaab" -> "▁aaab". Nothing left to pair.
  {
    const std::vector<std::string> corpus{"aaab", "aaab"};
    const auto full = bpe::train_bpe(corpus, 100);
    const std::string expected = "a a\naa a\naaa b\n" + W + " aaab\n";
    expect(merges_string(full) == expected, "aaab trace: got merges\n" + merges_string(full));
    expect(full.vocab().non_special_size() == 3 + 4, "aaab trace: vocab size");
    const auto capped = bpe::train_bpe(corpus, 8);
    expect(merges_string(capped) == "a a\n", "aaab target 8: got merges\n" + merges_string(capped));
    expect(capped.vocab().size() == 8, "aaab target 8: vocab size " + std::to_string(capped.vocab().size()));
    expect(capped.decode(capped.encode("aaab")) == "aaab", "aaab roundtrip");
    expect(join_tokens(capped, capped.encode("aaab")) == W + "|aa|a|b", "aaab target 8 segmentation");
  }
  // ["ab ab ba"]: (▁,a)=2, (a,b)=2, (▁,b)=1, (b,a)=1; "ab" < "▁a" wins.
  // Then (▁,ab)=2 merges; the remaining pairs occur once, so training stops.
  {
    const std::vector<std::string> corpus{"ab ab ba"};
    const auto m = bpe::train_bpe(corpus, 100);
    expect(merges_string(m) == "a b\n" + W + " ab\n", "ab trace: got merges\n" + merges_string(m));
    expect(join_tokens(m, m.encode("ba ab")) == W + "|b|a|" + W + "ab", "ab trace segmentation");
    expect(m.decode(m.encode("Ba, AB!")) == "ba ab", "ab trace normalized roundtrip");
  }
  // One single-character word: nothing to merge.
  {
    const std::vector<std::string> corpus{"a"};
    const auto m = bpe::train_bpe(corpus, 100);
    const auto ns = m.vocab().non_special();
    const std::set<std::string> got(ns.begin(), ns.end());
    expect(m.merges().empty() && got == std::set<std::string>{W, "a"}, "single character corpus");
  }
  // Unseen characters map to <unk>, which decodes literally.
  {
    const std::vector<std::string> corpus{"ab ab ba"};
    const auto m = bpe::train_bpe(corpus, 100);
    const auto ids = m.encode("abz");
    expect(std::find(ids.begin(), ids.end(), phoneset::Vocabulary::kUnk) != ids.end(), "unseen character -> <unk>");
    expect(m.decode(ids).find("<unk>") != std::string::npos, "<unk> decodes literally");
    expect(m.encode("").empty() && m.decode(std::vector<int>{}).empty(), "empty text");
  }
  return out;
}

namespace {

std::string random_text(Rng& rng, std::string_view alphabet, int max_words, int max_len, bool noisy) {
  std::string s;
  const int words = 1 + static_cast<int>(rng.below(max_words));
  for (int w = 0; w < words; ++w) {
    if (w > 0) s += noisy && rng.uniform() < 0.2 ? "  " : " ";
    const int len = 1 + static_cast<int>(rng.below(max_len));
    for (int i = 0; i < len; ++i) {
      char c = alphabet[rng.below(alphabet.size())];
      if (noisy && rng.uniform() < 0.1) c = static_cast<char>(c - 'a' + 'A');
      s += c;
    }
    if (noisy && rng.uniform() < 0.1) s += ",";
  }
  return s;
}

}  // namespace

FixtureOutcome bpe_determinism(std::uint64_t seed) {
  FixtureOutcome out;
  Rng rng(seed);
  std::vector<std::string> corpus;
  for (int i = 0; i < 300; ++i) corpus.push_back(random_text(rng, "abcdefg", 4, 6, false));
  const auto a = bpe::train_bpe(corpus, 80);
  const auto b = bpe::train_bpe(corpus, 80);
  auto shuffled = corpus;
  for (std::size_t i = shuffled.size(); i > 1; --i) std::swap(shuffled[i - 1], shuffled[rng.below(i)]);
  const auto c = bpe::train_bpe(shuffled, 80);
  out.cases = 3;
  if (a.merges_text() != b.merges_text()) out.failures.push_back("two runs differ");
  if (a.merges_text() != c.merges_text()) out.failures.push_back("corpus order changes merges");
  if (a.vocab().content_hash() != c.vocab().content_hash()) out.failures.push_back("corpus order changes vocab");
  return out;
}

FixtureOutcome bpe_roundtrip_property(std::size_t trials, std::uint64_t seed) {
  FixtureOutcome out;
  Rng rng(seed);
  constexpr std::string_view alphabet = "abcdefghij";
  std::vector<std::string> corpus;
  for (int i = 0; i < 200; ++i) corpus.push_back(random_text(rng, alphabet, 5, 7, false));
  const auto m = bpe::train_bpe(corpus, 120);
  const text::Normalizer norm;
  for (std::size_t t = 0; t < trials; ++t) {
    ++out.cases;
    const std::string s = random_text(rng, alphabet, 6, 9, true);
    std::string expected;
    for (const auto& w : text::split_whitespace(norm.apply(s))) expected += (expected.empty() ? "" : " ") + w;
    const auto ids = m.encode(s);
    bool ok = m.decode(ids) == expected;
    for (int id : ids) ok &= id >= phoneset::Vocabulary::kNumSpecials && id < static_cast<int>(m.vocab().size());
    if (!ok) out.failures.push_back("'" + s + "' -> '" + m.decode(ids) + "'");
  }
  return out;
}

TempDir::TempDir(const std::string& tag) {
  static int counter = 0;
  const auto base = std::filesystem::temp_directory_path();
  for (;;) {
    path_ = base / ("ipat-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    if (std::filesystem::create_directories(path_)) return;
  }
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

}  // namespace ipat::testing
