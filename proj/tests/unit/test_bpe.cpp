#include <doctest.h>

#include "ipat/bpe.hpp"
#include "ipat/error.hpp"
#include "oracles.hpp"

using namespace ipat;

TEST_CASE("hand-traced merges") {
  const auto r = testing::bpe_hand_traces();
  CHECK(r.cases > 0);
  for (const auto& f : r.failures) FAIL_CHECK(f);
}

TEST_CASE("deterministic merges") {
  const auto r = testing::bpe_determinism(5);
  for (const auto& f : r.failures) FAIL_CHECK(f);
}

TEST_CASE("roundtrip on random unk-free text") {
  const auto r = testing::bpe_roundtrip_property(1000, 9);
  CHECK(r.cases == 1000);
  for (const auto& f : r.failures) FAIL_CHECK(f);
}

TEST_CASE("save and load reproduce the model") {
  testing::TempDir dir("bpe");
  const std::vector<std::string> corpus{"abc abd abe", "bcd bce"};
  const auto m = bpe::train_bpe(corpus, 20);
  m.save(dir / "merges.txt", dir / "vocab.txt");
  const auto back = bpe::BpeModel::load(dir / "merges.txt", dir / "vocab.txt");
  CHECK(back.merges() == m.merges());
  CHECK(back.vocab().same_entries(m.vocab()));
  CHECK(back.encode("abd bce") == m.encode("abd bce"));
  CHECK(m.vocab().non_special_size() <= 20);
}

TEST_CASE("errors") {
  CHECK_THROWS_AS(bpe::train_bpe(std::vector<std::string>{}, 10), Error);
  CHECK_THROWS_AS(bpe::train_bpe(std::vector<std::string>{"", "  "}, 10), Error);
  const std::vector<std::string> corpus{"ab ab"};
  const auto m = bpe::train_bpe(corpus, 20);
  CHECK_THROWS_AS(m.decode(std::vector<int>{999}), Error);
}

TEST_CASE("segmentation never leaves the vocabulary") {
  const std::vector<std::string> corpus{"the cat sat", "the hat", "a cat"};
  const auto m = bpe::train_bpe(corpus, 30);
  for (const auto& w : {"the", "cat", "hat", "sat", "at"}) {
    for (const auto& piece : m.segment_word(w)) CHECK(m.vocab().find(piece).has_value());
  }
}
