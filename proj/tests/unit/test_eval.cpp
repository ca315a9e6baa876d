#include <doctest.h>

#include <cmath>
#include <functional>
#include <map>

#include "ipat/error.hpp"
#include "ipat/eval.hpp"
#include "ipat/phoneset.hpp"
#include "ipat/rng.hpp"
#include "oracles.hpp"

using namespace ipat;
using namespace ipat::eval;
using phoneset::Vocabulary;

namespace {

constexpr int kA = 4, kB = 5, kEos = Vocabulary::kSosEos;

// Next-token distribution depends only on the last token:
//   after <sos>: a .5, b .4, eos .1
//   after a:     a .35, b .35, eos .3
//   after b:     a .05, b .05, eos .9
class TableScorer final : public StepScorer {
 public:
  int vocab_size() const override { return 6; }
  std::vector<std::vector<double>> step(std::span<const std::vector<int>> prefixes) override {
    ++calls;
    std::vector<std::vector<double>> rows;
    for (const auto& p : prefixes) {
      std::vector<double> r(6, -50.0);
      const std::map<int, double>& t = p.back() == kA ? after_a : p.back() == kB ? after_b : after_sos;
      for (auto [id, prob] : t) r[id] = std::log(prob);
      rows.push_back(r);
    }
    return rows;
  }
  void reorder(std::span<const int> parents) override { reorders.emplace_back(parents.begin(), parents.end()); }

  int calls = 0;
  std::vector<std::vector<int>> reorders;

 private:
  std::map<int, double> after_sos{{kA, 0.5}, {kB, 0.4}, {kEos, 0.1}};
  std::map<int, double> after_a{{kA, 0.35}, {kB, 0.35}, {kEos, 0.3}};
  std::map<int, double> after_b{{kA, 0.05}, {kB, 0.05}, {kEos, 0.9}};
};

std::vector<std::string> words(const std::string& s) { return text::split_whitespace(s); }

// Memoized edit distance, written independently of the aligner.
std::int64_t levenshtein(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::map<std::pair<std::size_t, std::size_t>, std::int64_t> memo;
  std::function<std::int64_t(std::size_t, std::size_t)> d = [&](std::size_t i, std::size_t j) -> std::int64_t {
    if (i == 0) return static_cast<std::int64_t>(j);
    if (j == 0) return static_cast<std::int64_t>(i);
    auto it = memo.find({i, j});
    if (it != memo.end()) return it->second;
    const std::int64_t v =
        std::min({d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] == b[j - 1] ? 0 : 1)});
    memo[{i, j}] = v;
    return v;
  };
  return d(a.size(), b.size());
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::EmptyInput;
}

}  // namespace

TEST_CASE("greedy follows the argmax, beam finds the better sequence") {
  TableScorer g;
  const auto hg = greedy(g, 3);
  // a (.5), then a/b tie broken toward the lower id, then the forced eos.
  CHECK(hg.tokens == std::vector<int>{kA, kA, kEos});
  CHECK(hg.score == doctest::Approx(std::log(0.5 * 0.35 * 0.3)));
  REQUIRE(hg.token_scores.size() == 3);
  CHECK(hg.token_scores[0] + hg.token_scores[1] + hg.token_scores[2] == doctest::Approx(hg.score));

  TableScorer b;
  const auto hb = beam_search(b, 2, 3);
  // "b eos" = .36 beats every continuation of "a" (at most .5 * .35).
  CHECK(hb.tokens == std::vector<int>{kB, kEos});
  CHECK(hb.score == doctest::Approx(std::log(0.36)));
  // Stopped early: two scorer calls, not three.
  CHECK(b.calls == 2);

  TableScorer one;
  const auto h1 = beam_search(one, 1, 3);
  CHECK(h1.tokens == hg.tokens);
  CHECK(h1.score == hg.score);

  TableScorer shortest;
  CHECK(beam_search(shortest, 4, 1).tokens == std::vector<int>{kEos});
  CHECK_THROWS_AS(beam_search(shortest, 0, 3), Error);
}

TEST_CASE("emittable ids") {
  CHECK_FALSE(emittable(Vocabulary::kBlank));
  CHECK_FALSE(emittable(Vocabulary::kPad));
  CHECK(emittable(Vocabulary::kUnk));
  CHECK(emittable(Vocabulary::kSosEos));
  CHECK(emittable(7));
}

TEST_CASE("ctc greedy collapse") {
  auto path_matrix = [](const std::vector<int>& path, int V) {
    std::vector<double> m(path.size() * V, -5.0);
    for (std::size_t t = 0; t < path.size(); ++t) m[t * V + path[t]] = -0.1;
    return m;
  };
  const int V = 6;
  auto m = path_matrix({0, kA, kA, 0, kB}, V);
  CHECK(ctc_greedy<double>(m, 5, V) == std::vector<int>{kA, kB});
  m = path_matrix({0, 0, 0}, V);
  CHECK(ctc_greedy<double>(m, 3, V).empty());
  // A blank between repeats keeps both.
  m = path_matrix({kA, 0, kA, kB, kB, 0}, V);
  CHECK(ctc_greedy<double>(m, 6, V) == std::vector<int>{kA, kA, kB});
  // Fixture with graded rows: argmaxes are 4, 4, 5, 0, 5.
  const std::vector<float> f{
      -3, -4, -5, -6, -0.2f, -1,   -2, -4, -5, -6, -0.5f, -0.9f, -2, -4, -5, -6, -1.2f, -0.3f,
      -0.1f, -4, -5, -6, -2, -3,   -2, -4, -5, -6, -3, -0.7f};
  CHECK(ctc_greedy<float>(f, 5, V) == std::vector<int>{kA, kB, kB});
}

TEST_CASE("edit distance examples") {
  const auto same = edit_distance_align(words("a b c"), words("a b c"));
  CHECK(same.counts.total() == 0);
  const auto sub = edit_distance_align(words("a b c"), words("a x c"));
  CHECK(sub.counts.sub == 1);
  CHECK(sub.counts.ins == 0);
  CHECK(sub.counts.del == 0);
  const auto del = edit_distance_align(words("a"), words(""));
  CHECK(del.counts.del == 1);
  CHECK(del.counts.total() == 1);
  CHECK(code_of([] { edit_distance_align(words(""), words("a")); }) == ErrorCode::EmptyReference);

  // Tie preference: "a b" -> "b" deletes a and matches b.
  const auto t = align(words("a b"), words("b"));
  REQUIRE(t.ops.size() == 2);
  CHECK(t.ops[0] == AlignOp{AlignOp::Kind::Del, 0, -1});
  CHECK(t.ops[1] == AlignOp{AlignOp::Kind::Match, 1, 0});
  const auto ins = align(words("a"), words("a z"));
  CHECK(ins.counts.ins == 1);
  CHECK(ins.ops[1] == AlignOp{AlignOp::Kind::Ins, -1, 1});
  CHECK(align_code(AlignOp::Kind::Sub) == 'S');
}

TEST_CASE("edit distance agrees with a recursive oracle and is symmetric") {
  Rng rng(21);
  const std::vector<std::string> alphabet{"a", "b", "c", "d"};
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<std::string> x, y;
    const int nx = 1 + static_cast<int>(rng.below(7)), ny = 1 + static_cast<int>(rng.below(7));
    for (int i = 0; i < nx; ++i) x.push_back(alphabet[rng.below(4)]);
    for (int i = 0; i < ny; ++i) y.push_back(alphabet[rng.below(4)]);
    const auto a = align(x, y);
    CHECK(a.counts.total() == levenshtein(x, y));
    CHECK(align(y, x).counts.total() == a.counts.total());
    // The ops replay to the hypothesis.
    std::vector<std::string> replay;
    std::int64_t ref_used = 0;
    for (const auto& op : a.ops) {
      if (op.kind != AlignOp::Kind::Del) replay.push_back(y[op.hyp]);
      if (op.kind != AlignOp::Kind::Ins) ++ref_used;
    }
    CHECK(replay == y);
    CHECK(ref_used == static_cast<std::int64_t>(x.size()));
  }
}

TEST_CASE("corpus scoring pools counts") {
  const std::vector<TextRecord> refs{{"u1", "Hello, World"}, {"u2", "good day"}};
  const std::vector<TextRecord> hyps{{"u2", "good day"}, {"u1", "hello there"}};
  const auto r = score_corpus(refs, hyps, Unit::Word);
  CHECK(r.ref_tokens == 4);
  CHECK(r.counts.sub == 1);
  CHECK(r.error_rate == doctest::Approx(0.25));
  REQUIRE(r.utterances.size() == 2);
  CHECK(r.utterances[0].id == "u1");
  CHECK(r.utterances[0].ref == words("hello world"));

  const auto perfect = score_corpus(refs, refs, Unit::Word);
  CHECK(perfect.error_rate == 0.0);

  // Phones: IPA tokens with the length mark as its own unit.
  const std::vector<TextRecord> pr{{"p", "aː b"}};
  const std::vector<TextRecord> ph{{"p", "a b"}};
  const auto phones = score_corpus(pr, ph, Unit::Phone);
  CHECK(phones.ref_tokens == 3);
  CHECK(phones.counts.del == 1);
  CHECK(phones.error_rate == doctest::Approx(1.0 / 3));

  // An empty reference is allowed when others carry tokens.
  const std::vector<TextRecord> r2{{"a", ""}, {"b", "x y"}};
  const std::vector<TextRecord> h2{{"a", "z"}, {"b", "x y"}};
  CHECK(score_corpus(r2, h2, Unit::Word).error_rate == doctest::Approx(0.5));

  const std::vector<TextRecord> empty{{"a", ""}};
  CHECK(code_of([&] { score_corpus(empty, empty, Unit::Word); }) == ErrorCode::EmptyReference);
  const std::vector<TextRecord> other{{"u1", "x"}, {"u3", "y"}};
  CHECK(code_of([&] { score_corpus(refs, other, Unit::Word); }) == ErrorCode::IdMismatch);
  const std::vector<TextRecord> dup{{"u1", "x"}, {"u1", "y"}};
  CHECK(code_of([&] { score_corpus(dup, dup, Unit::Word); }) == ErrorCode::IdMismatch);
  CHECK(r.to_json().find("\"error_rate\"") != std::string::npos);
}

TEST_CASE("hypothesis files") {
  const std::vector<TextRecord> h{{"b", "two words", -1.5}, {"a", "ünï", -0.25}};
  const auto back = parse_hypotheses(hypotheses_to_jsonl(h));
  REQUIRE(back.size() == 2);
  CHECK(back[0].id == "b");
  CHECK(back[1].text == "ünï");
  CHECK(back[0].score == -1.5);
  testing::TempDir dir("hyp");
  save_hypotheses(dir / "h.jsonl", h);
  CHECK(load_hypotheses(dir / "h.jsonl").size() == 2);
  CHECK(max_output_len(10, 1.0) == 10);
  CHECK(max_output_len(10, 0.25) == 2);
  CHECK(max_output_len(1, 0.1) == 1);
}

TEST_CASE("model decoding: beam 1 equals greedy") {
  auto arch = model::ArchConfig::desk(6, 9);
  arch.enc_layers = 1;
  arch.dec_layers = 1;
  arch.d_model = 16;
  arch.d_ff = 16;
  arch.conv_kernel = 3;
  const model::Model<float> net(arch, model::init_params<float>(arch, 4));
  frontend::FeatureMatrix f(40, 6);
  Rng rng(2);
  for (auto& x : f.data) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  const auto detok = [](std::span<const int> ids) {
    std::string s;
    for (int id : ids) s += std::to_string(id) + " ";
    return s;
  };
  DecodeOptions o;
  o.beam = 1;
  const auto b1 = decode_utterance(net, f, o, detok);
  CHECK(b1.tokens.back() == kEos);
  CHECK(static_cast<int>(b1.tokens.size()) <= model::subsampled_length(40, arch));

  ad::Tape<float> tp;
  tp.set_grad_enabled(false);
  const frontend::FeatureMatrix* fp = &f;
  std::vector<int> lengths;
  const auto x = model::feature_batch<float>(std::span<const frontend::FeatureMatrix* const>(&fp, 1), &lengths);
  ModelScorer s(net, net.encode(tp, x, lengths));
  const auto g = greedy(s, model::subsampled_length(40, arch));
  CHECK(g.tokens == b1.tokens);

  o.beam = 4;
  const auto b4 = decode_utterance(net, f, o, detok);
  CHECK(b4.tokens.back() == kEos);
  o.mode = DecodeMode::CtcGreedy;
  CHECK_NOTHROW(decode_utterance(net, f, o, detok));
  frontend::FeatureMatrix none(0, 6);
  CHECK(code_of([&] { decode_utterance(net, none, o, detok); }) == ErrorCode::EmptyEncoding);
}
