#include <doctest.h>

#include "ipat/error.hpp"
#include "ipat/io.hpp"
#include "ipat/viz.hpp"
#include "oracles.hpp"

using namespace ipat;
using namespace ipat::viz;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error raised");
  return ErrorCode::IoError;
}

const testing::ContractFixture& fixture() {
  static const auto f = testing::make_contract_fixture(17);
  return f;
}

}  // namespace

TEST_CASE("t-SNE separates well-separated clusters") {
  const auto r = testing::tsne_three_clusters(5);
  CHECK(r.points == 300);
  CHECK(r.purity >= 0.9);
  CHECK(std::isfinite(r.kl_final));
  CHECK(r.kl_final >= 0.0);
}

TEST_CASE("t-SNE is deterministic and traces KL") {
  std::vector<float> data;
  for (int i = 0; i < 40; ++i) {
    for (int d = 0; d < 3; ++d) data.push_back(static_cast<float>(((i * 7 + d * 3) % 11) + (i < 20 ? 0 : 20)));
  }
  TsneConfig cfg;
  cfg.perplexity = 5.0;
  cfg.iterations = 300;
  cfg.exaggeration_iters = 100;
  const auto a = tsne(data, 40, 3, cfg);
  const auto b = tsne(data, 40, 3, cfg);
  CHECK(a.points == b.points);
  CHECK(a.points.size() == 80);
  REQUIRE_FALSE(a.kl_trace.empty());
  CHECK(a.kl_trace.back().first == 300);
  CHECK(a.kl_final == a.kl_trace.back().second);
  CHECK(a.kl_final <= a.kl_exaggeration_end + 1e-9);
  CHECK(cfg.describe().find("perplexity") != std::string::npos);

  CHECK(code_of([&] { tsne(data, 15, 3, cfg); }) == ErrorCode::TooFewPoints);
  auto bad = cfg;
  bad.perplexity = 0.0;
  CHECK(code_of([&] { tsne(data, 40, 3, bad); }) == ErrorCode::BadPerplexity);
  auto nan_data = data;
  nan_data[4] = std::nanf("");
  CHECK(code_of([&] { tsne(nan_data, 40, 3, cfg); }) == ErrorCode::NonFinite);
}

TEST_CASE("knn purity by hand") {
  // Two pairs far apart plus one stray "a" next to the b pair.
  const std::vector<double> pts{0, 0, 0, 1, 10, 10, 10, 11, 11, 10};
  const std::vector<std::string> lab{"a", "a", "b", "b", "a"};
  // k = 1: a0->a1, a1->a0, b2->b3, b3->b2 (distance 1 vs 1.41), a4->b2 or b3 => 4/5.
  CHECK(knn_purity(pts, lab, 1) == doctest::Approx(0.8));
  const std::vector<std::string> same(5, "x");
  CHECK(knn_purity(pts, same, 3) == 1.0);
}

TEST_CASE("scatter outputs") {
  const std::vector<double> pts{0.5, -1.0, 2.0, 3.0};
  const std::vector<FrameRef> rows{{"hra", "u1", 0}, {"lrc", "u2", 3}};
  const auto csv = scatter_csv(pts, rows, "seed 3");
  CHECK(csv.rfind("# seed 3\n", 0) == 0);
  CHECK(csv.find("x,y,lang,utt,frame\n") != std::string::npos);
  CHECK(csv.find("lrc,u2,3") != std::string::npos);

  const auto svg = scatter_svg(pts, rows);
  CHECK(svg.rfind("<svg", 0) == 0);
  std::size_t circles = 0;
  for (auto p = svg.find("<circle"); p != std::string::npos; p = svg.find("<circle", p + 1)) ++circles;
  CHECK(circles >= 2);
  CHECK(svg.find("hra") != std::string::npos);
  CHECK(svg.find("lrc") != std::string::npos);
  CHECK(palette_color(0) != palette_color(1));
  CHECK(palette_color(0).front() == '#');

  testing::TempDir dir("viz");
  const std::vector<std::string> langs{"hra", "lrc"};
  emit_scatter(pts, rows, langs, "c", dir / "s.csv", dir / "s.svg");
  CHECK(io::read_file(dir / "s.csv") == scatter_csv(pts, rows, "c"));
  CHECK(std::filesystem::exists(dir / "s.svg"));
}

TEST_CASE("fixed frames across checkpoints") {
  const auto r = testing::fixed_frame_contract(fixture(), 8, 3);
  for (const auto& f : r.failures) FAIL_CHECK(f);
  CHECK(r.cases > 8);

  LanguageManifests m;
  for (const auto& l : fixture().corpus.languages) m[l.spec.code] = l.test;
  CHECK(code_of([&] { select_frames(m, 1000000, 3, fixture().parent.arch); }) == ErrorCode::InsufficientFrames);
}

TEST_CASE("embedding files round trip") {
  LanguageManifests m;
  for (const auto& l : fixture().corpus.languages) m[l.spec.code] = l.test;
  const auto e = extract_frame_embeddings(fixture().parent, m, 4, 9);
  CHECK(e.dim == fixture().parent.arch.d_model);
  CHECK(e.seed == 9);
  testing::TempDir dir("emb");
  save_embeddings(dir / "e.bin", e);
  const auto back = load_embeddings(dir / "e.bin");
  CHECK(back.dim == e.dim);
  CHECK(back.seed == e.seed);
  CHECK(back.rows == e.rows);
  CHECK(back.data == e.data);
  io::write_file(dir / "bad.bin", "nope");
  CHECK_THROWS_AS(load_embeddings(dir / "bad.bin"), Error);
}
