#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>

#include "ipat/checkpoint.hpp"
#include "ipat/io.hpp"
#include "ipat/transfer.hpp"
#include "oracles.hpp"

using namespace ipat;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int status = -1;
  std::string err;
};

Outcome run(const std::string& args, const fs::path& scratch) {
  const auto err_path = scratch / "stderr.txt";
  const std::string cmd = std::string(IPAT_CLI) + " " + args + " 2> " + err_path.string() + " > " +
                          (scratch / "stdout.txt").string();
  const int raw = std::system(cmd.c_str());
  Outcome o;
  o.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  o.err = fs::exists(err_path) ? io::read_file(err_path) : "";
  return o;
}

// One small synthetic run shared by the cases below, with short schedules.
struct Pipeline {
  testing::TempDir dir{"cli"};
  fs::path data = dir / "data";
  fs::path runs = dir / "run";
  std::string common;

  Pipeline() {
    REQUIRE(run("synth --size small --seed 3 --out " + data.string(), dir.path()).status == 0);
    common = "--config " + (data / "experiment.cfg").string() + " --run-dir " + runs.string() +
             " --set train.pretrain.epochs=1 --set train.pretrain.average_last=1"
             " --set train.finetune.epochs=1 --set train.finetune.average_last=1"
             " --set train.baseline.epochs=1 --set train.baseline.average_last=1"
             " --set adapt.epochs=1 --set decode.beam=2 --set tsne.iterations=300";
  }
  Outcome step(const std::string& cmd, const std::string& extra = "") const {
    return run(cmd + " " + common + " " + extra, dir.path());
  }
};

Pipeline& pipeline() {
  static Pipeline p;
  return p;
}

}  // namespace

TEST_CASE("usage errors") {
  testing::TempDir dir("cli-usage");
  CHECK(run("", dir.path()).status == 2);
  CHECK(run("frobnicate", dir.path()).status == 2);
  CHECK(run("train-ipa --config x.cfg", dir.path()).status == 2);
  const auto missing = run("train-ipa --config " + (dir / "nope.cfg").string() + " --run-dir " + (dir / "r").string(),
                           dir.path());
  CHECK(missing.status == 5);
  CHECK(missing.err.find("error[IoError]") != std::string::npos);
  const auto unknown = run("train-ipa --run-dir " + (dir / "r").string() + " --set train.bogus=1", dir.path());
  CHECK(unknown.status == 2);
  CHECK(unknown.err.find("error[ConfigError]") != std::string::npos);
}

TEST_CASE("stage order is enforced") {
  auto& p = pipeline();
  const auto early = p.step("finetune");
  CHECK(early.status == 2);
  CHECK(early.err.find("StageOrderError") != std::string::npos);
  CHECK(p.step("decode", "--stage baseline").status == 2);
}

TEST_CASE("end to end") {
  auto& p = pipeline();
  REQUIRE(p.step("g2p").status == 0);
  REQUIRE(p.step("bpe-train").status == 0);
  CHECK(fs::exists(p.runs / "bpe" / "merges.txt"));
  REQUIRE(p.step("train-ipa").status == 0);
  REQUIRE(p.step("adapt").status == 0);
  REQUIRE(p.step("finetune", "--parent adapt").status == 0);
  REQUIRE(p.step("baseline").status == 0);

  const auto pre = ckpt::load_checkpoint(transfer::stage_outputs(p.runs, transfer::Stage::PretrainIpa).checkpoint());
  const auto ft = ckpt::load_checkpoint(transfer::stage_outputs(p.runs, transfer::Stage::Finetune).checkpoint());
  CHECK(ft.provenance.size() == 3);
  CHECK(ft.vocab.kind() == phoneset::VocabKind::Bpe);
  CHECK(pre.vocab.kind() == phoneset::VocabKind::Ipa);
  CHECK(fs::file_size(transfer::stage_outputs(p.runs, transfer::Stage::Finetune).metrics()) > 0);

  REQUIRE(p.step("decode", "--stage finetune").status == 0);
  REQUIRE(p.step("score", "--stage finetune").status == 0);
  const auto report = io::read_file(p.runs / "score" / "finetune.lrc.test.report.json");
  CHECK(report.find("error_rate") != std::string::npos);

  REQUIRE(p.step("embed", "--stage pretrain").status == 0);
  REQUIRE(p.step("tsne", "--stage pretrain").status == 0);
  CHECK(io::read_file(p.runs / "tsne" / "pretrain.svg").rfind("<svg", 0) == 0);
  CHECK(io::read_file(p.runs / "tsne" / "pretrain.csv").rfind("# ", 0) == 0);

  // A corrupt checkpoint is an I/O-category failure.
  const auto ckpt_path = transfer::stage_outputs(p.runs, transfer::Stage::MonolingualBaseline).checkpoint();
  io::write_file(ckpt_path, "garbage");
  const auto bad = p.step("decode", "--stage baseline");
  CHECK(bad.status == 5);
  CHECK(bad.err.find("error[BadMagic]") != std::string::npos);
}

TEST_CASE("g2p on one string") {
  auto& p = pipeline();
  // Without a lexicon or rules every letter is out of vocabulary.
  const auto bare = run("g2p --text abc", p.dir.path());
  CHECK(bare.status == 3);
  const auto lex = (p.data / "lrc.lexicon.tsv").string();
  const auto word = io::read_file(p.data / "lrc.lexicon.tsv");
  const auto first = word.substr(0, word.find('\t'));
  REQUIRE_FALSE(first.empty());
  CHECK(run("g2p --text " + first + " --lexicon " + lex + " --rules " + (p.data / "lrc.rules.tsv").string(),
            p.dir.path())
            .status == 0);
  CHECK_FALSE(io::read_file(p.dir / "stdout.txt").empty());
}
