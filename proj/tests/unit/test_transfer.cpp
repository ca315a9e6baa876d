#include <doctest.h>

#include "ipat/error.hpp"
#include "ipat/transfer.hpp"
#include "oracles.hpp"

using namespace ipat;

TEST_CASE("transfer contract") {
  const auto f = testing::make_contract_fixture(3);
  const auto r = testing::transfer_contract(f);
  CHECK(r.cases > 20);
  for (const auto& msg : r.failures) FAIL_CHECK(msg);
}

TEST_CASE("stage names and outputs") {
  CHECK(transfer::stage_name(transfer::Stage::PretrainIpa) == "pretrain");
  CHECK(transfer::stage_name(transfer::Stage::Adapt) == "adapt");
  CHECK(transfer::stage_name(transfer::Stage::Finetune) == "finetune");
  CHECK(transfer::stage_name(transfer::Stage::MonolingualBaseline) == "baseline");
  const auto o = transfer::stage_outputs("runs/x", transfer::Stage::Adapt);
  CHECK(o.checkpoint() == std::filesystem::path("runs/x/adapt/checkpoint.bin"));
  CHECK(o.vocab() == std::filesystem::path("runs/x/adapt/vocab.txt"));
}

TEST_CASE("stage config validation") {
  transfer::StageConfig c;
  c.stage = transfer::Stage::PretrainIpa;
  CHECK_THROWS_AS(c.validate(), Error);
  c.languages = {"hra"};
  CHECK_NOTHROW(c.validate());
  c.stage = transfer::Stage::Adapt;
  c.target_language = "hra";
  try {
    c.validate();
    FAIL("expected StageOrderError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::StageOrderError);
  }
  c.parent_checkpoint = "p.bin";
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("single-language pretraining and determinism") {
  const auto corpus = synth::generate(synth::small_three_language_config(5));
  const auto& l = corpus.language("hrb");
  const std::vector<transfer::LanguageCorpus> one{{"hrb", l.train, l.dev}};
  train::TrainConfig cfg;
  cfg.epochs = 1;
  cfg.average_last = 1;
  cfg.batch_frames = 1500;
  const auto arch = testing::contract_arch(static_cast<int>(corpus.config.feat_dim));
  const auto a = transfer::pretrain_ipa(one, arch, cfg);
  const auto b = transfer::pretrain_ipa(one, arch, cfg);
  CHECK(ckpt::same_params(a.final.params, b.final.params));
  CHECK(a.final.vocab == transfer::ipa_vocabulary(one));
  CHECK(a.final.provenance == std::vector<std::string>{"pretrain_ipa:hrb"});
  REQUIRE_FALSE(a.metrics.empty());
  CHECK(a.metrics.back().dev_loss == b.metrics.back().dev_loss);
}

TEST_CASE("examples need ipa transcripts") {
  const auto corpus = synth::generate(synth::small_three_language_config(5));
  auto m = corpus.language("lrc").train;
  m[0].ipa.reset();
  const auto vocab = transfer::ipa_vocabulary(std::vector<transfer::LanguageCorpus>{{"lrc", corpus.language("lrc").train, {}}});
  CHECK_THROWS_AS(transfer::ipa_examples(m, vocab), Error);
}
