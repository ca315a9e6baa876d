#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ipat::cli {

/// Options shared by the commands that work inside a run directory.
struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string run_dir;
};

struct SynthOptions {
  std::string out;
  std::uint64_t seed = 1;
  std::string size = "full";  // full | small
};

struct PrepareOptions {
  std::string manifest;
  std::string out;
  std::string feats_dir;
};

struct G2pOptions {
  Common common;
  std::string text;  // convert one string and print it instead
  std::string lexicon;
  std::string rules;
};

struct StageOptions {
  Common common;
  std::string stage;   // decode / score / embed / tsne: which checkpoint
  std::string parent = "auto";  // finetune: pretrain | adapt | auto
  std::string split = "test";
  std::string language;  // decode: defaults to data.target
};

struct ScoreOptions {
  Common common;
  std::string stage;
  std::string split = "test";
  std::string language;
  std::string ref;
  std::string hyp;
  std::string out;
  std::string unit;  // word | phone; defaults to score.unit or the stage's vocabulary
};

int run_synth(const SynthOptions& o);
int run_prepare(const PrepareOptions& o);
int run_g2p(const G2pOptions& o);
int run_bpe_train(const Common& o);
int run_train_ipa(const Common& o);
int run_adapt(const Common& o);
int run_finetune(const StageOptions& o);
int run_baseline(const Common& o);
int run_decode(const StageOptions& o);
int run_score(const ScoreOptions& o);
int run_embed(const StageOptions& o);
int run_tsne(const StageOptions& o);

}  // namespace ipat::cli
