#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ipat/bpe.hpp"
#include "ipat/checkpoint.hpp"
#include "ipat/manifest.hpp"
#include "ipat/training.hpp"

namespace ipat::transfer {

enum class Stage { PretrainIpa, Adapt, Finetune, MonolingualBaseline };

/// Directory / provenance names: pretrain, adapt, finetune, baseline.
std::string_view stage_name(Stage stage);

struct StageConfig {
  Stage stage = Stage::PretrainIpa;
  std::vector<std::string> languages;
  std::optional<std::filesystem::path> parent_checkpoint;
  train::TrainConfig train;
  std::optional<std::string> target_language;

  /// Throws StageOrderError for a missing parent, ConfigError otherwise.
  void validate() const;
};

/// One language's training and development partitions.
struct LanguageCorpus {
  std::string language;
  frontend::Manifest train;
  frontend::Manifest dev;
};

/// Per-utterance features shared with the manifest when already in memory.
std::shared_ptr<const frontend::FeatureMatrix> features_of(const frontend::Utterance& utt);

/// IPA targets from each utterance's `ipa` field (missing -> ParseError).
std::vector<train::Example> ipa_examples(const frontend::Manifest& manifest,
                                         const phoneset::Vocabulary& vocab);
/// Orthographic BPE targets from each utterance's `text`.
std::vector<train::Example> bpe_examples(const frontend::Manifest& manifest,
                                         const bpe::BpeModel& bpe);

/// Inventory of the IPA tokens in a manifest's transcripts.
phoneset::PhoneInventory manifest_inventory(const std::string& language,
                                            const frontend::Manifest& manifest);
/// Union vocabulary over the training partitions of `languages`.
phoneset::Vocabulary ipa_vocabulary(std::span<const LanguageCorpus> languages);

/// Seed for the reinitialized decoder and output heads of a target language.
std::uint64_t decoder_seed(std::uint64_t seed, const std::string& language);

/// Multilingual IPA model on the pooled corpus with the union vocabulary.
/// `arch` supplies everything but the vocabulary sizes.
train::TrainResult pretrain_ipa(std::span<const LanguageCorpus> languages,
                                const model::ArchConfig& arch, const train::TrainConfig& config,
                                const train::MetricsSink& sink = {});

struct AdaptConfig {
  double lr = 5e-5;
  int epochs = 2;
  train::TrainConfig base;  // seed, batch budget, loss weights
};

/// Retrains every parameter on one language's IPA data at a constant rate
/// with fresh optimizer state. The vocabulary and architecture are kept.
/// Throws WrongParentStage and VocabMissingSymbols.
train::TrainResult adapt_ipa_model(const ckpt::Checkpoint& parent, const LanguageCorpus& target,
                                   const AdaptConfig& config, const train::MetricsSink& sink = {});

/// Step-0 finetuning model: encoder copied bit-for-bit from `parent`,
/// decoder and both heads freshly initialized over `vocab`.
ckpt::Checkpoint finetune_init(const ckpt::Checkpoint& parent, const phoneset::Vocabulary& vocab,
                               const std::string& language, std::uint64_t seed);

train::TrainResult finetune_target(const ckpt::Checkpoint& parent, const LanguageCorpus& target,
                                   const bpe::BpeModel& bpe, const train::TrainConfig& config,
                                   const train::MetricsSink& sink = {});

/// Same architecture and recipe as finetune_target with a random encoder.
/// The decoder draws from the same seed finetune_target uses.
ckpt::Checkpoint baseline_init(const model::ArchConfig& arch, const phoneset::Vocabulary& vocab,
                               const std::string& language, std::uint64_t seed);
train::TrainResult train_monolingual_baseline(const LanguageCorpus& target,
                                              const bpe::BpeModel& bpe,
                                              const model::ArchConfig& arch,
                                              const train::TrainConfig& config,
                                              const train::MetricsSink& sink = {});

/// runs/<name>/<stage>/{checkpoint.bin, vocab.txt, metrics.jsonl, config.snapshot}.
struct StageOutputs {
  std::filesystem::path dir;
  std::filesystem::path checkpoint() const { return dir / "checkpoint.bin"; }
  std::filesystem::path vocab() const { return dir / "vocab.txt"; }
  std::filesystem::path metrics() const { return dir / "metrics.jsonl"; }
  std::filesystem::path snapshot() const { return dir / "config.snapshot"; }
};
StageOutputs stage_outputs(const std::filesystem::path& run_dir, Stage stage);
void write_stage(const StageOutputs& out, const train::TrainResult& result,
                 const std::string& config_snapshot);

}  // namespace ipat::transfer
