#include "ipat/transfer.hpp"

#include <algorithm>
#include <set>

#include "ipat/error.hpp"
#include "ipat/io.hpp"
#include "ipat/rng.hpp"

namespace ipat::transfer {

namespace {

const std::string kEncoderPrefix = "encoder.";
const std::vector<std::string> kHeadPrefixes = {"decoder.", "ctc."};

bool has_stage(const ckpt::Checkpoint& c, std::string_view prefix) {
  return std::any_of(c.provenance.begin(), c.provenance.end(), [&](const std::string& p) {
    return p.compare(0, prefix.size(), prefix) == 0;
  });
}

void require_ipa_parent(const ckpt::Checkpoint& parent, std::string_view stage) {
  if (parent.vocab.kind() != phoneset::VocabKind::Ipa || has_stage(parent, "finetuned") ||
      has_stage(parent, "baseline") || !has_stage(parent, "pretrain_ipa")) {
    std::string chain;
    for (const auto& p : parent.provenance) chain += (chain.empty() ? "" : " > ") + p;
    fail(ErrorCode::WrongParentStage, std::string(stage) + " needs a pretrained IPA checkpoint, got [" +
                                          chain + "] with " +
                                          std::string(phoneset::vocab_kind_name(parent.vocab.kind())) +
                                          " vocabulary");
  }
}

std::vector<train::Example> concat(std::vector<train::Example> a, std::vector<train::Example> b) {
  a.insert(a.end(), std::make_move_iterator(b.begin()), std::make_move_iterator(b.end()));
  return a;
}

}  // namespace

std::string_view stage_name(Stage stage) {
  switch (stage) {
    case Stage::PretrainIpa: return "pretrain";
    case Stage::Adapt: return "adapt";
    case Stage::Finetune: return "finetune";
    case Stage::MonolingualBaseline: return "baseline";
  }
  return "unknown";
}

void StageConfig::validate() const {
  const std::string name(stage_name(stage));
  switch (stage) {
    case Stage::PretrainIpa:
      if (languages.empty()) fail(ErrorCode::ConfigError, "pretrain needs at least one language");
      break;
    case Stage::Adapt:
    case Stage::Finetune:
      if (!parent_checkpoint) fail(ErrorCode::StageOrderError, name + " needs a parent checkpoint");
      [[fallthrough]];
    case Stage::MonolingualBaseline:
      if (!target_language || target_language->empty()) {
        fail(ErrorCode::ConfigError, name + " needs exactly one target language");
      }
      if (languages.size() > 1) fail(ErrorCode::ConfigError, name + " takes a single language");
      break;
  }
  train.validate();
}

std::shared_ptr<const frontend::FeatureMatrix> features_of(const frontend::Utterance& utt) {
  if (utt.features) return utt.features;
  return std::make_shared<const frontend::FeatureMatrix>(frontend::load_features(utt));
}

std::vector<train::Example> ipa_examples(const frontend::Manifest& manifest,
                                         const phoneset::Vocabulary& vocab) {
  std::vector<train::Example> out;
  out.reserve(manifest.size());
  for (const auto& utt : manifest) {
    if (!utt.ipa) fail(ErrorCode::ParseError, "utterance " + utt.id + " has no ipa transcript");
    train::Example ex;
    ex.id = utt.id;
    ex.feats = features_of(utt);
    for (const auto& tok : phoneset::parse_ipa(*utt.ipa)) ex.target.push_back(vocab.id_or_unk(tok.text));
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<train::Example> bpe_examples(const frontend::Manifest& manifest,
                                         const bpe::BpeModel& bpe) {
  std::vector<train::Example> out;
  out.reserve(manifest.size());
  for (const auto& utt : manifest) {
    train::Example ex;
    ex.id = utt.id;
    ex.feats = features_of(utt);
    ex.target = bpe.encode(utt.text);
    out.push_back(std::move(ex));
  }
  return out;
}

phoneset::PhoneInventory manifest_inventory(const std::string& language,
                                            const frontend::Manifest& manifest) {
  std::vector<std::string> transcripts;
  for (const auto& utt : manifest) {
    if (!utt.ipa) fail(ErrorCode::ParseError, "utterance " + utt.id + " has no ipa transcript");
    transcripts.push_back(*utt.ipa);
  }
  return phoneset::build_inventory(language, transcripts);
}

phoneset::Vocabulary ipa_vocabulary(std::span<const LanguageCorpus> languages) {
  std::vector<phoneset::PhoneInventory> inventories;
  for (const auto& lang : languages) inventories.push_back(manifest_inventory(lang.language, lang.train));
  return phoneset::union_vocabulary(inventories);
}

std::uint64_t decoder_seed(std::uint64_t seed, const std::string& language) {
  return derive_seed(derive_seed(seed, "decoder"), language);
}

train::TrainResult pretrain_ipa(std::span<const LanguageCorpus> languages,
                                const model::ArchConfig& arch, const train::TrainConfig& config,
                                const train::MetricsSink& sink) {
  if (languages.empty()) fail(ErrorCode::ConfigError, "pretrain needs at least one language");
  ckpt::Checkpoint init;
  init.vocab = ipa_vocabulary(languages);
  init.arch = arch;
  init.arch.vocab_size_out = static_cast<int>(init.vocab.size());
  init.arch.vocab_size_ctc = static_cast<int>(init.vocab.size());
  init.params = model::init_params<float>(init.arch, derive_seed(config.seed, "init"));
  std::string names;
  for (const auto& l : languages) names += (names.empty() ? "" : "+") + l.language;
  init.provenance.push_back("pretrain_ipa:" + names);

  std::vector<train::Example> train_set;
  std::vector<train::Example> dev_set;
  for (const auto& l : languages) {
    train_set = concat(std::move(train_set), ipa_examples(l.train, init.vocab));
    dev_set = concat(std::move(dev_set), ipa_examples(l.dev, init.vocab));
  }
  return train::train_loop(init, train_set, dev_set, config, "pretrain", sink);
}

train::TrainResult adapt_ipa_model(const ckpt::Checkpoint& parent, const LanguageCorpus& target,
                                   const AdaptConfig& config, const train::MetricsSink& sink) {
  require_ipa_parent(parent, "adapt");
  std::set<std::string> missing;
  for (const auto* part : {&target.train, &target.dev}) {
    const auto inv = manifest_inventory(target.language, *part);
    for (const auto& tok : inv.tokens()) {
      if (!parent.vocab.find(tok.text)) missing.insert(tok.text);
    }
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : " ") + m;
    fail(ErrorCode::VocabMissingSymbols,
         target.language + " uses symbols absent from the parent vocabulary: " + list);
  }
  train::TrainConfig cfg = config.base;
  cfg.constant_lr = config.lr;
  cfg.epochs = config.epochs;
  cfg.average_last = 1;
  ckpt::Checkpoint init = parent;
  init.provenance.push_back("adapted:" + target.language);
  return train::train_loop(init, ipa_examples(target.train, parent.vocab),
                           ipa_examples(target.dev, parent.vocab), cfg, "adapt", sink);
}

ckpt::Checkpoint finetune_init(const ckpt::Checkpoint& parent, const phoneset::Vocabulary& vocab,
                               const std::string& language, std::uint64_t seed) {
  require_ipa_parent(parent, "finetune");
  ckpt::Checkpoint out;
  out.arch = parent.arch;
  out.arch.vocab_size_out = static_cast<int>(vocab.size());
  out.arch.vocab_size_ctc = static_cast<int>(vocab.size());
  out.vocab = vocab;
  out.provenance = parent.provenance;
  out.provenance.push_back("finetuned:" + language);
  out.metadata = parent.metadata;
  out.metadata.erase("averaged_epochs");
  model::init_subset(out.params, out.arch, decoder_seed(seed, language), kHeadPrefixes);
  for (const auto& [name, t] : parent.params) {
    if (name.compare(0, kEncoderPrefix.size(), kEncoderPrefix) == 0) out.params.emplace(name, t.clone());
  }
  model::Model<float> check(out.arch, out.params);
  return out;
}

train::TrainResult finetune_target(const ckpt::Checkpoint& parent, const LanguageCorpus& target,
                                   const bpe::BpeModel& bpe, const train::TrainConfig& config,
                                   const train::MetricsSink& sink) {
  const auto init = finetune_init(parent, bpe.vocab(), target.language, config.seed);
  return train::train_loop(init, bpe_examples(target.train, bpe), bpe_examples(target.dev, bpe),
                           config, "finetune", sink);
}

ckpt::Checkpoint baseline_init(const model::ArchConfig& arch, const phoneset::Vocabulary& vocab,
                               const std::string& language, std::uint64_t seed) {
  ckpt::Checkpoint out;
  out.arch = arch;
  out.arch.vocab_size_out = static_cast<int>(vocab.size());
  out.arch.vocab_size_ctc = static_cast<int>(vocab.size());
  out.vocab = vocab;
  out.provenance.push_back("baseline");
  out.params = model::init_params<float>(out.arch, derive_seed(seed, "init"));
  model::init_subset(out.params, out.arch, decoder_seed(seed, language), kHeadPrefixes);
  return out;
}

train::TrainResult train_monolingual_baseline(const LanguageCorpus& target,
                                              const bpe::BpeModel& bpe,
                                              const model::ArchConfig& arch,
                                              const train::TrainConfig& config,
                                              const train::MetricsSink& sink) {
  const auto init = baseline_init(arch, bpe.vocab(), target.language, config.seed);
  return train::train_loop(init, bpe_examples(target.train, bpe), bpe_examples(target.dev, bpe),
                           config, "baseline", sink);
}

StageOutputs stage_outputs(const std::filesystem::path& run_dir, Stage stage) {
  return StageOutputs{run_dir / std::string(stage_name(stage))};
}

void write_stage(const StageOutputs& out, const train::TrainResult& result,
                 const std::string& config_snapshot) {
  std::filesystem::create_directories(out.dir);
  ckpt::save_checkpoint(out.checkpoint(), result.final);
  result.final.vocab.save(out.vocab());
  std::string metrics;
  for (const auto& r : result.metrics) metrics += r.to_json() + "\n";
  io::write_file(out.metrics(), metrics);
  io::write_file(out.snapshot(), config_snapshot);
}

}  // namespace ipat::transfer
