#include "commands.hpp"

#include <cstdio>
#include <iostream>

#include "ipat/bpe.hpp"
#include "ipat/config.hpp"
#include "ipat/error.hpp"
#include "ipat/eval.hpp"
#include "ipat/g2p.hpp"
#include "ipat/io.hpp"
#include "ipat/synth.hpp"
#include "ipat/text.hpp"
#include "ipat/transfer.hpp"
#include "ipat/viz.hpp"
#include "run_dir.hpp"

namespace ipat::cli {

namespace fs = std::filesystem;
using transfer::Stage;

namespace {

struct Context {
  config::ExperimentConfig cfg;
  RunDir run;
};

Context open_run(const Common& c) {
  if (c.run_dir.empty()) fail(ErrorCode::ConfigError, "--run-dir is required");
  return {load_config(c.config, c.sets), RunDir{c.run_dir}};
}

std::string data_key(const std::string& lang, const std::string& what) {
  return "data." + lang + "." + what;
}

std::string target_language(const config::ExperimentConfig& cfg) {
  return cfg.get("data.target");
}

fs::path existing_path(const config::ExperimentConfig& cfg, const std::string& key) {
  const fs::path p = cfg.get_path(key);
  if (!fs::exists(p)) fail(ErrorCode::IoError, key + " = " + p.string() + " does not exist");
  return p;
}

frontend::Manifest load_split(const config::ExperimentConfig& cfg, const std::string& lang,
                              const std::string& split) {
  return frontend::load_manifest(existing_path(cfg, data_key(lang, split)));
}

frontend::Manifest load_g2p_split(const RunDir& run, const std::string& lang, const std::string& split) {
  const fs::path p = run.g2p_manifest(lang, split);
  require_stage_output(p, "IPA manifest for " + lang + "/" + split, "ipat g2p");
  return frontend::load_manifest(p);
}

int feature_dim(const frontend::Manifest& m) {
  if (m.empty()) fail(ErrorCode::InsufficientData, "training manifest is empty");
  return static_cast<int>(transfer::features_of(m.front())->num_bins);
}

train::MetricsSink progress(const std::string& stage) {
  return [stage](const train::MetricRecord& r) {
    if (!r.dev_loss) return;
    std::fprintf(stderr, "%s: epoch %d step %lld lr %.3g loss %.4f dev %.4f\n", stage.c_str(), r.epoch,
                 static_cast<long long>(r.step), r.lr, r.loss_joint, *r.dev_loss);
  };
}

std::string stage_snapshot(const config::ExperimentConfig& cfg, Stage stage, const std::string& parent = {}) {
  std::string s = cfg.snapshot() + "# stage = " + std::string(transfer::stage_name(stage)) + "\n";
  if (!parent.empty()) s += "# parent = " + parent + "\n";
  return s;
}

void finish_stage(const RunDir& run, Stage stage, train::TrainResult& result, const std::string& snapshot) {
  result.final.metadata["config_hash"] = std::to_string(text::fnv1a(snapshot));
  const auto out = run.stage(stage);
  transfer::write_stage(out, result, snapshot);
  std::fprintf(stderr, "%s: wrote %s (%lld steps, %zu skipped)\n",
               std::string(transfer::stage_name(stage)).c_str(), out.checkpoint().c_str(),
               static_cast<long long>(result.steps), result.skipped);
}

bpe::BpeModel load_bpe(const RunDir& run) {
  require_stage_output(run.bpe_merges(), "BPE model", "ipat bpe-train");
  return bpe::BpeModel::load(run.bpe_merges(), run.bpe_vocab());
}

ckpt::Checkpoint load_stage(const RunDir& run, Stage stage) {
  const std::string name(transfer::stage_name(stage));
  const std::string producer = stage == Stage::PretrainIpa ? "ipat train-ipa" : "ipat " + name;
  const auto path = run.stage(stage).checkpoint();
  require_stage_output(path, name + " checkpoint", producer);
  return ckpt::load_checkpoint(path);
}

g2p::OovPolicy oov_policy(const std::string& s) {
  if (s == "rules") return g2p::OovPolicy::Rules;
  if (s == "error") return g2p::OovPolicy::Error;
  if (s == "skip") return g2p::OovPolicy::Skip;
  fail(ErrorCode::ConfigError, "g2p.oov must be rules, error or skip, got '" + s + "'");
}

std::string ipa_text(const phoneset::Vocabulary& vocab, std::span<const int> ids) {
  std::string s;
  for (int id : ids) {
    if (id >= phoneset::Vocabulary::kNumSpecials) s += vocab.token(id);
  }
  return s;
}

eval::Unit parse_unit(const std::string& s) {
  if (s == "word") return eval::Unit::Word;
  if (s == "phone") return eval::Unit::Phone;
  fail(ErrorCode::ConfigError, "unit must be word or phone, got '" + s + "'");
}

std::string synth_config_text(const synth::SynthConfig& sc, bool small) {
  std::string s = "# synthetic " + std::string(small ? "small" : "full") + " three-language experiment\n";
  s += "seed = " + std::to_string(sc.seed) + "\n";
  std::string langs;
  for (const auto& l : sc.languages) langs += (langs.empty() ? "" : ",") + l.code;
  s += "data.languages = " + langs + "\n";
  s += "data.target = " + sc.languages.back().code + "\n";
  for (const auto& l : sc.languages) {
    for (const char* split : {"train", "dev", "test"}) {
      s += "data." + l.code + "." + split + " = " + l.code + "." + split + ".jsonl\n";
    }
    s += "data." + l.code + ".lexicon = " + l.code + ".lexicon.tsv\n";
    s += "data." + l.code + ".rules = " + l.code + ".rules.tsv\n";
  }
  // Desk-scale schedule for a corpus of a few thousand short utterances.
  s += "bpe.size = 60\n";
  s += "train.pretrain.epochs = 10\n";
  s += "train.pretrain.batch_frames = 3000\n";
  s += "train.pretrain.warmup_steps = 200\n";
  s += "train.pretrain.average_last = 3\n";
  s += "train.adapt.batch_frames = 500\n";
  for (const char* st : {"finetune", "baseline"}) {
    const std::string p = std::string("train.") + st + ".";
    s += p + "epochs = 100\n";
    s += p + "batch_frames = 500\n";
    s += p + "warmup_steps = 100\n";
    s += p + "average_last = 10\n";
  }
  s += "embed.frames_per_lang = " + std::string(small ? "40" : "200") + "\n";
  return s;
}

}  // namespace

int run_synth(const SynthOptions& o) {
  if (o.out.empty()) fail(ErrorCode::ConfigError, "--out is required");
  if (o.size != "full" && o.size != "small") fail(ErrorCode::ConfigError, "--size must be full or small");
  const bool small = o.size == "small";
  const auto sc = small ? synth::small_three_language_config(o.seed) : synth::three_language_config(o.seed);
  const auto corpus = synth::generate(sc);
  synth::write_corpus(corpus, o.out);
  io::write_file(fs::path(o.out) / "experiment.cfg", synth_config_text(sc, small));
  std::fprintf(stderr, "synth: wrote %s (config %s)\n", o.out.c_str(),
               (fs::path(o.out) / "experiment.cfg").c_str());
  return 0;
}

int run_prepare(const PrepareOptions& o) {
  if (o.manifest.empty() || o.out.empty()) fail(ErrorCode::ConfigError, "--manifest and --out are required");
  auto m = frontend::load_manifest(o.manifest);
  const fs::path feats_dir = o.feats_dir.empty() ? fs::path(o.out).parent_path() / "feats" : fs::path(o.feats_dir);
  fs::create_directories(feats_dir);
  for (auto& utt : m) {
    const auto feats = frontend::load_features(utt);
    utt.feats = feats_dir / (utt.id + ".feat");
    frontend::write_features(utt.feats, feats);
    utt.duration_s = static_cast<double>(feats.num_frames) * feats.frame_shift_ms / 1000.0;
  }
  frontend::save_manifest(o.out, m);
  std::fprintf(stderr, "prepare: %zu utterances -> %s\n", m.size(), o.out.c_str());
  return 0;
}

int run_g2p(const G2pOptions& o) {
  if (!o.text.empty()) {
    const g2p::Lexicon lex = o.lexicon.empty() ? g2p::Lexicon() : g2p::load_lexicon(o.lexicon);
    const g2p::RuleSet rules = o.rules.empty() ? g2p::RuleSet() : g2p::load_rules(o.rules);
    std::cout << g2p::convert(o.text, lex, rules) << "\n";
    return 0;
  }
  auto [cfg, run] = open_run(o.common);
  const auto policy = oov_policy(cfg.get("g2p.oov"));
  const auto langs = all_languages(cfg);
  if (langs.empty()) fail(ErrorCode::ConfigError, "data.languages and data.target are empty");
  // Validate every input before writing anything.
  for (const auto& lang : langs) {
    for (const char* split : {"train", "dev"}) existing_path(cfg, data_key(lang, split));
    if (cfg.has(data_key(lang, "lexicon"))) existing_path(cfg, data_key(lang, "lexicon"));
    if (cfg.has(data_key(lang, "rules"))) existing_path(cfg, data_key(lang, "rules"));
  }
  RunLock lock(run.root);
  for (const auto& lang : langs) {
    const g2p::Lexicon lex = cfg.has(data_key(lang, "lexicon"))
                                 ? g2p::load_lexicon(cfg.get_path(data_key(lang, "lexicon")), lang)
                                 : g2p::Lexicon(lang);
    const g2p::RuleSet rules = cfg.has(data_key(lang, "rules"))
                                   ? g2p::load_rules(cfg.get_path(data_key(lang, "rules")))
                                   : g2p::RuleSet();
    for (const char* split : {"train", "dev", "test"}) {
      if (!cfg.has(data_key(lang, split))) continue;
      auto m = load_split(cfg, lang, split);
      for (auto& utt : m) utt.ipa = g2p::convert(utt.text, lex, rules, policy);
      const auto out = run.g2p_manifest(lang, split);
      fs::create_directories(out.parent_path());
      frontend::save_manifest(out, m);
    }
    std::fprintf(stderr, "g2p: %s done\n", lang.c_str());
  }
  io::write_file(run.root / "g2p" / "config.snapshot", cfg.snapshot());
  return 0;
}

int run_bpe_train(const Common& o) {
  auto [cfg, run] = open_run(o);
  const auto target = target_language(cfg);
  const auto m = load_split(cfg, target, "train");
  const auto size = cfg.get_int("bpe.size");
  if (size <= phoneset::Vocabulary::kNumSpecials) fail(ErrorCode::ConfigError, "bpe.size is too small");
  RunLock lock(run.root);
  std::vector<std::string> texts;
  for (const auto& u : m) texts.push_back(u.text);
  const auto model = bpe::train_bpe(texts, static_cast<std::size_t>(size));
  fs::create_directories(run.bpe_merges().parent_path());
  model.save(run.bpe_merges(), run.bpe_vocab());
  io::write_file(run.root / "bpe" / "config.snapshot", cfg.snapshot());
  std::fprintf(stderr, "bpe-train: %zu merges, %zu tokens\n", model.merges().size(), model.vocab().size());
  return 0;
}

int run_train_ipa(const Common& o) {
  auto [cfg, run] = open_run(o);
  const auto langs = cfg.get_list("data.languages");
  transfer::StageConfig sc{Stage::PretrainIpa, langs, std::nullopt, cfg.train("pretrain"), std::nullopt};
  sc.validate();
  std::vector<transfer::LanguageCorpus> corpora;
  for (const auto& lang : langs) {
    corpora.push_back({lang, load_g2p_split(run, lang, "train"), load_g2p_split(run, lang, "dev")});
  }
  const auto arch = cfg.arch(feature_dim(corpora.front().train), phoneset::Vocabulary::kNumSpecials + 1);
  RunLock lock(run.root);
  auto result = transfer::pretrain_ipa(corpora, arch, sc.train, progress("pretrain"));
  finish_stage(run, Stage::PretrainIpa, result, stage_snapshot(cfg, Stage::PretrainIpa));
  return 0;
}

int run_adapt(const Common& o) {
  auto [cfg, run] = open_run(o);
  const auto target = target_language(cfg);
  const auto parent_path = run.stage(Stage::PretrainIpa).checkpoint();
  transfer::StageConfig sc{Stage::Adapt, {target},
                           fs::exists(parent_path) ? std::optional<fs::path>(parent_path) : std::nullopt,
                           cfg.train("adapt"), target};
  sc.validate();
  const auto ac = cfg.adapt();
  transfer::LanguageCorpus corpus{target, load_g2p_split(run, target, "train"), load_g2p_split(run, target, "dev")};
  const auto parent = ckpt::load_checkpoint(parent_path);
  RunLock lock(run.root);
  auto result = transfer::adapt_ipa_model(parent, corpus, ac, progress("adapt"));
  finish_stage(run, Stage::Adapt, result, stage_snapshot(cfg, Stage::Adapt, "pretrain"));
  return 0;
}

int run_finetune(const StageOptions& o) {
  auto [cfg, run] = open_run(o.common);
  const auto target = target_language(cfg);
  std::string parent_name = o.parent;
  if (parent_name == "auto") {
    parent_name = fs::exists(run.stage(Stage::Adapt).checkpoint()) ? "adapt" : "pretrain";
  }
  if (parent_name != "adapt" && parent_name != "pretrain") {
    fail(ErrorCode::ConfigError, "--parent must be pretrain, adapt or auto");
  }
  const auto parent_path = run.stage(parse_stage(parent_name)).checkpoint();
  transfer::StageConfig sc{Stage::Finetune, {target},
                           fs::exists(parent_path) ? std::optional<fs::path>(parent_path) : std::nullopt,
                           cfg.train("finetune"), target};
  sc.validate();
  const auto bpe = load_bpe(run);
  transfer::LanguageCorpus corpus{target, load_split(cfg, target, "train"), load_split(cfg, target, "dev")};
  const auto parent = ckpt::load_checkpoint(parent_path);
  RunLock lock(run.root);
  auto result = transfer::finetune_target(parent, corpus, bpe, sc.train, progress("finetune"));
  result.final.metadata["parent"] = parent_name;
  finish_stage(run, Stage::Finetune, result, stage_snapshot(cfg, Stage::Finetune, parent_name));
  return 0;
}

int run_baseline(const Common& o) {
  auto [cfg, run] = open_run(o);
  const auto target = target_language(cfg);
  transfer::StageConfig sc{Stage::MonolingualBaseline, {target}, std::nullopt, cfg.train("baseline"), target};
  sc.validate();
  const auto bpe = load_bpe(run);
  transfer::LanguageCorpus corpus{target, load_split(cfg, target, "train"), load_split(cfg, target, "dev")};
  const auto arch = cfg.arch(feature_dim(corpus.train), static_cast<int>(bpe.vocab().size()));
  RunLock lock(run.root);
  auto result = transfer::train_monolingual_baseline(corpus, bpe, arch, sc.train, progress("baseline"));
  finish_stage(run, Stage::MonolingualBaseline, result, stage_snapshot(cfg, Stage::MonolingualBaseline));
  return 0;
}

int run_decode(const StageOptions& o) {
  auto [cfg, run] = open_run(o.common);
  const Stage stage = parse_stage(o.stage);
  const std::string lang = o.language.empty() ? target_language(cfg) : o.language;
  const auto options = cfg.decode();
  const auto ck = load_stage(run, stage);
  const auto m = load_split(cfg, lang, o.split);
  eval::Detokenizer detok;
  std::optional<bpe::BpeModel> bpe;
  if (ck.vocab.kind() == phoneset::VocabKind::Bpe) {
    bpe = load_bpe(run);
    if (!bpe->vocab().same_entries(ck.vocab)) {
      fail(ErrorCode::ConfigError, "run BPE model does not match the " + o.stage + " checkpoint vocabulary");
    }
    detok = [&](std::span<const int> ids) { return bpe->decode(ids); };
  } else {
    detok = [&](std::span<const int> ids) { return ipa_text(ck.vocab, ids); };
  }
  RunLock lock(run.root);
  const model::Model<float> net(ck.arch, ck.params);
  std::vector<eval::TextRecord> hyps;
  for (const auto& utt : m) {
    const auto feats = transfer::features_of(utt);
    const auto h = eval::decode_utterance(net, *feats, options, detok);
    hyps.push_back({utt.id, h.text, h.score});
  }
  const auto out = run.hypotheses(o.stage, lang, o.split);
  fs::create_directories(out.parent_path());
  eval::save_hypotheses(out, hyps);
  std::fprintf(stderr, "decode: %zu hypotheses -> %s\n", hyps.size(), out.c_str());
  return 0;
}

int run_score(const ScoreOptions& o) {
  auto cfg = load_config(o.common.config, o.common.sets);
  std::vector<eval::TextRecord> refs;
  std::vector<eval::TextRecord> hyps;
  eval::Unit unit = eval::Unit::Word;
  fs::path out = o.out;
  if (!o.ref.empty() || !o.hyp.empty()) {
    if (o.ref.empty() || o.hyp.empty()) fail(ErrorCode::ConfigError, "--ref and --hyp go together");
    refs = eval::load_hypotheses(o.ref);
    hyps = eval::load_hypotheses(o.hyp);
    unit = parse_unit(o.unit.empty() ? cfg.get("score.unit") : o.unit);
  } else {
    if (o.common.run_dir.empty() || o.stage.empty()) {
      fail(ErrorCode::ConfigError, "give --ref/--hyp, or --run-dir with --stage");
    }
    const RunDir run{o.common.run_dir};
    const Stage stage = parse_stage(o.stage);
    const std::string lang = o.language.empty() ? target_language(cfg) : o.language;
    const auto hyp_path = run.hypotheses(o.stage, lang, o.split);
    require_stage_output(hyp_path, o.stage + " hypotheses", "ipat decode");
    hyps = eval::load_hypotheses(hyp_path);
    const bool ipa = stage == Stage::PretrainIpa || stage == Stage::Adapt;
    unit = o.unit.empty() ? (ipa ? eval::Unit::Phone : eval::Unit::Word) : parse_unit(o.unit);
    const auto m = ipa ? load_g2p_split(run, lang, o.split) : load_split(cfg, lang, o.split);
    for (const auto& u : m) {
      if (unit == eval::Unit::Phone && !u.ipa) fail(ErrorCode::ParseError, "utterance " + u.id + " has no ipa");
      refs.push_back({u.id, unit == eval::Unit::Phone ? *u.ipa : u.text, 0.0});
    }
    if (out.empty()) out = run.report(o.stage, lang, o.split);
  }
  const auto report = eval::score_corpus(refs, hyps, unit);
  if (!out.empty()) {
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    io::write_file(out, report.to_json());
  }
  std::printf("%s %.6f S=%lld I=%lld D=%lld N=%lld\n", unit == eval::Unit::Word ? "WER" : "PER",
              report.error_rate, static_cast<long long>(report.counts.sub),
              static_cast<long long>(report.counts.ins), static_cast<long long>(report.counts.del),
              static_cast<long long>(report.ref_tokens));
  return 0;
}

int run_embed(const StageOptions& o) {
  auto [cfg, run] = open_run(o.common);
  const std::string stage_name = o.stage.empty() ? "pretrain" : o.stage;
  const Stage stage = parse_stage(stage_name);
  const auto ck = load_stage(run, stage);
  viz::LanguageManifests manifests;
  for (const auto& lang : all_languages(cfg)) manifests[lang] = load_split(cfg, lang, o.split);
  const auto n = static_cast<int>(cfg.get_int("embed.frames_per_lang"));
  RunLock lock(run.root);
  const auto set = viz::extract_frame_embeddings(ck, manifests, n, cfg.get_u64("embed.seed"));
  const auto out = run.embeddings(stage_name);
  fs::create_directories(out.parent_path());
  viz::save_embeddings(out, set);
  std::fprintf(stderr, "embed: %zu frames x %d -> %s\n", set.size(), set.dim, out.c_str());
  return 0;
}

int run_tsne(const StageOptions& o) {
  auto [cfg, run] = open_run(o.common);
  const std::string stage_name = o.stage.empty() ? "pretrain" : o.stage;
  parse_stage(stage_name);
  const auto path = run.embeddings(stage_name);
  require_stage_output(path, stage_name + " embeddings", "ipat embed");
  const auto set = viz::load_embeddings(path);
  const auto tc = cfg.tsne();
  const auto result = viz::tsne(set.data, set.size(), set.dim, tc);
  std::vector<std::string> langs;
  for (const auto& r : set.rows) {
    if (std::find(langs.begin(), langs.end(), r.language) == langs.end()) langs.push_back(r.language);
  }
  const std::string comment = tc.describe() + " frames_per_lang=" + std::to_string(set.size() / std::max<std::size_t>(1, langs.size())) +
                              " frame_seed=" + std::to_string(set.seed) + " checkpoint=" + stage_name;
  fs::create_directories(run.scatter(stage_name, "csv").parent_path());
  viz::emit_scatter(result.points, set.rows, langs, comment, run.scatter(stage_name, "csv"),
                    run.scatter(stage_name, "svg"));
  std::vector<std::string> labels;
  for (const auto& r : set.rows) labels.push_back(r.language);
  const double purity = set.size() > 10 ? viz::knn_purity(result.points, labels, 10) : 0.0;
  std::printf("tsne: n=%zu kl_exaggeration_end=%.6f kl_final=%.6f knn10_language_purity=%.4f\n", set.size(),
              result.kl_exaggeration_end, result.kl_final, purity);
  return 0;
}

}  // namespace ipat::cli
