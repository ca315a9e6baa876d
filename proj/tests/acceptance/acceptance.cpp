// Runs the ten acceptance criteria and prints one PASS/FAIL line for each.
//   ipat_acceptance [--criterion N]... [--work DIR] [--cli PATH]
#include <CLI11.hpp>
#include <json.hpp>

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "ipat/bpe.hpp"
#include "ipat/checkpoint.hpp"
#include "ipat/config.hpp"
#include "ipat/error.hpp"
#include "ipat/eval.hpp"
#include "ipat/io.hpp"
#include "ipat/phoneset.hpp"
#include "ipat/synth.hpp"
#include "ipat/transfer.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace ipat;

namespace {

// Pinned tolerances.
constexpr double kCtcLossAbs = 1e-10;
constexpr double kGradRel = 1e-4;
constexpr double kCtcSeconds = 10.0;
constexpr double kAutodiffSeconds = 60.0;
constexpr int kShapesPerOp = 5;
constexpr std::size_t kPropertyTrials = 1000;
constexpr double kPurity = 0.9;
constexpr int kPurityK = 10;
constexpr double kReplicationSeconds = 30.0 * 60.0;
constexpr int kSeeds = 5;
constexpr int kFinetuneWins = 4;
constexpr int kAdaptWins = 3;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  fs::path work;
  std::string cli;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string join_failures(const std::vector<std::string>& f, std::size_t max = 5) {
  std::string s;
  for (std::size_t i = 0; i < f.size() && i < max; ++i) s += (i ? "; " : "") + f[i];
  if (f.size() > max) s += fmt("; ... %zu more", f.size() - max);
  return s;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- 1 ------------------------------------------------------------------------

Outcome ctc_oracle(const Context&) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto s = testing::ctc_exhaustive_sweep(5, 3, 4, 1);
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = s.cases > 0 && s.wrongly_accepted == 0 && s.max_loss_abs_err <= kCtcLossAbs &&
           s.max_grad_rel_err <= kGradRel && secs < kCtcSeconds;
  o.detail = fmt("%zu cases, %zu rejected (2L+1>T), loss err %.2e, grad rel err %.2e, %.2fs", s.cases, s.rejected,
                 s.max_loss_abs_err, s.max_grad_rel_err, secs);
  return o;
}

// ---- 2 ------------------------------------------------------------------------

Outcome autodiff_suite(const Context&) {
  const auto t0 = std::chrono::steady_clock::now();
  auto checks = testing::primitive_grad_checks(1);
  const auto composites = testing::composite_grad_checks(2);
  checks.insert(checks.end(), composites.begin(), composites.end());
  const double secs = seconds_since(t0);

  std::map<std::string, int> shapes;
  double worst = 0.0;
  std::string worst_name;
  std::vector<std::string> failures;
  for (const auto& c : checks) {
    ++shapes[c.name];
    if (c.max_rel_err > worst) {
      worst = c.max_rel_err;
      worst_name = c.name;
    }
    if (!(c.max_rel_err <= kGradRel) || c.coords == 0) failures.push_back(c.name + " " + c.shape);
  }
  for (const auto& op : testing::kDifferentiableOps) {
    if (shapes[op] < kShapesPerOp) failures.push_back(op + fmt(" has %d shapes", shapes[op]));
  }
  if (secs >= kAutodiffSeconds) failures.push_back(fmt("took %.1fs", secs));
  Outcome o;
  o.pass = failures.empty();
  o.detail = fmt("%zu checks over %zu ops, worst rel err %.2e (%s), %.1fs", checks.size(), shapes.size(), worst,
                 worst_name.c_str(), secs);
  if (!failures.empty()) o.detail += ": " + join_failures(failures);
  return o;
}

// ---- 3 ------------------------------------------------------------------------

Outcome ipa_parsing(const Context&) {
  std::vector<std::string> failures;
  const auto toks = phoneset::parse_ipa("aː");
  const bool example = toks.size() == 2 && toks[0].text == "a" && toks[0].kind == phoneset::TokenKind::Base &&
                       toks[1].text == "ː" && toks[1].kind == phoneset::TokenKind::Modifier;
  if (!example) failures.push_back("aː does not split into [a] [ː]");
  const auto fixture = testing::run_ipa_fixture(testing::kFixtureDir / "ipa_cases.tsv");
  if (fixture.cases < 50) failures.push_back(fmt("fixture has %zu cases", fixture.cases));
  failures.insert(failures.end(), fixture.failures.begin(), fixture.failures.end());
  const auto rt = testing::ipa_roundtrip_property(kPropertyTrials, 3);
  if (rt.cases != kPropertyTrials) failures.push_back(fmt("round trip ran %zu strings", rt.cases));
  failures.insert(failures.end(), rt.failures.begin(), rt.failures.end());
  Outcome o;
  o.pass = failures.empty();
  o.detail = fmt("example ok=%d, fixture %zu cases, round trip %zu strings", example, fixture.cases, rt.cases);
  if (!failures.empty()) o.detail += ": " + join_failures(failures);
  return o;
}

// ---- 4 ------------------------------------------------------------------------

Outcome vocabulary_union(const Context&) {
  const auto u = testing::union_properties(kPropertyTrials, 4);
  Outcome o;
  o.pass = u.trials == kPropertyTrials && u.order_failures == 0 && u.idempotence_failures == 0 &&
           u.monotonicity_failures == 0 && u.count_failures == 0;
  o.detail = fmt("%zu trials; failures: order %zu, idempotence %zu, monotonicity %zu, size %zu", u.trials,
                 u.order_failures, u.idempotence_failures, u.monotonicity_failures, u.count_failures);
  return o;
}

// ---- 5 ------------------------------------------------------------------------

Outcome bpe_checks(const Context&) {
  const auto traces = testing::bpe_hand_traces();
  const auto det = testing::bpe_determinism(5);
  const auto rt = testing::bpe_roundtrip_property(kPropertyTrials, 5);
  std::vector<std::string> failures = traces.failures;
  failures.insert(failures.end(), det.failures.begin(), det.failures.end());
  failures.insert(failures.end(), rt.failures.begin(), rt.failures.end());
  if (rt.cases != kPropertyTrials) failures.push_back(fmt("round trip ran %zu strings", rt.cases));
  Outcome o;
  o.pass = failures.empty() && traces.cases > 0 && det.cases > 0;
  o.detail = fmt("hand traces %zu, determinism %zu, round trip %zu strings", traces.cases, det.cases, rt.cases);
  if (!failures.empty()) o.detail += ": " + join_failures(failures);
  return o;
}

// ---- 6 ------------------------------------------------------------------------

Outcome transfer_contract(const Context&) {
  const auto fixture = testing::make_contract_fixture(6);
  const auto r = testing::transfer_contract(fixture);
  Outcome o;
  o.pass = r.failures.empty() && r.cases > 0;
  o.detail = fmt("%zu exact assertions", r.cases);
  if (!r.failures.empty()) o.detail += ": " + join_failures(r.failures);
  return o;
}

// ---- CLI helpers ----------------------------------------------------------------

int run_cli(const Context& ctx, const std::string& args, const fs::path& log) {
  const std::string cmd = ctx.cli + " " + args + " >> " + log.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

// ---- 7 ------------------------------------------------------------------------

Outcome recipe_constants(const Context& ctx) {
  // Small corpus with nothing but its data paths: every training value comes
  // from the defaults.
  const fs::path dir = ctx.work / "recipe";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path log = dir / "log.txt";
  std::vector<std::string> failures;
  if (run_cli(ctx, "synth --size small --seed 7 --out " + (dir / "data").string(), log) != 0) {
    return {false, "synth failed, see " + log.string()};
  }
  std::string cfg;
  for (const auto& [k, v] : config::parse_pairs(io::read_file(dir / "data" / "experiment.cfg"))) {
    if (k.rfind("data.", 0) == 0) cfg += k + " = " + v + "\n";
  }
  io::write_file(dir / "data" / "recipe.cfg", cfg);
  const std::string common = "--config " + (dir / "data" / "recipe.cfg").string() + " --run-dir " + (dir / "run").string();
  for (const char* cmd : {"g2p", "train-ipa", "adapt"}) {
    if (run_cli(ctx, std::string(cmd) + " " + common, log) != 0) return {false, std::string(cmd) + " failed, see " + log.string()};
  }

  const auto pre = transfer::stage_outputs(dir / "run", transfer::Stage::PretrainIpa);
  const auto ad = transfer::stage_outputs(dir / "run", transfer::Stage::Adapt);
  const auto want = [&](const std::map<std::string, std::string>& snap, const std::string& key, double value) {
    const auto it = snap.find(key);
    if (it == snap.end() || std::stod(it->second) != value) {
      failures.push_back(key + " = " + (it == snap.end() ? "<missing>" : it->second));
    }
  };
  for (const auto& path : {pre.snapshot(), ad.snapshot()}) {
    const auto snap = config::parse_pairs(io::read_file(path));
    want(snap, "train.ctc_weight", 0.1);
    want(snap, "train.peak_lr", 1e-3);
    want(snap, "train.warmup_steps", 2000);
    want(snap, "train.epochs", 60);
    want(snap, "train.average_last", 10);
    want(snap, "adapt.lr", 5e-5);
    want(snap, "adapt.epochs", 2);
  }

  // The snapshots are honoured, not just recorded.
  const auto pre_ckpt = ckpt::load_checkpoint(pre.checkpoint());
  if (pre_ckpt.metadata.at("averaged_epochs") != "51,52,53,54,55,56,57,58,59,60") {
    failures.push_back("pretrain averaged epochs " + pre_ckpt.metadata.at("averaged_epochs"));
  }
  std::set<int> pre_epochs;
  double peak = 0.0;
  for (const auto& line : io::split_lines(io::read_file(pre.metrics()))) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    pre_epochs.insert(j.at("epoch").get<int>());
    peak = std::max(peak, j.at("lr").get<double>());
  }
  if (pre_epochs.size() != 60 || *pre_epochs.rbegin() != 60) failures.push_back(fmt("pretrain ran %zu epochs", pre_epochs.size()));
  // The warmup schedule never passes the peak rate.
  if (peak > 1e-3 * (1 + 1e-12)) failures.push_back(fmt("pretrain lr reached %g", peak));

  std::set<int> ad_epochs;
  std::set<double> ad_lrs;
  for (const auto& line : io::split_lines(io::read_file(ad.metrics()))) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    ad_epochs.insert(j.at("epoch").get<int>());
    ad_lrs.insert(j.at("lr").get<double>());
  }
  if (ad_epochs != std::set<int>{1, 2}) failures.push_back(fmt("adapt ran %zu epochs", ad_epochs.size()));
  if (ad_lrs != std::set<double>{5e-5}) failures.push_back("adapt lr not constant 5e-05");
  const auto ad_ckpt = ckpt::load_checkpoint(ad.checkpoint());
  if (ad_ckpt.metadata.at("epochs") != "2") failures.push_back("adapt checkpoint epochs " + ad_ckpt.metadata.at("epochs"));

  Outcome o;
  o.pass = failures.empty();
  o.detail = "lambda 0.1, lr 1e-3, warmup 2000, adapt 5e-5 x 2 epochs, average last 10 of 60";
  if (!failures.empty()) o.detail += ": " + join_failures(failures);
  return o;
}

// ---- 8 ------------------------------------------------------------------------

double word_error_rate(const ckpt::Checkpoint& c, const frontend::Manifest& test, const bpe::BpeModel& bpe) {
  const model::Model<float> m(c.arch, c.params);
  const eval::DecodeOptions opts;  // attention, beam 10
  std::vector<eval::TextRecord> refs, hyps;
  for (const auto& u : test) {
    const auto h = eval::decode_utterance(m, *u.features, opts, [&](std::span<const int> ids) { return bpe.decode(ids); });
    refs.push_back({u.id, u.text});
    hyps.push_back({u.id, h.text});
  }
  return eval::score_corpus(refs, hyps, eval::Unit::Word).error_rate;
}

Outcome synthetic_replication(const Context&) {
  const auto t0 = std::chrono::steady_clock::now();
  auto sc = synth::three_language_config(1);
  for (auto& l : sc.languages) {
    if (l.code == "lrc") l.test_utts = 300;  // a larger test set for a steadier WER
  }
  const auto corpus = synth::generate(sc);
  std::vector<transfer::LanguageCorpus> pooled;
  for (const auto& l : corpus.languages) pooled.push_back({l.spec.code, l.train, l.dev});
  const auto& lrc = corpus.language("lrc");
  const transfer::LanguageCorpus target{"lrc", lrc.train, lrc.dev};
  std::vector<std::string> texts;
  for (const auto& u : lrc.train) texts.push_back(u.text);
  const auto bpe = bpe::train_bpe(texts, 60);

  train::TrainConfig pre_cfg;
  pre_cfg.seed = 1;
  pre_cfg.epochs = 10;
  pre_cfg.average_last = 3;
  pre_cfg.warmup_steps = 200;
  pre_cfg.batch_frames = 3000;
  const auto arch = model::ArchConfig::desk(static_cast<int>(sc.feat_dim), 5);
  const auto pre = transfer::pretrain_ipa(pooled, arch, pre_cfg).final;
  std::fprintf(stderr, "  [8] pretrained on %zu languages in %.0fs\n", pooled.size(), seconds_since(t0));

  int ft_wins = 0, adapt_wins = 0;
  bool same_steps = true;
  std::string table;
  for (int s = 1; s <= kSeeds; ++s) {
    train::TrainConfig ft;
    ft.seed = static_cast<std::uint64_t>(s);
    ft.epochs = 100;
    ft.average_last = 10;
    ft.warmup_steps = 100;
    ft.batch_frames = 500;
    transfer::AdaptConfig ac;
    ac.base = ft;
    const auto base = transfer::train_monolingual_baseline(target, bpe, pre.arch, ft);
    const auto fin = transfer::finetune_target(pre, target, bpe, ft);
    const auto adapted = transfer::adapt_ipa_model(pre, target, ac).final;
    const auto fin_ad = transfer::finetune_target(adapted, target, bpe, ft);
    same_steps &= base.steps == fin.steps && fin.steps == fin_ad.steps &&
                  base.final.arch.fingerprint() == fin.final.arch.fingerprint();
    const double w_base = word_error_rate(base.final, lrc.test, bpe);
    const double w_ft = word_error_rate(fin.final, lrc.test, bpe);
    const double w_ad = word_error_rate(fin_ad.final, lrc.test, bpe);
    ft_wins += w_ft <= w_base;
    adapt_wins += w_ad <= w_ft;
    table += fmt("%sseed %d: baseline %.4f finetune %.4f adapt+finetune %.4f", s > 1 ? "; " : "", s, w_base, w_ft, w_ad);
    std::fprintf(stderr, "  [8] seed %d: baseline %.4f finetune %.4f adapt+finetune %.4f (%.0fs)\n", s, w_base, w_ft,
                 w_ad, seconds_since(t0));
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = ft_wins >= kFinetuneWins && adapt_wins >= kAdaptWins && same_steps && secs < kReplicationSeconds;
  o.detail = fmt("finetune <= baseline in %d/%d seeds (need %d), adapt+finetune <= finetune in %d/%d (need %d), "
                 "matched steps=%d, %.0fs; ",
                 ft_wins, kSeeds, kFinetuneWins, adapt_wins, kSeeds, kAdaptWins, same_steps, secs) +
             table;
  return o;
}

// ---- 9 ------------------------------------------------------------------------

Outcome tsne_checks(const Context&) {
  const auto c = testing::tsne_three_clusters(9);
  const auto fixture = testing::make_contract_fixture(9);
  const auto ff = testing::fixed_frame_contract(fixture, 20, 9);
  Outcome o;
  o.pass = c.purity >= kPurity && ff.failures.empty() && ff.cases > 0;
  o.detail = fmt("3-cluster kNN(k=%d) purity %.4f over %zu points, fixed-frame contract %zu checks", kPurityK,
                 c.purity, c.points, ff.cases);
  if (!ff.failures.empty()) o.detail += ": " + join_failures(ff.failures);
  return o;
}

// ---- 10 -----------------------------------------------------------------------

std::vector<fs::path> pipeline(const Context& ctx, const fs::path& dir, const fs::path& log, std::string& error) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  if (run_cli(ctx, "synth --size small --seed 10 --out " + (dir / "data").string(), log) != 0) {
    error = "synth failed";
    return {};
  }
  const std::string common = "--config " + (dir / "data" / "experiment.cfg").string() + " --run-dir " + (dir / "run").string();
  const std::vector<std::string> steps{
      "g2p", "bpe-train", "train-ipa", "adapt", "finetune", "baseline",
      "decode --stage finetune", "decode --stage baseline", "score --stage finetune", "score --stage baseline",
      "embed --stage pretrain", "tsne --stage pretrain"};
  for (const auto& s : steps) {
    if (run_cli(ctx, s + " " + common, log) != 0) {
      error = s + " failed, see " + log.string();
      return {};
    }
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() != "log.txt") files.push_back(fs::relative(e.path(), dir));
  }
  std::sort(files.begin(), files.end());
  return files;
}

Outcome determinism(const Context& ctx) {
  const fs::path a = ctx.work / "determinism-a", b = ctx.work / "determinism-b";
  std::string err;
  const auto fa = pipeline(ctx, a, ctx.work / "determinism-a.log", err);
  if (!err.empty()) return {false, err};
  const auto fb = pipeline(ctx, b, ctx.work / "determinism-b.log", err);
  if (!err.empty()) return {false, err};
  std::vector<std::string> failures;
  if (fa != fb) failures.push_back("the two runs wrote different file sets");
  std::size_t checkpoints = 0, reports = 0;
  for (const auto& f : fa) {
    if (!fs::exists(b / f)) continue;
    if (io::read_file(a / f) != io::read_file(b / f)) failures.push_back(f.string() + " differs");
    checkpoints += f.filename() == "checkpoint.bin";
    reports += f.extension() == ".json";
  }
  if (checkpoints != 4) failures.push_back(fmt("%zu checkpoints compared", checkpoints));
  if (reports != 2) failures.push_back(fmt("%zu score reports compared", reports));
  Outcome o;
  o.pass = failures.empty();
  o.detail = fmt("%zu files byte-identical across two runs (%zu checkpoints, %zu score reports)",
                 fa.size() - std::min(fa.size(), failures.size()), checkpoints, reports);
  if (!failures.empty()) o.detail += ": " + join_failures(failures);
  return o;
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome(const Context&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> only;
  std::string work = (fs::temp_directory_path() / "ipat-acceptance").string();
  std::string cli = IPAT_CLI;
  app.add_option("--criterion", only, "run only these criteria (1-10)");
  app.add_option("--work", work, "scratch directory");
  app.add_option("--cli", cli, "ipat binary");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> all{
      {1, "CTC oracle", ctc_oracle},
      {2, "autodiff suite", autodiff_suite},
      {3, "IPA parsing", ipa_parsing},
      {4, "vocabulary union", vocabulary_union},
      {5, "BPE", bpe_checks},
      {6, "transfer contract", transfer_contract},
      {7, "recipe constants", recipe_constants},
      {8, "directional synthetic replication", synthetic_replication},
      {9, "t-SNE", tsne_checks},
      {10, "end-to-end determinism", determinism},
  };
  Context ctx{work, cli};
  fs::create_directories(ctx.work);
  int failed = 0;
  for (const auto& c : all) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %d %s: %s (%.1fs) %s\n", c.id, c.name, o.pass ? "PASS" : "FAIL", seconds_since(t0),
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
