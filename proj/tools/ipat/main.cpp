#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>

#include "commands.hpp"
#include "ipat/error.hpp"

namespace {

using namespace ipat::cli;

int category_exit(ipat::ErrorCategory c) {
  switch (c) {
    case ipat::ErrorCategory::Config: return 2;
    case ipat::ErrorCategory::Data: return 3;
    case ipat::ErrorCategory::Numeric: return 4;
    case ipat::ErrorCategory::Io: return 5;
  }
  return 1;
}

std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

void add_common(CLI::App* cmd, Common& c, bool need_run_dir = true) {
  cmd->add_option("--config", c.config, "experiment config (key = value lines)");
  cmd->add_option("--set", c.sets, "override one key, e.g. --set train.epochs=5");
  auto* opt = cmd->add_option("--run-dir", c.run_dir, "run directory");
  if (need_run_dir) opt->required();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ipat: IPA pretraining and transfer for low-resource speech recognition"};
  app.require_subcommand(1);
  std::function<int()> action;

  SynthOptions synth;
  auto* c_synth = app.add_subcommand("synth", "write the synthetic three-language corpus and its config");
  c_synth->add_option("--out", synth.out, "output directory")->required();
  c_synth->add_option("--seed", synth.seed, "generator seed");
  c_synth->add_option("--size", synth.size, "full or small");
  c_synth->callback([&] { action = [&] { return run_synth(synth); }; });

  PrepareOptions prep;
  auto* c_prep = app.add_subcommand("prepare", "compute log-mel features for a manifest");
  c_prep->add_option("--manifest", prep.manifest, "input manifest")->required();
  c_prep->add_option("--out", prep.out, "output manifest")->required();
  c_prep->add_option("--feats-dir", prep.feats_dir, "feature directory (default: <out dir>/feats)");
  c_prep->callback([&] { action = [&] { return run_prepare(prep); }; });

  G2pOptions g2p;
  auto* c_g2p = app.add_subcommand("g2p", "fill IPA transcripts for every configured manifest");
  add_common(c_g2p, g2p.common, false);
  c_g2p->add_option("--text", g2p.text, "convert this text and print it");
  c_g2p->add_option("--lexicon", g2p.lexicon, "lexicon for --text");
  c_g2p->add_option("--rules", g2p.rules, "rules for --text");
  c_g2p->callback([&] { action = [&] { return run_g2p(g2p); }; });

  Common bpe;
  auto* c_bpe = app.add_subcommand("bpe-train", "learn BPE merges on the target language");
  add_common(c_bpe, bpe);
  c_bpe->callback([&] { action = [&] { return run_bpe_train(bpe); }; });

  Common pre;
  auto* c_pre = app.add_subcommand("train-ipa", "pretrain the multilingual IPA model");
  add_common(c_pre, pre);
  c_pre->callback([&] { action = [&] { return run_train_ipa(pre); }; });

  Common adapt;
  auto* c_adapt = app.add_subcommand("adapt", "adapt the IPA model to the target language");
  add_common(c_adapt, adapt);
  c_adapt->callback([&] { action = [&] { return run_adapt(adapt); }; });

  StageOptions ft;
  auto* c_ft = app.add_subcommand("finetune", "finetune an IPA encoder on target BPE units");
  add_common(c_ft, ft.common);
  c_ft->add_option("--parent", ft.parent, "pretrain, adapt or auto");
  c_ft->callback([&] { action = [&] { return run_finetune(ft); }; });

  Common base;
  auto* c_base = app.add_subcommand("baseline", "train the monolingual baseline");
  add_common(c_base, base);
  c_base->callback([&] { action = [&] { return run_baseline(base); }; });

  StageOptions dec;
  auto* c_dec = app.add_subcommand("decode", "decode a split with a stage checkpoint");
  add_common(c_dec, dec.common);
  c_dec->add_option("--stage", dec.stage, "pretrain, adapt, finetune or baseline")->required();
  c_dec->add_option("--split", dec.split, "train, dev or test");
  c_dec->add_option("--lang", dec.language, "language (default: data.target)");
  c_dec->callback([&] { action = [&] { return run_decode(dec); }; });

  ScoreOptions score;
  auto* c_score = app.add_subcommand("score", "score hypotheses against references");
  add_common(c_score, score.common, false);
  c_score->add_option("--stage", score.stage, "stage whose decode output to score");
  c_score->add_option("--split", score.split, "train, dev or test");
  c_score->add_option("--lang", score.language, "language (default: data.target)");
  c_score->add_option("--ref", score.ref, "reference JSON lines {id, text}");
  c_score->add_option("--hyp", score.hyp, "hypothesis JSON lines {id, text}");
  c_score->add_option("--out", score.out, "report path");
  c_score->add_option("--unit", score.unit, "word or phone");
  c_score->callback([&] { action = [&] { return run_score(score); }; });

  StageOptions emb;
  auto* c_emb = app.add_subcommand("embed", "extract encoder frame embeddings");
  add_common(c_emb, emb.common);
  c_emb->add_option("--stage", emb.stage, "checkpoint stage (default: pretrain)");
  c_emb->add_option("--split", emb.split, "split to sample frames from");
  c_emb->callback([&] { action = [&] { return run_embed(emb); }; });

  StageOptions ts;
  auto* c_ts = app.add_subcommand("tsne", "project embeddings to 2-D and write CSV and SVG");
  add_common(c_ts, ts.common);
  c_ts->add_option("--stage", ts.stage, "checkpoint stage (default: pretrain)");
  c_ts->callback([&] { action = [&] { return run_tsne(ts); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "ipat: error[UsageError]: %s\n", one_line(e.what()).c_str());
    return 2;
  }

  try {
    return action();
  } catch (const ipat::Error& e) {
    const std::string name(ipat::error_code_name(e.code()));
    std::string msg = one_line(e.what());
    if (msg.rfind(name + ": ", 0) == 0) msg.erase(0, name.size() + 2);
    std::fprintf(stderr, "ipat: error[%s]: %s\n", name.c_str(), msg.c_str());
    return category_exit(ipat::exit_category(e.code()));
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "ipat: error[IoError]: %s\n", one_line(e.what()).c_str());
    return 5;
  } catch (const std::bad_alloc&) {
    std::fprintf(stderr, "ipat: error[OutOfMemory]: allocation failed\n");
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "ipat: error[Internal]: %s\n", one_line(e.what()).c_str());
    return 1;
  }
}
