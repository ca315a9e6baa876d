#include <algorithm>
#include <cstring>
#include <map>
#include <set>
#include <tuple>

#include "ipat/bpe.hpp"
#include "ipat/error.hpp"
#include "ipat/rng.hpp"
#include "ipat/synth.hpp"
#include "ipat/transfer.hpp"
#include "ipat/viz.hpp"
#include "oracles.hpp"

namespace ipat::testing {

namespace {

bool starts_with(const std::string& s, std::string_view p) { return s.compare(0, p.size(), p) == 0; }

bool bytes_equal(const ad::Tensor<float>& a, const ad::Tensor<float>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.numel()) * sizeof(float)) == 0;
}

}  // namespace

model::ArchConfig contract_arch(int feat_dim) {
  auto a = model::ArchConfig::desk(feat_dim, 1);
  a.enc_layers = 1;
  a.dec_layers = 1;
  a.d_model = 16;
  a.d_ff = 24;
  a.conv_kernel = 3;
  return a;
}

ContractFixture make_contract_fixture(std::uint64_t seed) {
  ContractFixture f;
  f.corpus = synth::generate(synth::small_three_language_config(seed));
  for (const auto& l : f.corpus.languages) {
    transfer::LanguageCorpus c{l.spec.code, l.train, l.dev};
    if (l.spec.code == "lrc") f.target = c;
    else f.pretrain.push_back(c);
  }
  f.arch = contract_arch(static_cast<int>(f.corpus.config.feat_dim));
  f.train.seed = seed;
  f.train.epochs = 1;
  f.train.average_last = 1;
  f.train.warmup_steps = 10;
  f.train.batch_frames = 1500;
  f.parent = transfer::pretrain_ipa(f.pretrain, f.arch, f.train).final;
  std::vector<std::string> texts;
  for (const auto& u : f.target.train) texts.push_back(u.text);
  f.bpe = bpe::train_bpe(texts, 60);
  return f;
}

FixtureOutcome transfer_contract(const ContractFixture& f) {
  FixtureOutcome out;
  auto expect = [&](bool ok, const std::string& what) {
    ++out.cases;
    if (!ok) out.failures.push_back(what);
  };

  // Pretraining head width: union of the tokens attested in both training
  // partitions, counted here with a plain set.
  std::set<std::string> attested;
  for (const auto& l : f.pretrain) {
    for (const auto& u : l.train) {
      for (const auto& t : phoneset::parse_ipa(*u.ipa)) attested.insert(t.text);
    }
  }
  const auto V_ipa = static_cast<std::int64_t>(attested.size()) + phoneset::Vocabulary::kNumSpecials;
  expect(f.parent.vocab.kind() == phoneset::VocabKind::Ipa, "parent vocabulary is IPA");
  expect(f.parent.params.at("ctc.weight").dim(1) == V_ipa, "pretrain CTC head width == |union| + 4");
  expect(f.parent.arch.vocab_size_out == V_ipa, "pretrain decoder width == |union| + 4");

  train::TrainConfig cfg = f.train;
  cfg.epochs = 0;
  const auto step0 = transfer::finetune_target(f.parent, f.target, f.bpe, cfg).final;
  const auto V_bpe = static_cast<std::int64_t>(f.bpe.vocab().size());

  expect(step0.vocab.kind() == phoneset::VocabKind::Bpe, "finetune vocabulary is BPE");
  expect(step0.vocab.same_entries(f.bpe.vocab()), "finetune vocabulary equals the BPE vocabulary");
  expect(step0.arch.vocab_size_out == V_bpe, "vocab_size_out == |BPE vocab|");
  expect(step0.arch.vocab_size_ctc == V_bpe, "vocab_size_ctc == |BPE vocab|");
  expect(step0.params.at("decoder.output.weight").dim(1) == V_bpe, "decoder.output.weight width == |BPE vocab|");
  expect(step0.params.at("decoder.output.bias").dim(0) == V_bpe, "decoder.output.bias width == |BPE vocab|");
  expect(step0.params.at("decoder.embed.weight").dim(0) == V_bpe, "decoder.embed rows == |BPE vocab|");
  expect(step0.params.at("ctc.weight").dim(1) == V_bpe, "ctc.weight width == |BPE vocab|");

  std::set<std::string> names, spec_names;
  for (const auto& [n, t] : step0.params) names.insert(n);
  for (const auto& s : model::param_specs(step0.arch)) spec_names.insert(s.name);
  expect(names == spec_names, "step-0 parameter set matches the architecture");

  // Encoder: bit-identical to the parent.
  std::size_t encoder_tensors = 0;
  for (const auto& [n, t] : f.parent.params) {
    if (!starts_with(n, "encoder.")) continue;
    ++encoder_tensors;
    auto it = step0.params.find(n);
    expect(it != step0.params.end() && bytes_equal(it->second, t), "encoder tensor " + n + " copied bit-for-bit");
  }
  expect(encoder_tensors > 0, "parent has encoder tensors");

  // Decoder and heads: a fresh draw from the decoder seed, unlike the parent.
  const auto fresh = model::init_params<float>(step0.arch, transfer::decoder_seed(f.train.seed, f.target.language));
  std::size_t head_tensors = 0;
  for (const auto& spec : model::param_specs(step0.arch)) {
    if (starts_with(spec.name, "encoder.")) continue;
    ++head_tensors;
    const auto& t = step0.params.at(spec.name);
    expect(bytes_equal(t, fresh.at(spec.name)), spec.name + " freshly initialized");
    if (spec.init == model::ParamSpec::Init::Glorot) {
      const auto& p = f.parent.params.at(spec.name);
      expect(!bytes_equal(t, p), spec.name + " differs from the parent");
    }
  }
  expect(head_tensors > 0, "architecture has decoder tensors");

  expect(step0.provenance.size() == f.parent.provenance.size() + 1 &&
             step0.provenance.back() == "finetuned:" + f.target.language,
         "provenance gains one finetune entry");

  // Adaptation with no epochs keeps everything, including the vocabulary file.
  transfer::AdaptConfig ac;
  ac.base = f.train;
  ac.epochs = 0;
  const auto adapted = transfer::adapt_ipa_model(f.parent, f.target, ac).final;
  expect(ckpt::same_params(adapted.params, f.parent.params), "adapt with 0 epochs keeps parameters");
  expect(adapted.vocab.to_text() == f.parent.vocab.to_text(), "adapt keeps the vocabulary byte for byte");
  expect(adapted.provenance.size() == 2 && starts_with(adapted.provenance[1], "adapted:"), "adapt provenance");
  const auto step0b = transfer::finetune_init(adapted, f.bpe.vocab(), f.target.language, f.train.seed);
  expect(step0b.provenance.size() == 3, "pretrain > adapt > finetune chain has three entries");

  auto code_of = [](const std::function<void()>& fn) -> std::string {
    try {
      fn();
    } catch (const Error& e) {
      return std::string(error_code_name(e.code()));
    }
    return "none";
  };
  expect(code_of([&] { transfer::finetune_init(step0, f.bpe.vocab(), "lrc", 1); }) == "WrongParentStage",
         "finetuning a finetuned model is rejected");
  expect(code_of([&] { transfer::adapt_ipa_model(step0, f.target, ac); }) == "WrongParentStage",
         "adapting a finetuned model is rejected");

  transfer::LanguageCorpus odd = f.target;
  odd.train.resize(1);
  odd.train[0].ipa = "q a";
  std::string missing;
  try {
    transfer::adapt_ipa_model(f.parent, odd, ac);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::VocabMissingSymbols) missing = e.what();
  }
  expect(!attested.count("q") && missing.find(" q") != std::string::npos, "missing symbols are listed");

  transfer::StageConfig sc;
  sc.stage = transfer::Stage::Finetune;
  sc.languages = {"lrc"};
  sc.target_language = "lrc";
  expect(code_of([&] { sc.validate(); }) == "StageOrderError", "finetune without a parent is a stage-order error");

  // The baseline shares the decoder draw but not the encoder.
  const auto base = transfer::baseline_init(f.arch, f.bpe.vocab(), f.target.language, f.train.seed);
  bool same_heads = true, encoder_differs = false;
  for (const auto& [n, t] : base.params) {
    if (starts_with(n, "encoder.")) encoder_differs |= !bytes_equal(t, f.parent.params.at(n));
    else same_heads &= bytes_equal(t, step0.params.at(n));
  }
  expect(same_heads, "baseline decoder equals the finetune decoder draw");
  expect(encoder_differs, "baseline encoder is not the parent's");
  return out;
}

}  // namespace ipat::testing

namespace ipat::testing {

ClusterOutcome tsne_three_clusters(std::uint64_t seed) {
  // Three Gaussian blobs in 10-D: centers 10 apart on the axes, sigma 0.5.
  constexpr int kPerCluster = 100, kDim = 10;
  Rng rng(seed);
  std::vector<float> data;
  std::vector<std::string> labels;
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < kPerCluster; ++i) {
      for (int d = 0; d < kDim; ++d) {
        data.push_back(static_cast<float>((d == c ? 10.0 : 0.0) + 0.5 * rng.normal()));
      }
      labels.push_back("c" + std::to_string(c));
    }
  }
  viz::TsneConfig cfg;
  cfg.seed = seed;
  const auto r = viz::tsne(data, labels.size(), kDim, cfg);
  ClusterOutcome out;
  out.points = labels.size();
  out.purity = viz::knn_purity(r.points, labels, 10);
  out.kl_final = r.kl_final;
  return out;
}

FixtureOutcome fixed_frame_contract(const ContractFixture& f, int n_per_lang, std::uint64_t seed) {
  FixtureOutcome out;
  auto expect = [&](bool ok, const std::string& what) {
    ++out.cases;
    if (!ok) out.failures.push_back(what);
  };
  viz::LanguageManifests m;
  for (const auto& l : f.corpus.languages) m[l.spec.code] = l.test;

  // Two unrelated checkpoints over the same front end.
  auto other = f.parent;
  other.params = model::init_params<float>(other.arch, seed + 1000);
  const auto a = viz::extract_frame_embeddings(f.parent, m, n_per_lang, seed);
  const auto b = viz::extract_frame_embeddings(other, m, n_per_lang, seed);
  expect(a.size() == m.size() * static_cast<std::size_t>(n_per_lang), "rows == languages x n_per_lang");
  expect(a.rows == b.rows, "two checkpoints read the same (utterance, frame) list");
  expect(a.rows == viz::select_frames(m, n_per_lang, seed, f.parent.arch), "rows follow select_frames");
  expect(a.data != b.data, "different checkpoints give different embeddings");

  std::set<std::tuple<std::string, std::string, int>> distinct;
  std::map<std::string, int> per_lang;
  bool in_range = true;
  for (const auto& r : a.rows) {
    distinct.insert({r.language, r.utterance, r.frame});
    ++per_lang[r.language];
    const auto it = std::find_if(m.at(r.language).begin(), m.at(r.language).end(),
                                 [&](const frontend::Utterance& u) { return u.id == r.utterance; });
    in_range &= it != m.at(r.language).end() &&
                r.frame < model::subsampled_length(static_cast<int>(it->features->num_frames), f.parent.arch);
  }
  expect(distinct.size() == a.size(), "frames drawn without replacement");
  expect(in_range, "frames index valid encoder outputs");
  bool balanced = per_lang.size() == m.size();
  for (const auto& [l, n] : per_lang) balanced &= n == n_per_lang;
  expect(balanced, "n_per_lang frames for every language");

  const auto again = viz::extract_frame_embeddings(f.parent, m, n_per_lang, seed);
  expect(again.data == a.data, "extraction is deterministic");
  const auto reseeded = viz::select_frames(m, n_per_lang, seed + 1, f.parent.arch);
  expect(reseeded != a.rows, "a different seed picks different frames");
  expect(viz::extract_frame_embeddings(f.parent, m, 0, seed).size() == 0, "n_per_lang = 0 gives no rows");
  return out;
}

}  // namespace ipat::testing
