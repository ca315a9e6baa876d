#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ipat/config.hpp"
#include "ipat/transfer.hpp"

namespace ipat::cli {

/// Exclusive writer lock on a run directory, released on destruction.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& run_dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

/// runs/<name>/ layout.
struct RunDir {
  std::filesystem::path root;

  std::filesystem::path g2p_manifest(const std::string& lang, const std::string& split) const {
    return root / "g2p" / (lang + "." + split + ".jsonl");
  }
  std::filesystem::path bpe_merges() const { return root / "bpe" / "merges.txt"; }
  std::filesystem::path bpe_vocab() const { return root / "bpe" / "vocab.txt"; }
  transfer::StageOutputs stage(transfer::Stage s) const { return transfer::stage_outputs(root, s); }
  std::filesystem::path hypotheses(const std::string& stage, const std::string& lang,
                                   const std::string& split) const {
    return root / "decode" / (stage + "." + lang + "." + split + ".hyp.jsonl");
  }
  std::filesystem::path report(const std::string& stage, const std::string& lang,
                               const std::string& split) const {
    return root / "score" / (stage + "." + lang + "." + split + ".report.json");
  }
  std::filesystem::path embeddings(const std::string& stage) const {
    return root / "embed" / (stage + ".emb");
  }
  std::filesystem::path scatter(const std::string& stage, const std::string& ext) const {
    return root / "tsne" / (stage + "." + ext);
  }
};

/// Config file (optional) plus `key=value` overrides.
config::ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides);

transfer::Stage parse_stage(const std::string& name);

/// StageOrderError naming the missing prerequisite when `path` is absent.
void require_stage_output(const std::filesystem::path& path, const std::string& what,
                          const std::string& producer);

/// Pretraining languages followed by the target, without repeats.
std::vector<std::string> all_languages(const config::ExperimentConfig& cfg);

}  // namespace ipat::cli
