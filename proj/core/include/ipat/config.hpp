#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ipat/eval.hpp"
#include "ipat/model.hpp"
#include "ipat/training.hpp"
#include "ipat/transfer.hpp"
#include "ipat/viz.hpp"

namespace ipat::config {

/// Flat `key = value` experiment configuration. Lines starting with '#' are
/// comments. Keys outside the documented set are rejected, except under
/// `data.` which names per-language inputs:
///   data.languages = hra,hrb      pretraining languages
///   data.target = lrc             adaptation / finetuning language
///   data.<lang>.{train,dev,test}  manifest paths
///   data.<lang>.{lexicon,rules}   g2p resources
/// Training keys `train.<field>` may be overridden per stage with
/// `train.<stage>.<field>` (stage: pretrain, adapt, finetune, baseline).
class ExperimentConfig {
 public:
  /// Documented keys with their default values.
  static const std::map<std::string, std::string>& defaults();

  static ExperimentConfig parse(std::string_view text, const std::filesystem::path& base_dir = {});
  static ExperimentConfig load(const std::filesystem::path& path);

  /// Throws ConfigError for an unknown key.
  void set(const std::string& key, const std::string& value);
  /// "key=value" from the command line.
  void set_assignment(std::string_view assignment);

  bool has(const std::string& key) const;
  std::string get(const std::string& key) const;
  std::optional<std::string> find(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;

  /// Relative paths resolve against the config file's directory.
  std::filesystem::path get_path(const std::string& key) const;
  std::vector<std::string> get_list(const std::string& key) const;

  /// Every key, resolved, sorted, one `key = value` per line.
  std::string snapshot() const;

  model::ArchConfig arch(int feat_dim, int vocab_size) const;
  train::TrainConfig train(const std::string& stage) const;
  transfer::AdaptConfig adapt() const;
  eval::DecodeOptions decode() const;
  viz::TsneConfig tsne() const;

  const std::filesystem::path& base_dir() const { return base_dir_; }

 private:
  std::map<std::string, std::string> values_;
  std::filesystem::path base_dir_;
};

/// Parses a snapshot or config text into its key/value map without
/// validation or defaults.
std::map<std::string, std::string> parse_pairs(std::string_view text);

}  // namespace ipat::config
