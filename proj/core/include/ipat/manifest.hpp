#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ipat/frontend.hpp"

namespace ipat::frontend {

struct Utterance {
  std::string id;
  std::string language;
  std::filesystem::path audio;  // PCM WAV, or empty
  std::filesystem::path feats;  // feature cache, or empty
  double duration_s = 0.0;
  std::string text;
  std::optional<std::string> ipa;
  std::optional<double> rate;
  /// Features held in memory (synthetic corpora, prepared batches).
  std::shared_ptr<const FeatureMatrix> features;
};

using Manifest = std::vector<Utterance>;

/// JSON-lines manifest: {id, lang, audio|feats, dur_s, text, ipa?, rate?}.
/// Relative paths resolve against the manifest's directory.
Manifest load_manifest(const std::filesystem::path& path);
Manifest parse_manifest(std::string_view text, const std::filesystem::path& base_dir = {});
/// Paths are written relative to the manifest directory when possible.
void save_manifest(const std::filesystem::path& path, std::span<const Utterance> utts);
std::string manifest_line(const Utterance& utt, const std::filesystem::path& base_dir = {});

/// In-memory features if present, else the feature cache, else log-mel
/// computed from the audio.
FeatureMatrix load_features(const Utterance& utt, const LogMelConfig& config = {});

/// Uniform random selection without replacement, stopping as soon as the
/// selected duration reaches `hours`. Output keeps manifest order. For a
/// fixed seed the selection for a smaller budget is a subset of the one
/// for a larger budget.
Manifest subset_hours(std::span<const Utterance> manifest, double hours, std::uint64_t seed);

}  // namespace ipat::frontend
