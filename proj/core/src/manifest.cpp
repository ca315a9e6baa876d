#include "ipat/manifest.hpp"

#include <algorithm>
#include <json.hpp>
#include <unordered_set>

#include "ipat/error.hpp"
#include "ipat/io.hpp"
#include "ipat/rng.hpp"

namespace ipat::frontend {

using nlohmann::json;

namespace {

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  if (path.is_relative() && !base.empty()) return base / path;
  return path;
}

std::string relative_to(const std::filesystem::path& p, const std::filesystem::path& base) {
  // In-memory paths are relative to the working directory, not to `base`.
  if (base.empty()) return p.generic_string();
  auto rel = std::filesystem::absolute(p).lexically_normal().lexically_relative(
      std::filesystem::absolute(base).lexically_normal());
  if (rel.empty()) return p.generic_string();
  return rel.generic_string();
}

}  // namespace

Manifest parse_manifest(std::string_view text, const std::filesystem::path& base_dir) {
  Manifest out;
  std::unordered_set<std::string> ids;
  std::optional<double> rate;
  std::size_t line_no = 0;
  for (const auto& line : io::split_lines(text)) {
    ++line_no;
    if (std::string_view(line).find_first_not_of(" \t") == std::string_view::npos) continue;
    const auto where = "manifest line " + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      fail(ErrorCode::ParseError, where + ": " + e.what());
    }
    if (!j.is_object()) fail(ErrorCode::ParseError, where + ": expected a JSON object");
    Utterance u;
    try {
      u.id = j.at("id").get<std::string>();
      u.language = j.at("lang").get<std::string>();
      u.text = j.at("text").get<std::string>();
      u.duration_s = j.at("dur_s").get<double>();
      if (j.contains("ipa") && !j["ipa"].is_null()) u.ipa = j["ipa"].get<std::string>();
      if (j.contains("rate")) u.rate = j["rate"].get<double>();
      if (j.contains("audio")) u.audio = resolve(base_dir, j["audio"].get<std::string>());
      if (j.contains("feats")) u.feats = resolve(base_dir, j["feats"].get<std::string>());
    } catch (const json::exception& e) {
      fail(ErrorCode::ParseError, where + ": " + e.what());
    }
    if (u.id.empty()) fail(ErrorCode::ParseError, where + ": empty id");
    if (u.duration_s < 0.0) fail(ErrorCode::ParseError, where + ": negative duration");
    if (!ids.insert(u.id).second) fail(ErrorCode::DuplicateId, "duplicate utterance id '" + u.id + "'");
    const bool has_audio = !u.audio.empty() && std::filesystem::exists(u.audio);
    const bool has_feats = !u.feats.empty() && std::filesystem::exists(u.feats);
    if (!has_audio && !has_feats) fail(ErrorCode::MissingAudio, "utterance '" + u.id + "' has no readable audio or feats");
    if (u.rate) {
      if (rate && *rate != *u.rate) fail(ErrorCode::ParseError, where + ": sample rate differs within manifest");
      rate = u.rate;
    }
    out.push_back(std::move(u));
  }
  return out;
}

Manifest load_manifest(const std::filesystem::path& path) {
  return parse_manifest(io::read_file(path), path.parent_path());
}

std::string manifest_line(const Utterance& u, const std::filesystem::path& base_dir) {
  json j;
  j["id"] = u.id;
  j["lang"] = u.language;
  if (!u.audio.empty()) j["audio"] = relative_to(u.audio, base_dir);
  if (!u.feats.empty()) j["feats"] = relative_to(u.feats, base_dir);
  j["dur_s"] = u.duration_s;
  j["text"] = u.text;
  if (u.ipa) j["ipa"] = *u.ipa;
  if (u.rate) j["rate"] = *u.rate;
  return j.dump();
}

void save_manifest(const std::filesystem::path& path, std::span<const Utterance> utts) {
  std::string out;
  for (const auto& u : utts) out += manifest_line(u, path.parent_path()) + "\n";
  io::write_file(path, out);
}

FeatureMatrix load_features(const Utterance& utt, const LogMelConfig& config) {
  if (utt.features) return *utt.features;
  if (!utt.feats.empty()) return read_features(utt.feats);
  if (!utt.audio.empty()) {
    auto audio = read_wav(utt.audio);
    return compute_logmel(audio.samples, audio.rate, config);
  }
  fail(ErrorCode::MissingAudio, "utterance '" + utt.id + "' has no features or audio");
}

Manifest subset_hours(std::span<const Utterance> manifest, double hours, std::uint64_t seed) {
  constexpr double kTolerance = 1e-9;
  const double target = hours * 3600.0;
  double total = 0.0;
  for (const auto& u : manifest) total += u.duration_s;
  if (total + kTolerance < target) {
    fail(ErrorCode::InsufficientData, "requested " + std::to_string(hours) + " h but manifest holds " +
                                          std::to_string(total / 3600.0) + " h");
  }
  std::vector<std::size_t> order(manifest.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, "subset_hours"));
  rng.shuffle(order);
  std::vector<std::size_t> chosen;
  double acc = 0.0;
  for (std::size_t idx : order) {
    if (acc + kTolerance >= target) break;
    chosen.push_back(idx);
    acc += manifest[idx].duration_s;
  }
  std::sort(chosen.begin(), chosen.end());
  Manifest out;
  out.reserve(chosen.size());
  for (std::size_t idx : chosen) out.push_back(manifest[idx]);
  return out;
}

}  // namespace ipat::frontend
