#include "ipat/config.hpp"

#include <algorithm>
#include <charconv>

#include "ipat/error.hpp"
#include "ipat/io.hpp"
#include "ipat/text.hpp"

namespace ipat::config {

namespace {

const std::vector<std::string> kStages = {"pretrain", "adapt", "finetune", "baseline"};

bool starts_with(std::string_view s, std::string_view p) { return s.substr(0, p.size()) == p; }

bool is_train_field(const std::string& field) {
  return ExperimentConfig::defaults().contains("train." + field);
}

bool known_key(const std::string& key) {
  if (ExperimentConfig::defaults().contains(key)) return true;
  if (starts_with(key, "data.") && key.size() > 5) return true;
  if (starts_with(key, "train.")) {
    const auto rest = key.substr(6);
    const auto dot = rest.find('.');
    if (dot == std::string::npos) return false;
    const auto stage = rest.substr(0, dot);
    return std::find(kStages.begin(), kStages.end(), stage) != kStages.end() &&
           is_train_field(rest.substr(dot + 1));
  }
  return false;
}

}  // namespace

const std::map<std::string, std::string>& ExperimentConfig::defaults() {
  static const std::map<std::string, std::string> d = {
      {"seed", "1"},
      {"arch.profile", "desk"},
      {"arch.enc_layers", ""},
      {"arch.dec_layers", ""},
      {"arch.heads", ""},
      {"arch.d_model", ""},
      {"arch.d_ff", ""},
      {"arch.conv_kernel", ""},
      {"arch.dropout", ""},
      {"arch.max_decode_len", ""},
      {"train.ctc_weight", "0.1"},
      {"train.label_smoothing", "0.1"},
      {"train.peak_lr", "0.001"},
      {"train.warmup_steps", "2000"},
      {"train.epochs", "60"},
      {"train.average_last", "10"},
      {"train.batch_frames", "12000"},
      {"train.grad_clip", "5"},
      {"train.seed", ""},
      {"adapt.lr", "5e-05"},
      {"adapt.epochs", "2"},
      {"g2p.oov", "rules"},
      {"bpe.size", "200"},
      {"decode.beam", "10"},
      {"decode.max_len_ratio", "1"},
      {"decode.mode", "attention"},
      {"score.unit", "word"},
      {"embed.frames_per_lang", "1000"},
      {"embed.seed", "1"},
      {"tsne.perplexity", "30"},
      {"tsne.iterations", "1000"},
      {"tsne.exaggeration", "12"},
      {"tsne.exaggeration_iters", "250"},
      {"tsne.seed", "1"},
  };
  return d;
}

std::map<std::string, std::string> parse_pairs(std::string_view text) {
  std::map<std::string, std::string> out;
  std::size_t lineno = 0;
  for (const auto& raw : io::split_lines(text)) {
    ++lineno;
    const auto line = text::trim(raw);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      fail(ErrorCode::ConfigError, "config line " + std::to_string(lineno) + " has no '='");
    }
    const std::string key(text::trim(line.substr(0, eq)));
    if (key.empty()) fail(ErrorCode::ConfigError, "config line " + std::to_string(lineno) + " has no key");
    out[key] = std::string(text::trim(line.substr(eq + 1)));
  }
  return out;
}

ExperimentConfig ExperimentConfig::parse(std::string_view text, const std::filesystem::path& base_dir) {
  ExperimentConfig c;
  c.values_ = defaults();
  c.base_dir_ = base_dir;
  for (const auto& [k, v] : parse_pairs(text)) c.set(k, v);
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  return parse(io::read_file(path), path.parent_path());
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  if (!known_key(key)) fail(ErrorCode::ConfigError, "unknown config key '" + key + "'");
  values_[key] = value;
}

void ExperimentConfig::set_assignment(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    fail(ErrorCode::ConfigError, "expected key=value, got '" + std::string(assignment) + "'");
  }
  set(std::string(text::trim(assignment.substr(0, eq))), std::string(text::trim(assignment.substr(eq + 1))));
}

bool ExperimentConfig::has(const std::string& key) const {
  const auto it = values_.find(key);
  return it != values_.end() && !it->second.empty();
}

std::optional<std::string> ExperimentConfig::find(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end() || it->second.empty()) return std::nullopt;
  return it->second;
}

std::string ExperimentConfig::get(const std::string& key) const {
  auto v = find(key);
  if (!v) fail(ErrorCode::ConfigError, "missing config key '" + key + "'");
  return *v;
}

double ExperimentConfig::get_double(const std::string& key) const {
  const std::string s = get(key);
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    fail(ErrorCode::ConfigError, key + " = '" + s + "' is not a number");
  }
  return v;
}

std::int64_t ExperimentConfig::get_int(const std::string& key) const {
  const std::string s = get(key);
  std::int64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    fail(ErrorCode::ConfigError, key + " = '" + s + "' is not an integer");
  }
  return v;
}

std::uint64_t ExperimentConfig::get_u64(const std::string& key) const {
  const std::string s = get(key);
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    fail(ErrorCode::ConfigError, key + " = '" + s + "' is not a non-negative integer");
  }
  return v;
}

std::filesystem::path ExperimentConfig::get_path(const std::string& key) const {
  std::filesystem::path p = get(key);
  if (p.is_relative() && !base_dir_.empty()) p = base_dir_ / p;
  return p;
}

std::vector<std::string> ExperimentConfig::get_list(const std::string& key) const {
  std::vector<std::string> out;
  const auto v = find(key);
  if (!v) return out;
  std::string_view s = *v;
  while (!s.empty()) {
    const auto comma = s.find(',');
    const auto item = text::trim(s.substr(0, comma));
    if (!item.empty()) out.emplace_back(item);
    if (comma == std::string_view::npos) break;
    s.remove_prefix(comma + 1);
  }
  return out;
}

std::string ExperimentConfig::snapshot() const {
  std::map<std::string, std::string> resolved = values_;
  const auto a = arch(1, 5);
  const std::map<std::string, std::string> arch_values = {
      {"arch.enc_layers", std::to_string(a.enc_layers)},
      {"arch.dec_layers", std::to_string(a.dec_layers)},
      {"arch.heads", std::to_string(a.heads)},
      {"arch.d_model", std::to_string(a.d_model)},
      {"arch.d_ff", std::to_string(a.d_ff)},
      {"arch.conv_kernel", std::to_string(a.conv_kernel)},
      {"arch.dropout", resolved["arch.dropout"].empty() ? "0.1" : resolved["arch.dropout"]},
      {"arch.max_decode_len", std::to_string(a.max_decode_len)},
  };
  for (const auto& [k, v] : arch_values) {
    if (resolved[k].empty()) resolved[k] = v;
  }
  if (resolved["train.seed"].empty()) resolved["train.seed"] = resolved["seed"];
  std::string out = "# resolved experiment configuration\n";
  for (const auto& [k, v] : resolved) out += k + " = " + v + "\n";
  return out;
}

model::ArchConfig ExperimentConfig::arch(int feat_dim, int vocab_size) const {
  const std::string profile = get("arch.profile");
  model::ArchConfig a;
  if (profile == "desk") {
    a = model::ArchConfig::desk(feat_dim, vocab_size);
  } else if (profile == "full") {
    a = model::ArchConfig::full(feat_dim, vocab_size);
  } else {
    fail(ErrorCode::ConfigError, "arch.profile must be desk or full, got '" + profile + "'");
  }
  auto override_int = [&](const char* field, int& dst) {
    const std::string key = std::string("arch.") + field;
    if (has(key)) dst = static_cast<int>(get_int(key));
  };
  override_int("enc_layers", a.enc_layers);
  override_int("dec_layers", a.dec_layers);
  override_int("heads", a.heads);
  override_int("d_model", a.d_model);
  override_int("d_ff", a.d_ff);
  override_int("conv_kernel", a.conv_kernel);
  override_int("max_decode_len", a.max_decode_len);
  if (has("arch.dropout")) a.dropout = get_double("arch.dropout");
  return a;
}

train::TrainConfig ExperimentConfig::train(const std::string& stage) const {
  auto key = [&](const std::string& field) {
    const std::string staged = "train." + stage + "." + field;
    return has(staged) ? staged : "train." + field;
  };
  train::TrainConfig t;
  t.ctc_weight = get_double(key("ctc_weight"));
  t.label_smoothing = get_double(key("label_smoothing"));
  t.peak_lr = get_double(key("peak_lr"));
  t.warmup_steps = get_int(key("warmup_steps"));
  t.epochs = static_cast<int>(get_int(key("epochs")));
  t.average_last = static_cast<int>(get_int(key("average_last")));
  t.batch_frames = get_int(key("batch_frames"));
  t.grad_clip = get_double(key("grad_clip"));
  t.seed = has(key("seed")) ? get_u64(key("seed")) : get_u64("seed");
  t.validate();
  return t;
}

transfer::AdaptConfig ExperimentConfig::adapt() const {
  transfer::AdaptConfig a;
  a.base = train("adapt");
  a.lr = get_double("adapt.lr");
  a.epochs = static_cast<int>(get_int("adapt.epochs"));
  if (!(a.lr > 0.0)) fail(ErrorCode::ConfigError, "adapt.lr must be positive");
  if (a.epochs < 0) fail(ErrorCode::ConfigError, "adapt.epochs must be non-negative");
  return a;
}

eval::DecodeOptions ExperimentConfig::decode() const {
  eval::DecodeOptions d;
  const std::string mode = get("decode.mode");
  if (mode == "attention") {
    d.mode = eval::DecodeMode::Attention;
  } else if (mode == "ctc") {
    d.mode = eval::DecodeMode::CtcGreedy;
  } else {
    fail(ErrorCode::ConfigError, "decode.mode must be attention or ctc, got '" + mode + "'");
  }
  d.beam = static_cast<int>(get_int("decode.beam"));
  d.max_len_ratio = get_double("decode.max_len_ratio");
  if (d.beam < 1) fail(ErrorCode::ConfigError, "decode.beam must be at least 1");
  if (!(d.max_len_ratio > 0.0)) fail(ErrorCode::ConfigError, "decode.max_len_ratio must be positive");
  return d;
}

viz::TsneConfig ExperimentConfig::tsne() const {
  viz::TsneConfig t;
  t.perplexity = get_double("tsne.perplexity");
  t.iterations = static_cast<int>(get_int("tsne.iterations"));
  t.early_exaggeration = get_double("tsne.exaggeration");
  t.exaggeration_iters = static_cast<int>(get_int("tsne.exaggeration_iters"));
  t.seed = get_u64("tsne.seed");
  return t;
}

}  // namespace ipat::config
