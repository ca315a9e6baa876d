#include "run_dir.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>

#include "ipat/error.hpp"

namespace ipat::cli {

RunLock::RunLock(const std::filesystem::path& run_dir) : path_(run_dir / ".lock") {
  std::error_code ec;
  std::filesystem::create_directories(run_dir, ec);
  if (ec) fail(ErrorCode::IoError, "cannot create run directory " + run_dir.string() + ": " + ec.message());
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    fail(ErrorCode::IoError, "run directory " + run_dir.string() +
                                 " is locked by another writer (remove .lock if it is stale)");
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

RunLock::~RunLock() {
  std::error_code ec;
  std::filesystem::remove(path_, ec);
}

config::ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  auto cfg = path.empty() ? config::ExperimentConfig::parse("") : config::ExperimentConfig::load(path);
  for (const auto& o : overrides) cfg.set_assignment(o);
  return cfg;
}

transfer::Stage parse_stage(const std::string& name) {
  if (name == "pretrain") return transfer::Stage::PretrainIpa;
  if (name == "adapt") return transfer::Stage::Adapt;
  if (name == "finetune") return transfer::Stage::Finetune;
  if (name == "baseline") return transfer::Stage::MonolingualBaseline;
  fail(ErrorCode::ConfigError, "unknown stage '" + name + "' (pretrain, adapt, finetune, baseline)");
}

void require_stage_output(const std::filesystem::path& path, const std::string& what,
                          const std::string& producer) {
  if (!std::filesystem::exists(path)) {
    fail(ErrorCode::StageOrderError, what + " not found at " + path.string() + "; run '" + producer + "' first");
  }
}

std::vector<std::string> all_languages(const config::ExperimentConfig& cfg) {
  auto langs = cfg.get_list("data.languages");
  if (auto target = cfg.find("data.target");
      target && std::find(langs.begin(), langs.end(), *target) == langs.end()) {
    langs.push_back(*target);
  }
  return langs;
}

}  // namespace ipat::cli
