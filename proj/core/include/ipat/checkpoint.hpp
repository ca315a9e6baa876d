#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "ipat/model.hpp"
#include "ipat/phoneset.hpp"

namespace ipat::ckpt {

inline constexpr std::uint32_t kFormatVersion = 1;

struct Checkpoint {
  model::ArchConfig arch;
  phoneset::Vocabulary vocab;
  /// Append-only stage history, e.g. {"pretrain_ipa:hra+hrb", "adapted:lrc"}.
  std::vector<std::string> provenance;
  /// Free-form records: stage, seed, epoch, averaged_epochs, frontend hash.
  std::map<std::string, std::string> metadata;
  model::Params<float> params;

  std::string fingerprint() const { return arch.fingerprint(); }
};

/// Little-endian layout:
///   "IPAT" u32 version, str fingerprint, u64 vocab hash,
///   u32 n + n str provenance, str arch, str vocab, u32 n + n (str, str) metadata,
///   u32 n + n tensors {str name, u32 rank, rank x u32 dims, float32 data}
/// where str = u32 length + bytes.
std::string serialize(const Checkpoint& ckpt);
/// Throws BadMagic, VersionMismatch, IoError (truncated/corrupt) and, when
/// `expected` is given and differs, FingerprintMismatch.
Checkpoint deserialize(std::string_view bytes, const model::ArchConfig* expected = nullptr);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const model::ArchConfig* expected = nullptr);

/// Bitwise equality of every tensor (names and shapes included).
bool same_params(const model::Params<float>& a, const model::Params<float>& b);

}  // namespace ipat::ckpt
