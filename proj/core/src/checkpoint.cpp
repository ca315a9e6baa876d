#include "ipat/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "ipat/error.hpp"
#include "ipat/io.hpp"

namespace ipat::ckpt {

namespace {

constexpr std::string_view kMagic = "IPAT";

// Bounded counts keep a corrupt header from triggering huge allocations.
std::uint32_t read_count(io::BinaryReader& r, std::size_t min_item_bytes) {
  const std::uint32_t n = r.u32();
  if (min_item_bytes > 0 && static_cast<std::size_t>(n) * min_item_bytes > r.remaining()) {
    fail(ErrorCode::IoError, "checkpoint is truncated or corrupt");
  }
  return n;
}

}  // namespace

std::string serialize(const Checkpoint& ckpt) {
  io::BinaryWriter w;
  w.bytes(kMagic);
  w.u32(kFormatVersion);
  w.string(ckpt.fingerprint());
  w.u64(ckpt.vocab.content_hash());
  w.u32(static_cast<std::uint32_t>(ckpt.provenance.size()));
  for (const auto& p : ckpt.provenance) w.string(p);
  w.string(ckpt.arch.to_text());
  w.string(ckpt.vocab.to_text());
  w.u32(static_cast<std::uint32_t>(ckpt.metadata.size()));
  for (const auto& [k, v] : ckpt.metadata) {
    w.string(k);
    w.string(v);
  }
  w.u32(static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, t] : ckpt.params) {
    w.string(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float v : t.values()) w.f32(v);
  }
  return w.take();
}

Checkpoint deserialize(std::string_view bytes, const model::ArchConfig* expected) {
  io::BinaryReader r(bytes);
  if (r.remaining() < kMagic.size() || r.bytes(kMagic.size()) != kMagic) {
    fail(ErrorCode::BadMagic, "not a checkpoint file (missing IPAT magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kFormatVersion) {
    fail(ErrorCode::VersionMismatch, "checkpoint format version " + std::to_string(version) +
                                         ", expected " + std::to_string(kFormatVersion));
  }
  Checkpoint ckpt;
  const std::string fingerprint = r.string();
  if (expected && expected->fingerprint() != fingerprint) {
    fail(ErrorCode::FingerprintMismatch,
         "checkpoint architecture '" + fingerprint + "' does not match '" + expected->fingerprint() + "'");
  }
  const std::uint64_t vocab_hash = r.u64();
  const std::uint32_t n_prov = read_count(r, 4);
  for (std::uint32_t i = 0; i < n_prov; ++i) ckpt.provenance.push_back(r.string());
  ckpt.arch = model::ArchConfig::from_text(r.string());
  if (ckpt.arch.fingerprint() != fingerprint) {
    fail(ErrorCode::IoError, "checkpoint header fingerprint disagrees with its stored config");
  }
  ckpt.vocab = phoneset::Vocabulary::from_text(r.string());
  if (ckpt.vocab.content_hash() != vocab_hash) {
    fail(ErrorCode::IoError, "checkpoint vocabulary hash mismatch");
  }
  if (static_cast<int>(ckpt.vocab.size()) != ckpt.arch.vocab_size_out ||
      static_cast<int>(ckpt.vocab.size()) != ckpt.arch.vocab_size_ctc) {
    fail(ErrorCode::IoError, "checkpoint vocabulary size disagrees with its output heads");
  }
  const std::uint32_t n_meta = read_count(r, 8);
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.string();
    ckpt.metadata[k] = r.string();
  }
  const std::uint32_t n_tensors = read_count(r, 8);
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = r.string();
    const std::uint32_t rank = read_count(r, 4);
    ad::Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    const std::int64_t n = ad::numel(shape);
    if (static_cast<std::uint64_t>(n) * 4 > r.remaining()) {
      fail(ErrorCode::IoError, "checkpoint tensor " + name + " is truncated");
    }
    std::vector<float> values(static_cast<std::size_t>(n));
    auto raw = r.bytes(values.size() * 4);
    for (std::size_t j = 0; j < values.size(); ++j) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) {
        u |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[j * 4 + b])) << (8 * b);
      }
      values[j] = std::bit_cast<float>(u);
    }
    ckpt.params.emplace(std::move(name), ad::Tensor<float>(std::move(shape), std::move(values)));
  }
  if (r.remaining() != 0) fail(ErrorCode::IoError, "trailing bytes after checkpoint body");
  // Validates names and shapes against the stored architecture.
  model::Model<float> check(ckpt.arch, ckpt.params);
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  // Write-then-rename so readers never observe a partial file.
  const std::filesystem::path tmp = path.string() + ".tmp";
  io::write_file(tmp, serialize(ckpt));
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorCode::IoError, "cannot rename " + tmp.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const model::ArchConfig* expected) {
  return deserialize(io::read_file(path), expected);
}

bool same_params(const model::Params<float>& a, const model::Params<float>& b) {
  if (a.size() != b.size()) return false;
  for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib) {
    if (ia->first != ib->first || ia->second.shape() != ib->second.shape()) return false;
    const auto va = ia->second.values();
    const auto vb = ib->second.values();
    if (std::memcmp(va.data(), vb.data(), va.size() * sizeof(float)) != 0) return false;
  }
  return true;
}

}  // namespace ipat::ckpt
