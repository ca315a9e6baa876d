#include <doctest.h>

#include "ipat/checkpoint.hpp"
#include "ipat/error.hpp"
#include "ipat/io.hpp"
#include "oracles.hpp"

using namespace ipat;

namespace {

ckpt::Checkpoint sample() {
  ckpt::Checkpoint c;
  c.vocab = phoneset::Vocabulary(phoneset::VocabKind::Ipa, {"a", "b", "ː"});
  c.arch = model::ArchConfig::desk(6, static_cast<int>(c.vocab.size()));
  c.arch.enc_layers = 1;
  c.arch.dec_layers = 1;
  c.arch.d_model = 8;
  c.arch.d_ff = 8;
  c.arch.conv_kernel = 3;
  c.params = model::init_params<float>(c.arch, 11);
  c.provenance = {"pretrain_ipa:x+y", "adapted:z"};
  c.metadata = {{"seed", "11"}, {"averaged_epochs", "1,2"}};
  return c;
}

ErrorCode code_of(std::string_view bytes, const model::ArchConfig* expected = nullptr) {
  try {
    ckpt::deserialize(bytes, expected);
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::EmptyInput;  // stands for "no error"
}

}  // namespace

TEST_CASE("round trip") {
  const auto c = sample();
  const auto bytes = ckpt::serialize(c);
  CHECK(bytes.substr(0, 4) == "IPAT");
  const auto back = ckpt::deserialize(bytes);
  CHECK(back.arch == c.arch);
  CHECK(back.vocab == c.vocab);
  CHECK(back.provenance == c.provenance);
  CHECK(back.metadata == c.metadata);
  CHECK(ckpt::same_params(back.params, c.params));
  CHECK(ckpt::serialize(back) == bytes);

  testing::TempDir dir("ckpt");
  ckpt::save_checkpoint(dir / "c.bin", c);
  CHECK(io::read_file(dir / "c.bin") == bytes);
  CHECK(ckpt::same_params(ckpt::load_checkpoint(dir / "c.bin", &c.arch).params, c.params));
}

TEST_CASE("corrupt and incompatible input") {
  const auto c = sample();
  auto bytes = ckpt::serialize(c);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK(code_of(bad_magic) == ErrorCode::BadMagic);

  auto bad_version = bytes;
  bad_version[4] = static_cast<char>(ckpt::kFormatVersion + 1);
  CHECK(code_of(bad_version) == ErrorCode::VersionMismatch);

  for (std::size_t cut : {std::size_t{2}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    CHECK(code_of(std::string_view(bytes).substr(0, cut)) != ErrorCode::EmptyInput);
  }
  CHECK(code_of(bytes + "x") == ErrorCode::IoError);

  auto other = c.arch;
  other.d_model = 16;
  other.d_ff = 16;
  CHECK(code_of(bytes, &other) == ErrorCode::FingerprintMismatch);
  CHECK(code_of(bytes, &c.arch) == ErrorCode::EmptyInput);

  testing::TempDir dir("ckpt");
  CHECK_THROWS_AS(ckpt::load_checkpoint(dir / "missing.bin"), Error);
}

TEST_CASE("same_params is bitwise") {
  const auto c = sample();
  auto d = model::cast_params<float>(c.params);
  CHECK(ckpt::same_params(c.params, d));
  auto& t = d.begin()->second;
  t.values()[0] = std::nextafter(t.values()[0], 1e9f);
  CHECK_FALSE(ckpt::same_params(c.params, d));
  d.erase(d.begin());
  CHECK_FALSE(ckpt::same_params(c.params, d));
}
