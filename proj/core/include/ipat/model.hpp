#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ipat/autodiff.hpp"
#include "ipat/frontend.hpp"

namespace ipat::model {

using ad::Tape;
using ad::Tensor;

struct ArchConfig {
  int feat_dim = 80;
  int enc_layers = 18;
  int dec_layers = 2;
  int heads = 4;
  int d_model = 768;
  int d_ff = 2048;
  int conv_kernel = 31;
  int subsample_layers = 2;  // each a kernel-3, stride-2 convolution
  int subsample_stride = 2;
  int rel_clip = 16;  // relative positions beyond +-rel_clip share one embedding
  double dropout = 0.1;
  int vocab_size_out = 0;
  int vocab_size_ctc = 0;
  int max_decode_len = 512;

  /// Full-size layout: 18 encoder / 2 decoder layers, 4 heads, 768/2048.
  static ArchConfig full(int feat_dim, int vocab_size);
  /// Small layout for tests and single-core experiments.
  static ArchConfig desk(int feat_dim, int vocab_size);

  /// Throws BadConfig.
  void validate() const;
  /// Compatibility key stored in checkpoints. Covers every field that
  /// changes tensor names or shapes, plus the positional-encoding choice.
  std::string fingerprint() const;
  /// Flat key=value lines; from_text(to_text()) reproduces the config.
  std::string to_text() const;
  static ArchConfig from_text(const std::string& text);

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

/// Encoder output length after subsampling (ceil(T/2) per stride-2 layer).
int subsampled_length(int frames, const ArchConfig& arch);

template <typename T>
using Params = std::map<std::string, Tensor<T>>;

struct ParamSpec {
  std::string name;
  ad::Shape shape;
  enum class Init { Glorot, Zeros, Ones } init = Init::Glorot;
  std::int64_t fan_in = 0;
  std::int64_t fan_out = 0;
};

/// Every parameter of the architecture, in name order. Names depend only on
/// the config: encoder.*, ctc.*, decoder.*.
std::vector<ParamSpec> param_specs(const ArchConfig& arch);
std::int64_t param_count(const ArchConfig& arch);

/// Glorot-uniform matrices, zero biases, unit gains. Every tensor draws from
/// its own stream seeded by (seed, name), so re-initializing a subset with
/// the same seed reproduces the same values.
template <typename T>
Params<T> init_params(const ArchConfig& arch, std::uint64_t seed);
/// Initializes only the parameters whose name starts with one of `prefixes`.
template <typename T>
void init_subset(Params<T>& params, const ArchConfig& arch, std::uint64_t seed,
                 std::span<const std::string> prefixes);

template <typename U, typename T>
Params<U> cast_params(const Params<T>& params, bool requires_grad = false);

struct ForwardOptions {
  bool training = false;
  std::uint64_t dropout_seed = 0;
  std::int64_t step = 0;
};

template <typename T>
struct Encoded {
  Tensor<T> out;  // [B, T', d_model], padded frames zeroed
  std::vector<int> lengths;
};

/// Zero-padded [B, Tmax, F] batch from feature matrices.
template <typename T>
Tensor<T> feature_batch(std::span<const frontend::FeatureMatrix* const> feats,
                        std::vector<int>* lengths);

template <typename T>
struct DecoderCache {
  int beams = 0;
  int length = 0;  // tokens consumed so far
  std::vector<Tensor<T>> self_k;  // per layer, [beams, length, d]
  std::vector<Tensor<T>> self_v;
  std::vector<Tensor<T>> cross_k;  // per layer, [beams, T', d]
  std::vector<Tensor<T>> cross_v;
  std::vector<int> enc_lengths;
};

template <typename T>
class Model {
 public:
  Model() = default;
  Model(ArchConfig arch, Params<T> params);

  const ArchConfig& arch() const { return arch_; }
  Params<T>& params() { return params_; }
  const Params<T>& params() const { return params_; }
  const Tensor<T>& param(const std::string& name) const;

  /// feats: [B, T, F]; lengths[b] <= T.
  Encoded<T> encode(Tape<T>& tp, const Tensor<T>& feats, std::span<const int> lengths,
                    const ForwardOptions& opts = {}) const;
  /// CTC log-probabilities [B, T', vocab_size_ctc].
  Tensor<T> ctc_head(Tape<T>& tp, const Tensor<T>& enc_out) const;
  /// Teacher-forced decoder logits [B, U, vocab_size_out]; `ids` is
  /// [B, U] row-major, each row starting with <sos/eos>.
  Tensor<T> decode(Tape<T>& tp, const Encoded<T>& enc, std::span<const int> ids, int U,
                   const ForwardOptions& opts = {}) const;

  Tensor<T> conformer_block(Tape<T>& tp, int index, const Tensor<T>& x,
                            std::span<const int> lengths, const ForwardOptions& opts) const;
  Tensor<T> decoder_layer(Tape<T>& tp, int index, const Tensor<T>& x, const Encoded<T>& enc,
                          const ForwardOptions& opts) const;

  /// Incremental decoding against one encoded utterance (B == 1) expanded
  /// to `beams` rows.
  DecoderCache<T> start_decoding(const Encoded<T>& enc, int beams) const;
  /// Consumes the prefix tokens not yet in the cache (all prefixes have the
  /// same length and start with <sos/eos>) and returns next-token logits
  /// [beams, vocab_size_out]. Throws PrefixTooLong.
  Tensor<T> decode_step(DecoderCache<T>& cache, std::span<const std::vector<int>> prefixes) const;
  /// Keeps cache rows `parents` (beam search reordering).
  void reorder(DecoderCache<T>& cache, std::span<const int> parents) const;

 private:
  Tensor<T> feed_forward(Tape<T>& tp, const std::string& prefix, const Tensor<T>& x,
                         const ForwardOptions& opts, bool swish_act) const;
  Tensor<T> linear(Tape<T>& tp, const std::string& prefix, const Tensor<T>& x) const;
  Tensor<T> norm(Tape<T>& tp, const std::string& prefix, const Tensor<T>& x) const;
  Tensor<T> drop(Tape<T>& tp, const Tensor<T>& x, const ForwardOptions& opts,
                 const std::string& site) const;
  Tensor<T> embed_tokens(Tape<T>& tp, std::span<const int> ids, int B, int U, int start) const;

  ArchConfig arch_;
  Params<T> params_;
};

/// Sinusoidal position encoding rows [start, start + count) of width d.
std::vector<double> sinusoid_positions(int start, int count, int d);

}  // namespace ipat::model
