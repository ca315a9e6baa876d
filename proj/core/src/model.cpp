#include "ipat/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "ipat/error.hpp"
#include "ipat/phoneset.hpp"
#include "ipat/rng.hpp"
#include "ipat/text.hpp"

namespace ipat::model {

namespace {

void add_linear(std::vector<ParamSpec>& out, const std::string& prefix, std::int64_t in,
                std::int64_t outd) {
  out.push_back({prefix + ".weight", {in, outd}, ParamSpec::Init::Glorot, in, outd});
  out.push_back({prefix + ".bias", {outd}, ParamSpec::Init::Zeros, 0, 0});
}

void add_norm(std::vector<ParamSpec>& out, const std::string& prefix, std::int64_t d) {
  out.push_back({prefix + ".gain", {d}, ParamSpec::Init::Ones, 0, 0});
  out.push_back({prefix + ".bias", {d}, ParamSpec::Init::Zeros, 0, 0});
}

void add_attention(std::vector<ParamSpec>& out, const std::string& prefix, std::int64_t d) {
  add_norm(out, prefix + ".norm", d);
  for (const char* proj : {".query", ".key", ".value", ".out"}) add_linear(out, prefix + proj, d, d);
}

void add_ffn(std::vector<ParamSpec>& out, const std::string& prefix, std::int64_t d,
             std::int64_t ff) {
  add_norm(out, prefix + ".norm", d);
  add_linear(out, prefix + ".linear1", d, ff);
  add_linear(out, prefix + ".linear2", ff, d);
}

template <typename T>
void fill_param(Tensor<T>& t, const ParamSpec& spec, std::uint64_t seed) {
  auto v = t.values();
  switch (spec.init) {
    case ParamSpec::Init::Zeros:
      std::fill(v.begin(), v.end(), T(0));
      break;
    case ParamSpec::Init::Ones:
      std::fill(v.begin(), v.end(), T(1));
      break;
    case ParamSpec::Init::Glorot: {
      Rng rng(derive_seed(seed, spec.name));
      const double limit = std::sqrt(6.0 / static_cast<double>(spec.fan_in + spec.fan_out));
      for (auto& x : v) x = static_cast<T>(rng.uniform(-limit, limit));
      break;
    }
  }
}

int parse_int(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    fail(ErrorCode::BadConfig, "arch key " + key + " expects an integer, got '" + value + "'");
  }
}

}  // namespace

ArchConfig ArchConfig::full(int feat_dim, int vocab_size) {
  ArchConfig a;
  a.feat_dim = feat_dim;
  a.vocab_size_out = vocab_size;
  a.vocab_size_ctc = vocab_size;
  return a;
}

ArchConfig ArchConfig::desk(int feat_dim, int vocab_size) {
  ArchConfig a = full(feat_dim, vocab_size);
  a.enc_layers = 2;
  a.heads = 2;
  a.d_model = 64;
  a.d_ff = 128;
  a.conv_kernel = 7;
  return a;
}

void ArchConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) fail(ErrorCode::BadConfig, std::string(name) + " must be positive");
  };
  positive(feat_dim, "feat_dim");
  positive(enc_layers, "enc_layers");
  positive(dec_layers, "dec_layers");
  positive(heads, "heads");
  positive(d_model, "d_model");
  positive(d_ff, "d_ff");
  positive(conv_kernel, "conv_kernel");
  positive(subsample_layers, "subsample_layers");
  positive(max_decode_len, "max_decode_len");
  if (d_model % heads != 0) fail(ErrorCode::BadConfig, "d_model must be divisible by heads");
  if (conv_kernel % 2 == 0) fail(ErrorCode::BadConfig, "conv_kernel must be odd");
  if (subsample_stride != 2) fail(ErrorCode::BadConfig, "only stride-2 subsampling is supported");
  if (rel_clip < 0) fail(ErrorCode::BadConfig, "rel_clip must be non-negative");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail(ErrorCode::BadConfig, "dropout must be in [0, 1)");
  if (vocab_size_out <= phoneset::Vocabulary::kNumSpecials ||
      vocab_size_ctc <= phoneset::Vocabulary::kNumSpecials) {
    fail(ErrorCode::BadConfig, "vocabulary sizes must exceed the special-token count");
  }
}

std::string ArchConfig::fingerprint() const {
  std::ostringstream os;
  os << "conformer-v1;feat=" << feat_dim << ";enc=" << enc_layers << ";dec=" << dec_layers
     << ";heads=" << heads << ";d=" << d_model << ";ff=" << d_ff << ";kernel=" << conv_kernel
     << ";sub=" << subsample_layers << "x" << subsample_stride << ";pos=relative:" << rel_clip
     << ";vocab_out=" << vocab_size_out << ";vocab_ctc=" << vocab_size_ctc;
  return os.str();
}

std::string ArchConfig::to_text() const {
  char drop[64];
  std::snprintf(drop, sizeof drop, "%.17g", dropout);
  std::ostringstream os;
  os << "feat_dim=" << feat_dim << "\nenc_layers=" << enc_layers << "\ndec_layers=" << dec_layers
     << "\nheads=" << heads << "\nd_model=" << d_model << "\nd_ff=" << d_ff
     << "\nconv_kernel=" << conv_kernel << "\nsubsample_layers=" << subsample_layers
     << "\nsubsample_stride=" << subsample_stride << "\nrel_clip=" << rel_clip
     << "\ndropout=" << drop << "\nvocab_size_out=" << vocab_size_out
     << "\nvocab_size_ctc=" << vocab_size_ctc << "\nmax_decode_len=" << max_decode_len << "\n";
  return os.str();
}

ArchConfig ArchConfig::from_text(const std::string& text) {
  ArchConfig a;
  for (const auto& line : text::split_whitespace(text)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(ErrorCode::BadConfig, "bad arch line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "dropout") {
      a.dropout = std::stod(value);
    } else if (key == "feat_dim") {
      a.feat_dim = parse_int(key, value);
    } else if (key == "enc_layers") {
      a.enc_layers = parse_int(key, value);
    } else if (key == "dec_layers") {
      a.dec_layers = parse_int(key, value);
    } else if (key == "heads") {
      a.heads = parse_int(key, value);
    } else if (key == "d_model") {
      a.d_model = parse_int(key, value);
    } else if (key == "d_ff") {
      a.d_ff = parse_int(key, value);
    } else if (key == "conv_kernel") {
      a.conv_kernel = parse_int(key, value);
    } else if (key == "subsample_layers") {
      a.subsample_layers = parse_int(key, value);
    } else if (key == "subsample_stride") {
      a.subsample_stride = parse_int(key, value);
    } else if (key == "rel_clip") {
      a.rel_clip = parse_int(key, value);
    } else if (key == "vocab_size_out") {
      a.vocab_size_out = parse_int(key, value);
    } else if (key == "vocab_size_ctc") {
      a.vocab_size_ctc = parse_int(key, value);
    } else if (key == "max_decode_len") {
      a.max_decode_len = parse_int(key, value);
    } else {
      fail(ErrorCode::BadConfig, "unknown arch key '" + key + "'");
    }
  }
  return a;
}

int subsampled_length(int frames, const ArchConfig& arch) {
  int t = frames;
  for (int l = 0; l < arch.subsample_layers; ++l) t = (t + 1) / 2;
  return t;
}

std::vector<ParamSpec> param_specs(const ArchConfig& arch) {
  const std::int64_t d = arch.d_model;
  const std::int64_t ff = arch.d_ff;
  const std::int64_t k = arch.conv_kernel;
  std::vector<ParamSpec> out;
  for (int l = 0; l < arch.subsample_layers; ++l) {
    const std::string p = "encoder.subsample.conv" + std::to_string(l + 1);
    const std::int64_t in = l == 0 ? arch.feat_dim : d;
    out.push_back({p + ".weight", {3, in, d}, ParamSpec::Init::Glorot, 3 * in, 3 * d});
    out.push_back({p + ".bias", {d}, ParamSpec::Init::Zeros, 0, 0});
  }
  for (int i = 0; i < arch.enc_layers; ++i) {
    const std::string p = "encoder.block" + std::to_string(i);
    add_ffn(out, p + ".ff1", d, ff);
    add_attention(out, p + ".mhsa", d);
    const std::int64_t rel_rows = 2 * arch.rel_clip + 1;
    const std::int64_t dk = d / arch.heads;
    out.push_back({p + ".mhsa.rel_key", {rel_rows, dk}, ParamSpec::Init::Glorot, rel_rows, dk});
    add_norm(out, p + ".conv.norm", d);
    add_linear(out, p + ".conv.pointwise1", d, 2 * d);
    out.push_back({p + ".conv.depthwise.weight", {k, d}, ParamSpec::Init::Glorot, k, k});
    out.push_back({p + ".conv.depthwise.bias", {d}, ParamSpec::Init::Zeros, 0, 0});
    add_norm(out, p + ".conv.inner_norm", d);
    add_linear(out, p + ".conv.pointwise2", d, d);
    add_ffn(out, p + ".ff2", d, ff);
    add_norm(out, p + ".final_norm", d);
  }
  add_linear(out, "ctc", d, arch.vocab_size_ctc);
  out.push_back({"decoder.embed.weight", {arch.vocab_size_out, d}, ParamSpec::Init::Glorot,
                 arch.vocab_size_out, d});
  for (int i = 0; i < arch.dec_layers; ++i) {
    const std::string p = "decoder.layer" + std::to_string(i);
    add_attention(out, p + ".self_attn", d);
    add_attention(out, p + ".cross_attn", d);
    add_ffn(out, p + ".ff", d, ff);
  }
  add_norm(out, "decoder.final_norm", d);
  add_linear(out, "decoder.output", d, arch.vocab_size_out);
  std::sort(out.begin(), out.end(),
            [](const ParamSpec& a, const ParamSpec& b) { return a.name < b.name; });
  return out;
}

std::int64_t param_count(const ArchConfig& arch) {
  std::int64_t n = 0;
  for (const auto& s : param_specs(arch)) n += ad::numel(s.shape);
  return n;
}

template <typename T>
Params<T> init_params(const ArchConfig& arch, std::uint64_t seed) {
  arch.validate();
  Params<T> params;
  for (const auto& spec : param_specs(arch)) {
    Tensor<T> t(spec.shape, true);
    fill_param(t, spec, seed);
    params.emplace(spec.name, std::move(t));
  }
  return params;
}

template <typename T>
void init_subset(Params<T>& params, const ArchConfig& arch, std::uint64_t seed,
                 std::span<const std::string> prefixes) {
  arch.validate();
  for (const auto& spec : param_specs(arch)) {
    const bool selected = std::any_of(prefixes.begin(), prefixes.end(), [&](const std::string& p) {
      return spec.name.compare(0, p.size(), p) == 0;
    });
    if (!selected) continue;
    Tensor<T> t(spec.shape, true);
    fill_param(t, spec, seed);
    params.insert_or_assign(spec.name, std::move(t));
  }
}

template <typename U, typename T>
Params<U> cast_params(const Params<T>& params, bool requires_grad) {
  Params<U> out;
  for (const auto& [name, t] : params) {
    std::vector<U> values(t.values().begin(), t.values().end());
    out.emplace(name, Tensor<U>(t.shape(), std::move(values), requires_grad));
  }
  return out;
}

template <typename T>
Tensor<T> feature_batch(std::span<const frontend::FeatureMatrix* const> feats,
                        std::vector<int>* lengths) {
  std::size_t max_t = 0;
  std::size_t dim = feats.empty() ? 0 : feats[0]->num_bins;
  for (const auto* f : feats) {
    if (f->num_bins != dim) fail(ErrorCode::ShapeMismatch, "feature dimensions differ within batch");
    max_t = std::max(max_t, f->num_frames);
  }
  const auto B = static_cast<std::int64_t>(feats.size());
  Tensor<T> out(ad::Shape{B, static_cast<std::int64_t>(max_t), static_cast<std::int64_t>(dim)});
  if (lengths) lengths->clear();
  for (std::int64_t b = 0; b < B; ++b) {
    const auto* f = feats[b];
    std::copy(f->data.begin(), f->data.end(), out.data() + b * max_t * dim);
    if (lengths) lengths->push_back(static_cast<int>(f->num_frames));
  }
  return out;
}

std::vector<double> sinusoid_positions(int start, int count, int d) {
  std::vector<double> pe(static_cast<std::size_t>(count) * d);
  for (int p = 0; p < count; ++p) {
    const double pos = start + p;
    for (int i = 0; i < d; i += 2) {
      const double freq = std::exp(-std::log(10000.0) * i / d);
      pe[p * d + i] = std::sin(pos * freq);
      if (i + 1 < d) pe[p * d + i + 1] = std::cos(pos * freq);
    }
  }
  return pe;
}

// ---- Model ----------------------------------------------------------------

template <typename T>
Model<T>::Model(ArchConfig arch, Params<T> params) : arch_(arch), params_(std::move(params)) {
  arch_.validate();
  for (const auto& spec : param_specs(arch_)) {
    auto it = params_.find(spec.name);
    if (it == params_.end()) {
      fail(ErrorCode::ShapeMismatch, "missing parameter " + spec.name);
    }
    if (it->second.shape() != spec.shape) {
      fail(ErrorCode::ShapeMismatch, "parameter " + spec.name + " has shape " +
                                         ad::shape_str(it->second.shape()) + ", expected " +
                                         ad::shape_str(spec.shape));
    }
  }
  if (params_.size() != param_specs(arch_).size()) {
    fail(ErrorCode::ShapeMismatch, "unexpected extra parameters");
  }
}

template <typename T>
const Tensor<T>& Model<T>::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) fail(ErrorCode::ShapeMismatch, "no parameter named " + name);
  return it->second;
}

template <typename T>
Tensor<T> Model<T>::linear(Tape<T>& tp, const std::string& prefix, const Tensor<T>& x) const {
  return ad::add(tp, ad::matmul(tp, x, param(prefix + ".weight")), param(prefix + ".bias"));
}

template <typename T>
Tensor<T> Model<T>::norm(Tape<T>& tp, const std::string& prefix, const Tensor<T>& x) const {
  return ad::layer_norm(tp, x, param(prefix + ".gain"), param(prefix + ".bias"));
}

template <typename T>
Tensor<T> Model<T>::drop(Tape<T>& tp, const Tensor<T>& x, const ForwardOptions& opts,
                         const std::string& site) const {
  if (!opts.training || arch_.dropout == 0.0) return x;
  const std::uint64_t key =
      derive_seed(derive_seed(opts.dropout_seed, static_cast<std::uint64_t>(opts.step)), site);
  return ad::dropout(tp, x, arch_.dropout, key, true);
}

template <typename T>
Tensor<T> Model<T>::feed_forward(Tape<T>& tp, const std::string& prefix, const Tensor<T>& x,
                                 const ForwardOptions& opts, bool swish_act) const {
  Tensor<T> h = norm(tp, prefix + ".norm", x);
  h = linear(tp, prefix + ".linear1", h);
  h = swish_act ? ad::swish(tp, h) : ad::relu(tp, h);
  h = drop(tp, h, opts, prefix + ".inner");
  h = linear(tp, prefix + ".linear2", h);
  return drop(tp, h, opts, prefix + ".out");
}

template <typename T>
Encoded<T> Model<T>::encode(Tape<T>& tp, const Tensor<T>& feats, std::span<const int> lengths,
                            const ForwardOptions& opts) const {
  if (feats.rank() != 3 || feats.dim(2) != arch_.feat_dim) {
    fail(ErrorCode::ShapeMismatch, "encoder input " + ad::shape_str(feats.shape()) +
                                       " does not match feat_dim " + std::to_string(arch_.feat_dim));
  }
  if (static_cast<std::int64_t>(lengths.size()) != feats.dim(0)) {
    fail(ErrorCode::ShapeMismatch, "one length per batch entry required");
  }
  std::vector<int> lens(lengths.begin(), lengths.end());
  for (int len : lens) {
    if (len < 1 || len > feats.dim(1)) {
      fail(ErrorCode::ShapeMismatch, "utterance length " + std::to_string(len) + " outside [1, " +
                                         std::to_string(feats.dim(1)) + "]");
    }
  }
  Tensor<T> x = feats;
  for (int l = 0; l < arch_.subsample_layers; ++l) {
    const std::string p = "encoder.subsample.conv" + std::to_string(l + 1);
    x = ad::conv1d(tp, x, param(p + ".weight"), param(p + ".bias"), 2, 1);
    x = ad::relu(tp, x);
    for (int& len : lens) len = (len + 1) / 2;
    x = ad::length_mask(tp, x, std::span<const int>(lens));
  }
  x = drop(tp, x, opts, "encoder.subsample");
  for (int i = 0; i < arch_.enc_layers; ++i) x = conformer_block(tp, i, x, lens, opts);
  x = ad::length_mask(tp, x, std::span<const int>(lens));
  return Encoded<T>{x, lens};
}

template <typename T>
Tensor<T> Model<T>::conformer_block(Tape<T>& tp, int index, const Tensor<T>& x_in,
                                    std::span<const int> lengths, const ForwardOptions& opts) const {
  const std::string p = "encoder.block" + std::to_string(index);
  Tensor<T> x = x_in;
  x = ad::add(tp, x, ad::scale(tp, feed_forward(tp, p + ".ff1", x, opts, true), T(0.5)));

  Tensor<T> h = norm(tp, p + ".mhsa.norm", x);
  ad::AttentionMask mask;
  mask.key_lengths.assign(lengths.begin(), lengths.end());
  Tensor<T> a = ad::scaled_dot_attention(tp, linear(tp, p + ".mhsa.query", h),
                                         linear(tp, p + ".mhsa.key", h),
                                         linear(tp, p + ".mhsa.value", h), arch_.heads, mask,
                                         param(p + ".mhsa.rel_key"));
  x = ad::add(tp, x, drop(tp, linear(tp, p + ".mhsa.out", a), opts, p + ".mhsa"));

  Tensor<T> c = norm(tp, p + ".conv.norm", x);
  c = ad::glu(tp, linear(tp, p + ".conv.pointwise1", c));
  c = ad::length_mask(tp, c, lengths);
  c = ad::conv1d_depthwise(tp, c, param(p + ".conv.depthwise.weight"),
                           param(p + ".conv.depthwise.bias"));
  c = ad::swish(tp, norm(tp, p + ".conv.inner_norm", c));
  c = linear(tp, p + ".conv.pointwise2", c);
  x = ad::add(tp, x, drop(tp, c, opts, p + ".conv"));

  x = ad::add(tp, x, ad::scale(tp, feed_forward(tp, p + ".ff2", x, opts, true), T(0.5)));
  return norm(tp, p + ".final_norm", x);
}

template <typename T>
Tensor<T> Model<T>::ctc_head(Tape<T>& tp, const Tensor<T>& enc_out) const {
  return ad::log_softmax(tp, linear(tp, "ctc", enc_out), -1);
}

template <typename T>
Tensor<T> Model<T>::embed_tokens(Tape<T>& tp, std::span<const int> ids, int B, int U,
                                 int start) const {
  const int d = arch_.d_model;
  Tensor<T> e = ad::embedding_lookup(tp, param("decoder.embed.weight"), ids, ad::Shape{B, U});
  e = ad::scale(tp, e, static_cast<T>(std::sqrt(static_cast<double>(d))));
  const auto pe = sinusoid_positions(start, U, d);
  Tensor<T> pos(ad::Shape{U, d}, std::vector<T>(pe.begin(), pe.end()));
  return ad::add(tp, e, pos);
}

template <typename T>
Tensor<T> Model<T>::decoder_layer(Tape<T>& tp, int index, const Tensor<T>& x_in,
                                  const Encoded<T>& enc, const ForwardOptions& opts) const {
  const std::string p = "decoder.layer" + std::to_string(index);
  Tensor<T> x = x_in;
  Tensor<T> h = norm(tp, p + ".self_attn.norm", x);
  ad::AttentionMask causal;
  causal.causal = true;
  Tensor<T> a = ad::scaled_dot_attention(tp, linear(tp, p + ".self_attn.query", h),
                                         linear(tp, p + ".self_attn.key", h),
                                         linear(tp, p + ".self_attn.value", h), arch_.heads, causal);
  x = ad::add(tp, x, drop(tp, linear(tp, p + ".self_attn.out", a), opts, p + ".self_attn"));

  h = norm(tp, p + ".cross_attn.norm", x);
  ad::AttentionMask keys;
  keys.key_lengths = enc.lengths;
  a = ad::scaled_dot_attention(tp, linear(tp, p + ".cross_attn.query", h),
                               linear(tp, p + ".cross_attn.key", enc.out),
                               linear(tp, p + ".cross_attn.value", enc.out), arch_.heads, keys);
  x = ad::add(tp, x, drop(tp, linear(tp, p + ".cross_attn.out", a), opts, p + ".cross_attn"));

  return ad::add(tp, x, feed_forward(tp, p + ".ff", x, opts, false));
}

template <typename T>
Tensor<T> Model<T>::decode(Tape<T>& tp, const Encoded<T>& enc, std::span<const int> ids, int U,
                           const ForwardOptions& opts) const {
  const int B = static_cast<int>(enc.lengths.size());
  if (U < 1 || static_cast<std::int64_t>(ids.size()) != static_cast<std::int64_t>(B) * U) {
    fail(ErrorCode::ShapeMismatch, "decoder ids must be [B, U] with U >= 1");
  }
  if (U > arch_.max_decode_len) {
    fail(ErrorCode::PrefixTooLong, "decoder input of length " + std::to_string(U) +
                                       " exceeds max_decode_len " + std::to_string(arch_.max_decode_len));
  }
  Tensor<T> x = drop(tp, embed_tokens(tp, ids, B, U, 0), opts, "decoder.embed");
  for (int i = 0; i < arch_.dec_layers; ++i) x = decoder_layer(tp, i, x, enc, opts);
  x = norm(tp, "decoder.final_norm", x);
  return linear(tp, "decoder.output", x);
}

template <typename T>
DecoderCache<T> Model<T>::start_decoding(const Encoded<T>& enc, int beams) const {
  if (enc.lengths.size() != 1) fail(ErrorCode::ShapeMismatch, "incremental decoding needs B == 1");
  if (beams < 1) fail(ErrorCode::BadConfig, "beam count must be positive");
  Tape<T> tp;
  tp.set_grad_enabled(false);
  DecoderCache<T> cache;
  cache.beams = beams;
  cache.enc_lengths.assign(beams, enc.lengths[0]);
  const std::int64_t d = arch_.d_model;
  const std::int64_t Tk = enc.out.dim(1);
  for (int i = 0; i < arch_.dec_layers; ++i) {
    const std::string p = "decoder.layer" + std::to_string(i) + ".cross_attn";
    for (int which = 0; which < 2; ++which) {
      Tensor<T> proj = linear(tp, p + (which == 0 ? ".key" : ".value"), enc.out);
      Tensor<T> tiled(ad::Shape{beams, Tk, d});
      for (int b = 0; b < beams; ++b) {
        std::copy(proj.data(), proj.data() + Tk * d, tiled.data() + b * Tk * d);
      }
      (which == 0 ? cache.cross_k : cache.cross_v).push_back(tiled);
    }
    cache.self_k.emplace_back(ad::Shape{beams, 0, d});
    cache.self_v.emplace_back(ad::Shape{beams, 0, d});
  }
  return cache;
}

template <typename T>
Tensor<T> Model<T>::decode_step(DecoderCache<T>& cache,
                                std::span<const std::vector<int>> prefixes) const {
  if (static_cast<int>(prefixes.size()) != cache.beams) {
    fail(ErrorCode::ShapeMismatch, "one prefix per cached beam required");
  }
  const std::size_t len = prefixes[0].size();
  for (const auto& pfx : prefixes) {
    if (pfx.size() != len) fail(ErrorCode::ShapeMismatch, "prefixes differ in length");
    if (pfx.empty() || pfx[0] != phoneset::Vocabulary::kSosEos) {
      fail(ErrorCode::ShapeMismatch, "prefix must begin with <sos/eos>");
    }
  }
  if (static_cast<int>(len) > arch_.max_decode_len) {
    fail(ErrorCode::PrefixTooLong, "prefix of length " + std::to_string(len) +
                                       " exceeds max_decode_len " + std::to_string(arch_.max_decode_len));
  }
  if (static_cast<int>(len) <= cache.length) {
    fail(ErrorCode::ShapeMismatch, "prefix holds no tokens beyond the cached ones");
  }
  Tape<T> tp;
  tp.set_grad_enabled(false);
  const int B = cache.beams;
  ad::AttentionMask cross_mask;
  cross_mask.key_lengths = cache.enc_lengths;
  Tensor<T> x;
  for (int pos = cache.length; pos < static_cast<int>(len); ++pos) {
    std::vector<int> ids(B);
    for (int b = 0; b < B; ++b) ids[b] = prefixes[b][pos];
    x = embed_tokens(tp, ids, B, 1, pos);
    for (int i = 0; i < arch_.dec_layers; ++i) {
      const std::string p = "decoder.layer" + std::to_string(i);
      Tensor<T> h = norm(tp, p + ".self_attn.norm", x);
      const Tensor<T> k = linear(tp, p + ".self_attn.key", h);
      const Tensor<T> v = linear(tp, p + ".self_attn.value", h);
      const Tensor<T> ks[2] = {cache.self_k[i], k};
      const Tensor<T> vs[2] = {cache.self_v[i], v};
      cache.self_k[i] = ad::concat(tp, std::span<const Tensor<T>>(ks), 1);
      cache.self_v[i] = ad::concat(tp, std::span<const Tensor<T>>(vs), 1);
      Tensor<T> a = ad::scaled_dot_attention(tp, linear(tp, p + ".self_attn.query", h),
                                             cache.self_k[i], cache.self_v[i], arch_.heads, {});
      x = ad::add(tp, x, linear(tp, p + ".self_attn.out", a));
      h = norm(tp, p + ".cross_attn.norm", x);
      a = ad::scaled_dot_attention(tp, linear(tp, p + ".cross_attn.query", h), cache.cross_k[i],
                                   cache.cross_v[i], arch_.heads, cross_mask);
      x = ad::add(tp, x, linear(tp, p + ".cross_attn.out", a));
      x = ad::add(tp, x, feed_forward(tp, p + ".ff", x, {}, false));
    }
  }
  cache.length = static_cast<int>(len);
  x = norm(tp, "decoder.final_norm", x);
  return ad::reshape(tp, linear(tp, "decoder.output", x), ad::Shape{B, arch_.vocab_size_out});
}

template <typename T>
void Model<T>::reorder(DecoderCache<T>& cache, std::span<const int> parents) const {
  auto gather = [&](Tensor<T>& t) {
    const std::int64_t rows = t.dim(1) * t.dim(2);
    Tensor<T> out(ad::Shape{static_cast<std::int64_t>(parents.size()), t.dim(1), t.dim(2)});
    for (std::size_t i = 0; i < parents.size(); ++i) {
      if (parents[i] < 0 || parents[i] >= cache.beams) {
        fail(ErrorCode::IdOutOfRange, "beam parent index out of range");
      }
      std::copy(t.data() + parents[i] * rows, t.data() + (parents[i] + 1) * rows,
                out.data() + i * rows);
    }
    t = out;
  };
  for (auto* group : {&cache.self_k, &cache.self_v, &cache.cross_k, &cache.cross_v}) {
    for (auto& t : *group) gather(t);
  }
  std::vector<int> lens;
  for (int p : parents) lens.push_back(cache.enc_lengths[p]);
  cache.enc_lengths = lens;
  cache.beams = static_cast<int>(parents.size());
}

template Params<float> init_params<float>(const ArchConfig&, std::uint64_t);
template Params<double> init_params<double>(const ArchConfig&, std::uint64_t);
template void init_subset<float>(Params<float>&, const ArchConfig&, std::uint64_t,
                                 std::span<const std::string>);
template void init_subset<double>(Params<double>&, const ArchConfig&, std::uint64_t,
                                  std::span<const std::string>);
template Params<double> cast_params<double, float>(const Params<float>&, bool);
template Params<float> cast_params<float, double>(const Params<double>&, bool);
template Params<float> cast_params<float, float>(const Params<float>&, bool);
template Params<double> cast_params<double, double>(const Params<double>&, bool);
template Tensor<float> feature_batch<float>(std::span<const frontend::FeatureMatrix* const>,
                                            std::vector<int>*);
template Tensor<double> feature_batch<double>(std::span<const frontend::FeatureMatrix* const>,
                                              std::vector<int>*);
template class Model<float>;
template class Model<double>;

}  // namespace ipat::model
