#include "ipat/frontend.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <mutex>

#include "ipat/error.hpp"
#include "ipat/io.hpp"

namespace ipat::frontend {

namespace {

// FFTW planning is not thread-safe; execution on distinct buffers is.
std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

void validate(const LogMelConfig& c, double rate) {
  if (!(rate > 0.0)) fail(ErrorCode::BadConfig, "sample rate must be positive");
  if (c.hop == 0) fail(ErrorCode::BadConfig, "hop must be positive");
  if (c.window == 0) fail(ErrorCode::BadConfig, "window must be positive");
  if (c.hop > c.window) fail(ErrorCode::BadConfig, "hop exceeds window");
  if (c.num_mels < 2) fail(ErrorCode::BadConfig, "num_mels must be at least 2");
  if (c.n_fft < c.window) fail(ErrorCode::BadConfig, "n_fft smaller than window");
  if (!(c.floor > 0.0)) fail(ErrorCode::BadConfig, "log floor must be positive");
  const double high = c.high_freq > 0.0 ? c.high_freq : rate / 2.0;
  if (c.low_freq < 0.0 || high <= c.low_freq || high > rate / 2.0) {
    fail(ErrorCode::BadConfig, "invalid mel frequency range");
  }
}

}  // namespace

std::string LogMelConfig::describe() const {
  char buf[192];
  std::snprintf(buf, sizeof buf,
                "logmel;n_fft=%zu;window=%zu;hop=%zu;num_mels=%zu;floor=%.17g;low=%.17g;high=%.17g",
                n_fft, window, hop, num_mels, floor, low_freq, high_freq);
  return buf;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> mel_center_frequencies(const LogMelConfig& config, double rate) {
  validate(config, rate);
  const double high = config.high_freq > 0.0 ? config.high_freq : rate / 2.0;
  const double lo = hz_to_mel(config.low_freq);
  const double delta = (hz_to_mel(high) - lo) / static_cast<double>(config.num_mels + 1);
  std::vector<double> centers(config.num_mels);
  for (std::size_t m = 0; m < config.num_mels; ++m) {
    centers[m] = mel_to_hz(lo + static_cast<double>(m + 1) * delta);
  }
  return centers;
}

std::size_t frame_count(std::size_t num_samples, std::size_t window, std::size_t hop) {
  if (num_samples < window) return 0;
  return 1 + (num_samples - window) / hop;
}

FeatureMatrix compute_logmel(std::span<const float> samples, double rate,
                             const LogMelConfig& config) {
  validate(config, rate);
  if (samples.size() < config.window) {
    fail(ErrorCode::TooShort, std::to_string(samples.size()) + " samples is shorter than one " +
                                  std::to_string(config.window) + "-sample window");
  }
  const std::size_t frames = frame_count(samples.size(), config.window, config.hop);
  const std::size_t n_fft = config.n_fft;
  const std::size_t n_bins = n_fft / 2 + 1;

  std::vector<double> hann(config.window);
  for (std::size_t n = 0; n < config.window; ++n) {
    hann[n] = config.window == 1
                  ? 1.0
                  : 0.5 - 0.5 * std::cos(2.0 * M_PI * static_cast<double>(n) /
                                         static_cast<double>(config.window - 1));
  }

  // Triangular weights evaluated on the mel axis (HTK convention).
  const double high = config.high_freq > 0.0 ? config.high_freq : rate / 2.0;
  const double mel_lo = hz_to_mel(config.low_freq);
  const double delta = (hz_to_mel(high) - mel_lo) / static_cast<double>(config.num_mels + 1);
  std::vector<double> weights(config.num_mels * n_bins, 0.0);
  for (std::size_t m = 0; m < config.num_mels; ++m) {
    const double left = mel_lo + static_cast<double>(m) * delta;
    const double center = left + delta;
    const double right = center + delta;
    for (std::size_t j = 0; j < n_bins; ++j) {
      const double mel = hz_to_mel(static_cast<double>(j) * rate / static_cast<double>(n_fft));
      double w = 0.0;
      if (mel > left && mel <= center) {
        w = (mel - left) / (center - left);
      } else if (mel > center && mel < right) {
        w = (right - mel) / (right - center);
      }
      weights[m * n_bins + j] = w;
    }
  }

  double* in = fftw_alloc_real(n_fft);
  fftw_complex* out = fftw_alloc_complex(n_bins);
  fftw_plan plan;
  {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    plan = fftw_plan_dft_r2c_1d(static_cast<int>(n_fft), in, out, FFTW_ESTIMATE);
  }

  FeatureMatrix feats(frames, config.num_mels);
  feats.frame_length_ms = 1000.0 * static_cast<double>(config.window) / rate;
  feats.frame_shift_ms = 1000.0 * static_cast<double>(config.hop) / rate;
  std::vector<double> mag(n_bins);
  const double log_floor = std::log(config.floor);
  for (std::size_t t = 0; t < frames; ++t) {
    const std::size_t start = t * config.hop;
    for (std::size_t n = 0; n < n_fft; ++n) {
      in[n] = n < config.window ? static_cast<double>(samples[start + n]) * hann[n] : 0.0;
    }
    fftw_execute(plan);
    for (std::size_t j = 0; j < n_bins; ++j) mag[j] = std::hypot(out[j][0], out[j][1]);
    for (std::size_t m = 0; m < config.num_mels; ++m) {
      double e = 0.0;
      const double* w = &weights[m * n_bins];
      for (std::size_t j = 0; j < n_bins; ++j) e += w[j] * mag[j];
      feats.at(t, m) = static_cast<float>(e > config.floor ? std::log(e) : log_floor);
    }
  }

  {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
  fftw_free(in);
  fftw_free(out);
  return feats;
}

PcmAudio read_wav(const std::filesystem::path& path) {
  const std::string raw = io::read_file(path);
  io::BinaryReader r(raw);
  if (r.bytes(4) != "RIFF") fail(ErrorCode::BadMagic, path.string() + " is not a RIFF file");
  r.u32();
  if (r.bytes(4) != "WAVE") fail(ErrorCode::BadMagic, path.string() + " is not a WAVE file");
  std::uint32_t channels = 0;
  std::uint32_t rate = 0;
  std::uint32_t bits = 0;
  PcmAudio audio;
  bool have_data = false;
  while (r.remaining() >= 8 && !have_data) {
    const std::string id(r.bytes(4));
    const std::uint32_t size = r.u32();
    io::BinaryReader chunk(r.bytes(size));
    if (size % 2 == 1 && r.remaining() > 0) r.bytes(1);
    if (id == "fmt ") {
      const std::uint32_t format_and_channels = chunk.u32();
      if ((format_and_channels & 0xFFFF) != 1) fail(ErrorCode::MissingAudio, "only PCM WAV is supported");
      channels = format_and_channels >> 16;
      rate = chunk.u32();
      chunk.u32();
      bits = chunk.u32() >> 16;
    } else if (id == "data") {
      if (channels == 0 || bits != 16) fail(ErrorCode::MissingAudio, "expected 16-bit PCM WAV");
      const std::size_t frames = size / (2 * channels);
      audio.samples.resize(frames);
      for (std::size_t i = 0; i < frames; ++i) {
        double acc = 0.0;
        for (std::uint32_t c = 0; c < channels; ++c) {
          auto b = chunk.bytes(2);
          const auto v = static_cast<std::int16_t>(static_cast<std::uint16_t>(
              static_cast<unsigned char>(b[0]) | (static_cast<unsigned char>(b[1]) << 8)));
          acc += v / 32768.0;
        }
        audio.samples[i] = static_cast<float>(acc / channels);
      }
      have_data = true;
    }
  }
  if (!have_data) fail(ErrorCode::MissingAudio, path.string() + " has no data chunk");
  audio.rate = rate;
  return audio;
}

void write_wav(const std::filesystem::path& path, const PcmAudio& audio) {
  io::BinaryWriter w;
  const auto n = static_cast<std::uint32_t>(audio.samples.size());
  const auto rate = static_cast<std::uint32_t>(audio.rate);
  w.bytes("RIFF");
  w.u32(36 + 2 * n);
  w.bytes("WAVE");
  w.bytes("fmt ");
  w.u32(16);
  w.u32(1 | (1u << 16));
  w.u32(rate);
  w.u32(rate * 2);
  w.u32(2 | (16u << 16));
  w.bytes("data");
  w.u32(2 * n);
  for (float s : audio.samples) {
    const double c = std::clamp(static_cast<double>(s), -1.0, 1.0);
    const auto v = static_cast<std::int16_t>(std::lround(c * 32767.0));
    const auto u = static_cast<std::uint16_t>(v);
    const char b[2] = {static_cast<char>(u & 0xFF), static_cast<char>(u >> 8)};
    w.bytes(std::string_view(b, 2));
  }
  io::write_file(path, w.data());
}

void write_features(const std::filesystem::path& path, const FeatureMatrix& feats) {
  io::BinaryWriter w;
  w.bytes("FEAT");
  w.u32(static_cast<std::uint32_t>(feats.num_frames));
  w.u32(static_cast<std::uint32_t>(feats.num_bins));
  for (float v : feats.data) w.f32(v);
  io::write_file(path, w.data());
}

FeatureMatrix read_features(const std::filesystem::path& path) {
  const std::string raw = io::read_file(path);
  io::BinaryReader r(raw);
  if (r.remaining() < 4 || r.bytes(4) != "FEAT") {
    fail(ErrorCode::BadMagic, path.string() + " is not a feature cache file");
  }
  const std::uint32_t t = r.u32();
  const std::uint32_t f = r.u32();
  FeatureMatrix feats(t, f);
  for (auto& v : feats.data) v = r.f32();
  return feats;
}

}  // namespace ipat::frontend
