#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace ipat::frontend {

/// T x F log-mel features, row-major.
struct FeatureMatrix {
  std::size_t num_frames = 0;
  std::size_t num_bins = 0;
  std::vector<float> data;
  double frame_shift_ms = 10.0;
  double frame_length_ms = 25.0;

  FeatureMatrix() = default;
  FeatureMatrix(std::size_t frames, std::size_t bins)
      : num_frames(frames), num_bins(bins), data(frames * bins, 0.0f) {}

  float& at(std::size_t t, std::size_t f) { return data[t * num_bins + f]; }
  float at(std::size_t t, std::size_t f) const { return data[t * num_bins + f]; }
  std::span<const float> row(std::size_t t) const {
    return std::span<const float>(data).subspan(t * num_bins, num_bins);
  }

  friend bool operator==(const FeatureMatrix&, const FeatureMatrix&) = default;
};

struct LogMelConfig {
  std::size_t n_fft = 512;
  std::size_t window = 400;  // samples (25 ms at 16 kHz)
  std::size_t hop = 160;     // samples (10 ms at 16 kHz)
  std::size_t num_mels = 80;
  double floor = 1e-10;
  double low_freq = 0.0;
  double high_freq = 0.0;  // <= 0 means Nyquist

  /// Stable text form; hashed into checkpoints so feature mismatches are
  /// detectable.
  std::string describe() const;
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);
/// Center frequency (Hz) of each triangular filter.
std::vector<double> mel_center_frequencies(const LogMelConfig& config, double rate);

/// 1 + floor((num_samples - window) / hop).
std::size_t frame_count(std::size_t num_samples, std::size_t window, std::size_t hop);

/// Hann-windowed magnitude STFT -> HTK-scale triangular mel filterbank ->
/// natural log with a floor clamp.
FeatureMatrix compute_logmel(std::span<const float> samples, double rate,
                             const LogMelConfig& config = {});

struct PcmAudio {
  double rate = 16000.0;
  std::vector<float> samples;  // mono, [-1, 1]
};

/// 16-bit PCM RIFF/WAVE reader (mono; multi-channel input is averaged).
PcmAudio read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const PcmAudio& audio);

/// Feature cache: little-endian {"FEAT", u32 T, u32 F} followed by T*F
/// float32 values.
void write_features(const std::filesystem::path& path, const FeatureMatrix& feats);
FeatureMatrix read_features(const std::filesystem::path& path);

}  // namespace ipat::frontend
