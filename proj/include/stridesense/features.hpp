#pragma once

#include <complex>
#include <filesystem>
#include <span>
#include <vector>

#include "stridesense/audio_io.hpp"

namespace stridesense {

// Framing parameters: 512-sample (32 ms) periodic Hann window, 160-sample
// (10 ms) hop, 512-point FFT at 16 kHz.
struct StftConfig {
  int window_length = 512;
  int hop_length = 160;
  int fft_size = 512;

  void validate() const;
};

struct MelConfig {
  int n_mels = 64;
  double f_min = 0.0;
  double f_max = 8000.0;
  int sample_rate = 16000;

  void validate() const;
};

struct Stft {
  std::vector<std::complex<double>> values;  // row-major n_frames x n_bins
  int n_frames = 0;
  int n_bins = 0;

  std::complex<double> at(int frame, int bin) const {
    return values[static_cast<std::size_t>(frame) * n_bins + bin];
  }
};

struct LogMelSpectrogram {
  std::vector<double> values;  // row-major n_frames x n_mels, natural-log energies
  int n_frames = 0;
  int n_mels = 0;
  double hop_seconds = 0.010;

  double at(int frame, int mel) const {
    return values[static_cast<std::size_t>(frame) * n_mels + mel];
  }
  std::span<const double> frame(int i) const {
    return {values.data() + static_cast<std::size_t>(i) * n_mels,
            static_cast<std::size_t>(n_mels)};
  }
};

// Periodic Hann: w[k] = 0.5 * (1 - cos(2*pi*k / n)).
std::vector<double> hann_window(int n);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Frames = 1 + floor((n_samples - window) / hop); no center padding, the
// trailing partial frame is dropped. Throws ClipTooShort below one window.
int stft_frame_count(std::size_t n_samples, const StftConfig& cfg);

// Windowed DFT per frame, non-negative frequency bins only.
Stft stft(std::span<const float> samples, const StftConfig& cfg);

// Triangular filters with peaks equally spaced on the mel scale between
// m(f_min) and m(f_max). Peak weight 1 (no area normalization). Returns a
// dense row-major matrix of shape n_mels x (fft_size/2 + 1).
std::vector<double> mel_filterbank(const MelConfig& cfg, int fft_size);

// |STFT|^2 projected through the filterbank, then ln(max(x, 1e-10)).
// The clip must already be at mel_cfg.sample_rate.
LogMelSpectrogram log_mel(const AudioClip& clip, const StftConfig& stft_cfg,
                          const MelConfig& mel_cfg);

constexpr double kLogFloor = 1e-10;

// Feature cache: 4-byte magic "SSFC", then version, n_frames, n_mels as
// unsigned 32-bit little-endian, then row-major IEEE 32-bit floats.
void save_features(const std::filesystem::path& path, const LogMelSpectrogram& spec);
LogMelSpectrogram load_features(const std::filesystem::path& path);

}  // namespace stridesense
