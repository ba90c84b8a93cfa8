#include "stridesense/features.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "stridesense/errors.hpp"

namespace stridesense {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

bool is_power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

// Iterative radix-2 complex FFT, in place. fft_size is validated as a power
// of two by StftConfig::validate().
void fft_inplace(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -kTwoPi / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> u = a[i + k];
        const std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

}  // namespace

void StftConfig::validate() const {
  if (window_length <= 0 || hop_length <= 0 || fft_size <= 0) {
    throw InvalidConfig("stft lengths must be positive");
  }
  if (hop_length > window_length || window_length > fft_size) {
    throw InvalidConfig("require hop_length <= window_length <= fft_size");
  }
  if (!is_power_of_two(fft_size)) {
    throw InvalidConfig("fft_size must be a power of two");
  }
}

void MelConfig::validate() const {
  if (n_mels < 1) throw InvalidConfig("n_mels must be >= 1");
  if (sample_rate <= 0) throw InvalidConfig("sample_rate must be positive");
  if (!(f_min >= 0.0 && f_min < f_max && f_max <= sample_rate / 2.0)) {
    throw InvalidConfig("require 0 <= f_min < f_max <= sample_rate/2");
  }
}

std::vector<double> hann_window(int n) {
  if (n < 1) throw InvalidConfig("window length must be >= 1");
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    w[k] = 0.5 * (1.0 - std::cos(kTwoPi * k / static_cast<double>(n)));
  }
  return w;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

int stft_frame_count(std::size_t n_samples, const StftConfig& cfg) {
  cfg.validate();
  if (n_samples < static_cast<std::size_t>(cfg.window_length)) {
    throw ClipTooShort("need at least " + std::to_string(cfg.window_length) + " samples, got " +
                       std::to_string(n_samples));
  }
  return 1 + static_cast<int>((n_samples - cfg.window_length) /
                              static_cast<std::size_t>(cfg.hop_length));
}

Stft stft(std::span<const float> samples, const StftConfig& cfg) {
  const int n_frames = stft_frame_count(samples.size(), cfg);
  const int n_bins = cfg.fft_size / 2 + 1;
  const auto window = hann_window(cfg.window_length);

  Stft out;
  out.n_frames = n_frames;
  out.n_bins = n_bins;
  out.values.resize(static_cast<std::size_t>(n_frames) * n_bins);

  std::vector<std::complex<double>> buf(static_cast<std::size_t>(cfg.fft_size));
  for (int t = 0; t < n_frames; ++t) {
    const std::size_t start = static_cast<std::size_t>(t) * cfg.hop_length;
    for (int k = 0; k < cfg.window_length; ++k) {
      buf[k] = std::complex<double>(static_cast<double>(samples[start + k]) * window[k], 0.0);
    }
    for (int k = cfg.window_length; k < cfg.fft_size; ++k) buf[k] = {0.0, 0.0};
    fft_inplace(buf);
    std::copy(buf.begin(), buf.begin() + n_bins,
              out.values.begin() + static_cast<std::size_t>(t) * n_bins);
  }
  return out;
}

std::vector<double> mel_filterbank(const MelConfig& cfg, int fft_size) {
  cfg.validate();
  if (fft_size <= 0) throw InvalidConfig("fft_size must be positive");
  const int n_bins = fft_size / 2 + 1;

  // n_mels + 2 points equally spaced on the mel scale; filter i spans
  // [point i, point i+2] with its peak at point i+1.
  std::vector<double> hz_points(static_cast<std::size_t>(cfg.n_mels) + 2);
  const double mel_lo = hz_to_mel(cfg.f_min);
  const double mel_hi = hz_to_mel(cfg.f_max);
  for (std::size_t i = 0; i < hz_points.size(); ++i) {
    const double mel = mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                                    static_cast<double>(cfg.n_mels + 1);
    hz_points[i] = mel_to_hz(mel);
  }

  std::vector<double> bank(static_cast<std::size_t>(cfg.n_mels) * n_bins, 0.0);
  const double bin_hz = static_cast<double>(cfg.sample_rate) / fft_size;
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double lower = hz_points[m];
    const double center = hz_points[m + 1];
    const double upper = hz_points[m + 2];
    bool any_positive = false;
    for (int b = 0; b < n_bins; ++b) {
      const double f = b * bin_hz;
      double w = 0.0;
      if (f > lower && f < upper) {
        w = f <= center ? (f - lower) / (center - lower) : (upper - f) / (upper - center);
      }
      if (w > 0.0) {
        bank[static_cast<std::size_t>(m) * n_bins + b] = w;
        any_positive = true;
      }
    }
    if (!any_positive) {
      throw DegenerateFilter("mel filter " + std::to_string(m) +
                             " has no positive weight at fft_size " + std::to_string(fft_size));
    }
  }
  return bank;
}

LogMelSpectrogram log_mel(const AudioClip& clip, const StftConfig& stft_cfg,
                          const MelConfig& mel_cfg) {
  require_rate(clip, mel_cfg.sample_rate);
  const Stft spec = stft(clip.samples, stft_cfg);
  const auto bank = mel_filterbank(mel_cfg, stft_cfg.fft_size);
  const int n_bins = spec.n_bins;

  LogMelSpectrogram out;
  out.n_frames = spec.n_frames;
  out.n_mels = mel_cfg.n_mels;
  out.hop_seconds = static_cast<double>(stft_cfg.hop_length) / mel_cfg.sample_rate;
  out.values.resize(static_cast<std::size_t>(spec.n_frames) * mel_cfg.n_mels);

  std::vector<double> power(static_cast<std::size_t>(n_bins));
  for (int t = 0; t < spec.n_frames; ++t) {
    const std::complex<double>* row = spec.values.data() + static_cast<std::size_t>(t) * n_bins;
    for (int b = 0; b < n_bins; ++b) power[b] = std::norm(row[b]);
    for (int m = 0; m < mel_cfg.n_mels; ++m) {
      const double* w = bank.data() + static_cast<std::size_t>(m) * n_bins;
      double acc = 0.0;
      for (int b = 0; b < n_bins; ++b) acc += w[b] * power[b];
      out.values[static_cast<std::size_t>(t) * mel_cfg.n_mels + m] =
          std::log(std::max(acc, kLogFloor));
    }
  }
  return out;
}

namespace {

constexpr char kFeatureMagic[4] = {'S', 'S', 'F', 'C'};
constexpr std::uint32_t kFeatureVersion = 1;

void put_u32(std::ofstream& out, std::uint32_t v) {
  const std::uint8_t b[4] = {static_cast<std::uint8_t>(v & 0xff),
                             static_cast<std::uint8_t>((v >> 8) & 0xff),
                             static_cast<std::uint8_t>((v >> 16) & 0xff),
                             static_cast<std::uint8_t>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::ifstream& in, const char* what) {
  std::uint8_t b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4) throw CorruptFile(std::string("truncated feature file at ") + what);
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

}  // namespace

void save_features(const std::filesystem::path& path, const LogMelSpectrogram& spec) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kFeatureMagic, 4);
  put_u32(out, kFeatureVersion);
  put_u32(out, static_cast<std::uint32_t>(spec.n_frames));
  put_u32(out, static_cast<std::uint32_t>(spec.n_mels));
  std::vector<float> row(static_cast<std::size_t>(spec.n_mels));
  for (int t = 0; t < spec.n_frames; ++t) {
    for (int m = 0; m < spec.n_mels; ++m) {
      row[m] = static_cast<float>(spec.at(t, m));
    }
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!out) throw IoError("short write to " + path.string());
}

LogMelSpectrogram load_features(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kFeatureMagic, 4) != 0) {
    throw CorruptFile("bad feature magic in " + path.string());
  }
  const std::uint32_t version = get_u32(in, "version");
  if (version != kFeatureVersion) {
    throw VersionMismatch("feature file version " + std::to_string(version) + ", expected " +
                          std::to_string(kFeatureVersion));
  }
  const std::uint32_t n_frames = get_u32(in, "n_frames");
  const std::uint32_t n_mels = get_u32(in, "n_mels");
  LogMelSpectrogram spec;
  spec.n_frames = static_cast<int>(n_frames);
  spec.n_mels = static_cast<int>(n_mels);
  spec.values.resize(static_cast<std::size_t>(n_frames) * n_mels);
  std::vector<float> row(n_mels);
  for (std::uint32_t t = 0; t < n_frames; ++t) {
    in.read(reinterpret_cast<char*>(row.data()),
            static_cast<std::streamsize>(row.size() * sizeof(float)));
    if (static_cast<std::size_t>(in.gcount()) != row.size() * sizeof(float)) {
      throw CorruptFile("truncated feature payload in " + path.string());
    }
    for (std::uint32_t m = 0; m < n_mels; ++m) {
      spec.values[static_cast<std::size_t>(t) * n_mels + m] = row[m];
    }
  }
  return spec;
}

}  // namespace stridesense
