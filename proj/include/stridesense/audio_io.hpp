#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace stridesense {

// Decoded mono audio. Samples live in [-1, 1]; the sample rate is recorded
// verbatim from the container header.
struct AudioClip {
  std::vector<float> samples;
  int sample_rate = 0;
  int channel_count_original = 0;

  double duration_seconds() const {
    return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
  }
};

// Decodes a RIFF/WAVE container holding 16-bit integer PCM with one or two
// channels. Stereo input is downmixed to mono; integer samples are scaled by
// 1/32768. Chunks after `data` are ignored, duplicate `fmt ` chunks are an
// error.
AudioClip decode_wav(std::span<const std::uint8_t> bytes);
AudioClip decode_wav_file(const std::filesystem::path& path);

// Encodes mono samples as 16-bit PCM little-endian WAV. Values are scaled by
// 32768, rounded to nearest and clamped to [-32768, 32767].
std::vector<std::uint8_t> encode_wav(std::span<const float> samples, int sample_rate);
void encode_wav_file(const std::filesystem::path& path, std::span<const float> samples,
                     int sample_rate);

// Element-wise mean of two equal-length channels.
std::vector<float> downmix_to_mono(std::span<const float> left, std::span<const float> right);

// Returns the clip unchanged when the rate matches, throws SampleRateMismatch
// otherwise. The pipeline never resamples.
const AudioClip& require_rate(const AudioClip& clip, int expected_hz);

// Reads duration and sample rate from the header alone, without decoding the
// payload. Used when cutting segments from long session recordings.
struct WavInfo {
  int sample_rate = 0;
  int channels = 0;
  std::uint64_t frames = 0;
  double duration_seconds() const {
    return sample_rate > 0 ? static_cast<double>(frames) / sample_rate : 0.0;
  }
};
WavInfo probe_wav_file(const std::filesystem::path& path);

}  // namespace stridesense
