#include "stridesense/audio_io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "stridesense/errors.hpp"

namespace stridesense {

namespace {

struct Reader {
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;

  std::size_t remaining() const { return bytes.size() - pos; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw MalformedContainer(std::string("truncated ") + what);
    }
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = static_cast<std::uint32_t>(bytes[pos]) |
                      static_cast<std::uint32_t>(bytes[pos + 1]) << 8 |
                      static_cast<std::uint32_t>(bytes[pos + 2]) << 16 |
                      static_cast<std::uint32_t>(bytes[pos + 3]) << 24;
    pos += 4;
    return v;
  }

  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = static_cast<std::uint16_t>(bytes[pos] | bytes[pos + 1] << 8);
    pos += 2;
    return v;
  }

  void tag(char out[4], const char* what) {
    need(4, what);
    std::memcpy(out, bytes.data() + pos, 4);
    pos += 4;
  }

  void skip(std::size_t n, const char* what) {
    need(n, what);
    pos += n;
  }
};

struct FmtChunk {
  std::uint16_t format = 0;
  std::uint16_t channels = 0;
  std::uint32_t sample_rate = 0;
  std::uint16_t block_align = 0;
  std::uint16_t bits_per_sample = 0;
};

constexpr std::uint16_t kPcmFormat = 1;

}  // namespace

AudioClip decode_wav(std::span<const std::uint8_t> bytes) {
  Reader r{bytes};
  char tag[4];
  r.tag(tag, "RIFF header");
  if (std::memcmp(tag, "RIFF", 4) != 0) throw MalformedContainer("missing RIFF tag");
  r.u32("RIFF size");
  r.tag(tag, "WAVE tag");
  if (std::memcmp(tag, "WAVE", 4) != 0) throw MalformedContainer("missing WAVE tag");

  bool have_fmt = false;
  FmtChunk fmt;
  while (true) {
    if (r.remaining() == 0) throw MalformedContainer("no data chunk");
    r.tag(tag, "chunk id");
    const std::uint32_t size = r.u32("chunk size");
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      if (have_fmt) throw MalformedContainer("duplicate fmt chunk");
      if (size < 16) throw MalformedContainer("fmt chunk too small");
      const std::size_t end = r.pos + size;
      fmt.format = r.u16("fmt.format");
      fmt.channels = r.u16("fmt.channels");
      fmt.sample_rate = r.u32("fmt.sample_rate");
      r.u32("fmt.byte_rate");
      fmt.block_align = r.u16("fmt.block_align");
      fmt.bits_per_sample = r.u16("fmt.bits_per_sample");
      r.skip(end - r.pos, "fmt tail");
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      if (!have_fmt) throw MalformedContainer("data chunk before fmt chunk");
      if (fmt.format != kPcmFormat) {
        throw UnsupportedEncoding("only integer PCM is accepted, format tag " +
                                  std::to_string(fmt.format));
      }
      if (fmt.bits_per_sample != 16) {
        throw UnsupportedEncoding("only 16-bit depth is accepted, got " +
                                  std::to_string(fmt.bits_per_sample));
      }
      if (fmt.channels != 1 && fmt.channels != 2) {
        throw UnsupportedEncoding("only 1 or 2 channels are accepted, got " +
                                  std::to_string(fmt.channels));
      }
      if (fmt.sample_rate == 0) throw MalformedContainer("zero sample rate");
      const std::size_t bytes_per_frame = 2u * fmt.channels;
      if (size % bytes_per_frame != 0) {
        throw MalformedContainer("data size is not a whole number of frames");
      }
      r.need(size, "data payload");
      const std::size_t n_frames = size / bytes_per_frame;
      if (n_frames == 0) throw EmptyAudio("data chunk holds zero frames");

      const std::uint8_t* p = bytes.data() + r.pos;
      AudioClip clip;
      clip.sample_rate = static_cast<int>(fmt.sample_rate);
      clip.channel_count_original = fmt.channels;
      clip.samples.resize(n_frames);
      if (fmt.channels == 1) {
        for (std::size_t i = 0; i < n_frames; ++i) {
          const std::int16_t s = static_cast<std::int16_t>(p[2 * i] | p[2 * i + 1] << 8);
          clip.samples[i] = static_cast<float>(s) / 32768.0f;
        }
      } else {
        for (std::size_t i = 0; i < n_frames; ++i) {
          const std::int16_t l = static_cast<std::int16_t>(p[4 * i] | p[4 * i + 1] << 8);
          const std::int16_t rch = static_cast<std::int16_t>(p[4 * i + 2] | p[4 * i + 3] << 8);
          clip.samples[i] =
              (static_cast<float>(l) / 32768.0f + static_cast<float>(rch) / 32768.0f) * 0.5f;
        }
      }
      return clip;  // chunks after data are ignored
    } else {
      r.skip(size + (size & 1), "chunk payload");  // chunks are word-aligned
    }
  }
}

AudioClip decode_wav_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_wav(bytes);
}

std::vector<std::uint8_t> encode_wav(std::span<const float> samples, int sample_rate) {
  if (sample_rate <= 0) throw MalformedContainer("sample rate must be positive");
  if (samples.empty()) throw EmptyAudio("cannot encode zero samples");
  const std::uint32_t data_size = static_cast<std::uint32_t>(samples.size() * 2);
  std::vector<std::uint8_t> out;
  out.reserve(44 + data_size);

  auto push_tag = [&](const char* t) { out.insert(out.end(), t, t + 4); };
  auto push_u32 = [&](std::uint32_t v) {
    out.push_back(v & 0xff);
    out.push_back((v >> 8) & 0xff);
    out.push_back((v >> 16) & 0xff);
    out.push_back((v >> 24) & 0xff);
  };
  auto push_u16 = [&](std::uint16_t v) {
    out.push_back(v & 0xff);
    out.push_back((v >> 8) & 0xff);
  };

  push_tag("RIFF");
  push_u32(36 + data_size);
  push_tag("WAVE");
  push_tag("fmt ");
  push_u32(16);
  push_u16(kPcmFormat);
  push_u16(1);  // mono
  push_u32(static_cast<std::uint32_t>(sample_rate));
  push_u32(static_cast<std::uint32_t>(sample_rate) * 2);
  push_u16(2);
  push_u16(16);
  push_tag("data");
  push_u32(data_size);
  for (float s : samples) {
    double q = std::nearbyint(static_cast<double>(s) * 32768.0);
    if (q > 32767.0) q = 32767.0;
    if (q < -32768.0) q = -32768.0;
    const std::int16_t v = static_cast<std::int16_t>(q);
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
  }
  return out;
}

void encode_wav_file(const std::filesystem::path& path, std::span<const float> samples,
                     int sample_rate) {
  const auto bytes = encode_wav(samples, sample_rate);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

std::vector<float> downmix_to_mono(std::span<const float> left, std::span<const float> right) {
  if (left.size() != right.size()) {
    throw LengthMismatch("channel lengths differ: " + std::to_string(left.size()) + " vs " +
                         std::to_string(right.size()));
  }
  std::vector<float> mono(left.size());
  for (std::size_t i = 0; i < left.size(); ++i) {
    mono[i] = (left[i] + right[i]) * 0.5f;
  }
  return mono;
}

const AudioClip& require_rate(const AudioClip& clip, int expected_hz) {
  if (clip.sample_rate != expected_hz) {
    throw SampleRateMismatch("found " + std::to_string(clip.sample_rate) + " Hz, expected " +
                             std::to_string(expected_hz) + " Hz");
  }
  return clip;
}

WavInfo probe_wav_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  // Header plus chunk table fits comfortably in 64 KiB for the corpus files;
  // data payload length comes from the chunk size field.
  std::vector<std::uint8_t> head(65536);
  in.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
  head.resize(static_cast<std::size_t>(in.gcount()));

  Reader r{head};
  char tag[4];
  r.tag(tag, "RIFF header");
  if (std::memcmp(tag, "RIFF", 4) != 0) throw MalformedContainer("missing RIFF tag");
  r.u32("RIFF size");
  r.tag(tag, "WAVE tag");
  if (std::memcmp(tag, "WAVE", 4) != 0) throw MalformedContainer("missing WAVE tag");

  WavInfo info;
  bool have_fmt = false;
  std::uint16_t block_align = 0;
  while (r.remaining() >= 8) {
    r.tag(tag, "chunk id");
    const std::uint32_t size = r.u32("chunk size");
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      if (have_fmt) throw MalformedContainer("duplicate fmt chunk");
      if (size < 16) throw MalformedContainer("fmt chunk too small");
      const std::size_t end = r.pos + size;
      r.u16("fmt.format");
      info.channels = r.u16("fmt.channels");
      info.sample_rate = static_cast<int>(r.u32("fmt.sample_rate"));
      r.u32("fmt.byte_rate");
      block_align = r.u16("fmt.block_align");
      r.u16("fmt.bits_per_sample");
      r.skip(end - r.pos, "fmt tail");
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      if (!have_fmt) throw MalformedContainer("data chunk before fmt chunk");
      if (block_align == 0) throw MalformedContainer("zero block alignment");
      info.frames = size / block_align;
      return info;
    } else {
      if (r.remaining() < size + (size & 1)) break;
      r.skip(size + (size & 1), "chunk payload");
    }
  }
  throw MalformedContainer("no data chunk in header of " + path.string());
}

}  // namespace stridesense
