#include <cstring>
#include <fstream>

#include <json.hpp>

#include "stridesense/model.hpp"

namespace stridesense {

void ModelConfig::validate() const {
  const auto ch = block_channels();
  for (int i = 1; i < 6; ++i) {
    if (ch[i] <= ch[i - 1]) {
      throw InvalidConfig("block channels must be strictly increasing, got " +
                          std::to_string(ch[i - 1]) + " then " + std::to_string(ch[i]));
    }
  }
  if (width_scale <= 0.0 || base_channels[5] * width_scale < 1.0) {
    throw InvalidConfig("width_scale too small: last block would have no channels");
  }
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) {
    throw InvalidConfig("dropout_p must be in [0, 1)");
  }
  if (n_mels < 64) {
    throw InvalidConfig("n_mels must be >= 64 so the mel axis survives the pooling schedule");
  }
}

std::uint32_t crc32(const std::uint8_t* data, std::size_t size, std::uint32_t seed) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = ~seed;
  for (std::size_t i = 0; i < size; ++i) {
    crc = table[(crc ^ data[i]) & 0xffu] ^ (crc >> 8);
  }
  return ~crc;
}

namespace {

constexpr char kCheckpointMagic[4] = {'S', 'S', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

void append_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(v & 0xff);
  out.push_back((v >> 8) & 0xff);
  out.push_back((v >> 16) & 0xff);
  out.push_back((v >> 24) & 0xff);
}

std::uint32_t take_u32(const std::vector<std::uint8_t>& bytes, std::size_t& pos,
                       const char* what) {
  if (pos + 4 > bytes.size()) {
    throw CorruptFile(std::string("checkpoint truncated at ") + what);
  }
  const std::uint32_t v = static_cast<std::uint32_t>(bytes[pos]) |
                          static_cast<std::uint32_t>(bytes[pos + 1]) << 8 |
                          static_cast<std::uint32_t>(bytes[pos + 2]) << 16 |
                          static_cast<std::uint32_t>(bytes[pos + 3]) << 24;
  pos += 4;
  return v;
}

nlohmann::ordered_json config_to_json(const ModelConfig& config,
                                      const std::optional<Standardization>& stats,
                                      const CheckpointMeta& meta) {
  nlohmann::ordered_json j;
  j["base_channels"] = config.base_channels;
  j["width_scale"] = config.width_scale;
  j["dropout_p"] = config.dropout_p;
  j["n_mels"] = config.n_mels;
  if (stats.has_value()) {
    j["standardization"] = {{"mean", stats->mean}, {"stddev", stats->stddev}};
  } else {
    j["standardization"] = nullptr;
  }
  j["meta"] = {{"epoch", meta.epoch}, {"dev_mae", meta.dev_mae}, {"dev_ccc", meta.dev_ccc}};
  return j;
}

struct ParsedConfig {
  ModelConfig config;
  std::optional<Standardization> stats;
  CheckpointMeta meta;
};

ParsedConfig config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFile(std::string("checkpoint config is not valid JSON: ") + e.what());
  }
  ParsedConfig out;
  try {
    const auto ch = j.at("base_channels");
    for (int i = 0; i < 6; ++i) out.config.base_channels[i] = ch.at(i).get<int>();
    out.config.width_scale = j.at("width_scale").get<double>();
    out.config.dropout_p = j.at("dropout_p").get<double>();
    out.config.n_mels = j.at("n_mels").get<int>();
    if (!j.at("standardization").is_null()) {
      Standardization st;
      st.mean = j.at("standardization").at("mean").get<std::vector<double>>();
      st.stddev = j.at("standardization").at("stddev").get<std::vector<double>>();
      out.stats = std::move(st);
    }
    if (j.contains("meta")) {
      // NaN metrics round-trip as JSON null
      auto number_or_nan = [](const nlohmann::json& m, const char* key) {
        return m.contains(key) && m[key].is_number()
                   ? m[key].get<double>()
                   : std::numeric_limits<double>::quiet_NaN();
      };
      if (j["meta"].contains("epoch") && j["meta"]["epoch"].is_number()) {
        out.meta.epoch = j["meta"]["epoch"].get<int>();
      }
      out.meta.dev_mae = number_or_nan(j["meta"], "dev_mae");
      out.meta.dev_ccc = number_or_nan(j["meta"], "dev_ccc");
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFile(std::string("checkpoint config is missing fields: ") + e.what());
  }
  return out;
}

}  // namespace

void write_raw_checkpoint(const std::filesystem::path& path, const RawCheckpoint& raw) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kCheckpointMagic, kCheckpointMagic + 4);
  append_u32(out, raw.version);
  append_u32(out, static_cast<std::uint32_t>(raw.config_json.size()));
  out.insert(out.end(), raw.config_json.begin(), raw.config_json.end());
  append_u32(out, static_cast<std::uint32_t>(raw.blobs.size()));
  for (const auto& blob : raw.blobs) {
    append_u32(out, static_cast<std::uint32_t>(blob.name.size()));
    out.insert(out.end(), blob.name.begin(), blob.name.end());
    append_u32(out, static_cast<std::uint32_t>(blob.shape.size()));
    std::size_t numel = 1;
    for (int d : blob.shape) {
      append_u32(out, static_cast<std::uint32_t>(d));
      numel *= static_cast<std::size_t>(d);
    }
    if (numel != blob.data.size()) {
      throw ShapeMismatch("blob '" + blob.name + "' shape does not match payload");
    }
    const std::size_t off = out.size();
    out.resize(off + blob.data.size() * 4);
    std::memcpy(out.data() + off, blob.data.data(), blob.data.size() * 4);
  }
  append_u32(out, crc32(out.data(), out.size()));

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("short write to " + path.string());
}

RawCheckpoint read_raw_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw CorruptFile("not a checkpoint file: " + path.string());
  }
  const std::uint32_t stored_crc = static_cast<std::uint32_t>(bytes[bytes.size() - 4]) |
                                   static_cast<std::uint32_t>(bytes[bytes.size() - 3]) << 8 |
                                   static_cast<std::uint32_t>(bytes[bytes.size() - 2]) << 16 |
                                   static_cast<std::uint32_t>(bytes[bytes.size() - 1]) << 24;
  if (crc32(bytes.data(), bytes.size() - 4) != stored_crc) {
    throw CorruptFile("checksum mismatch in " + path.string());
  }

  std::size_t pos = 4;
  RawCheckpoint raw;
  raw.version = take_u32(bytes, pos, "version");
  if (raw.version != kCheckpointVersion) {
    throw VersionMismatch("checkpoint version " + std::to_string(raw.version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  const std::uint32_t config_len = take_u32(bytes, pos, "config length");
  if (pos + config_len > bytes.size() - 4) throw CorruptFile("truncated config blob");
  raw.config_json.assign(bytes.begin() + pos, bytes.begin() + pos + config_len);
  pos += config_len;
  const std::uint32_t blob_count = take_u32(bytes, pos, "blob count");
  for (std::uint32_t i = 0; i < blob_count; ++i) {
    RawBlob blob;
    const std::uint32_t name_len = take_u32(bytes, pos, "name length");
    if (pos + name_len > bytes.size() - 4) throw CorruptFile("truncated blob name");
    blob.name.assign(bytes.begin() + pos, bytes.begin() + pos + name_len);
    pos += name_len;
    const std::uint32_t rank = take_u32(bytes, pos, "rank");
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint32_t extent = take_u32(bytes, pos, "extent");
      blob.shape.push_back(static_cast<int>(extent));
      numel *= extent;
    }
    if (pos + numel * 4 > bytes.size() - 4) throw CorruptFile("truncated blob payload");
    blob.data.resize(numel);
    std::memcpy(blob.data.data(), bytes.data() + pos, numel * 4);
    pos += numel * 4;
    raw.blobs.push_back(std::move(blob));
  }
  return raw;
}

void save_checkpoint(Cnn14<float>& model, const std::filesystem::path& path,
                     const CheckpointMeta& meta) {
  RawCheckpoint raw;
  raw.config_json =
      config_to_json(model.config(), model.standardization(), meta).dump();
  for (auto& [name, tensor] : model.named_parameters()) {
    raw.blobs.push_back({name, tensor.shape(), tensor.data()});
  }
  for (auto& [name, buffer] : model.named_buffers()) {
    raw.blobs.push_back({name, {static_cast<int>(buffer->size())}, *buffer});
  }
  write_raw_checkpoint(path, raw);
}

namespace {

void check_architecture(const ModelConfig& a, const ModelConfig& b) {
  if (a.block_channels() != b.block_channels() || a.n_mels != b.n_mels) {
    throw ShapeMismatch("checkpoint architecture does not match the requested config");
  }
}

}  // namespace

LoadedModel load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  const RawCheckpoint raw = read_raw_checkpoint(path);
  ParsedConfig parsed = config_from_json(raw.config_json);
  parsed.config.validate();
  if (expected != nullptr) check_architecture(parsed.config, *expected);

  LoadedModel out{Cnn14<float>(parsed.config, /*seed=*/0), parsed.meta};
  out.model.standardization() = parsed.stats;
  for (auto& [name, tensor] : out.model.named_parameters()) {
    const RawBlob* blob = raw.find(name);
    if (blob == nullptr) throw ShapeMismatch("checkpoint is missing parameter '" + name + "'");
    if (blob->shape != tensor.shape()) {
      throw ShapeMismatch("parameter '" + name + "' has shape " + nn::shape_str(blob->shape) +
                          ", expected " + nn::shape_str(tensor.shape()));
    }
    tensor.data() = blob->data;
  }
  for (auto& [name, buffer] : out.model.named_buffers()) {
    const RawBlob* blob = raw.find(name);
    if (blob == nullptr) throw ShapeMismatch("checkpoint is missing buffer '" + name + "'");
    if (blob->data.size() != buffer->size()) {
      throw ShapeMismatch("buffer '" + name + "' has wrong length");
    }
    *buffer = blob->data;
  }
  return out;
}

Cnn14<float> replace_head(const std::filesystem::path& path, std::uint64_t seed) {
  const RawCheckpoint raw = read_raw_checkpoint(path);
  ParsedConfig parsed = config_from_json(raw.config_json);
  parsed.config.validate();

  Cnn14<float> model(parsed.config, /*seed=*/0);
  model.standardization() = parsed.stats;
  for (auto& [name, tensor] : model.named_parameters()) {
    if (name.rfind("head.fc_out.", 0) == 0) continue;
    const RawBlob* blob = raw.find(name);
    if (blob == nullptr) {
      throw IncompatibleBackbone("checkpoint is missing backbone parameter '" + name + "'");
    }
    if (blob->shape != tensor.shape()) {
      throw IncompatibleBackbone("backbone parameter '" + name + "' has shape " +
                                 nn::shape_str(blob->shape) + ", expected " +
                                 nn::shape_str(tensor.shape()));
    }
    tensor.data() = blob->data;
  }
  for (auto& [name, buffer] : model.named_buffers()) {
    const RawBlob* blob = raw.find(name);
    if (blob == nullptr) {
      throw IncompatibleBackbone("checkpoint is missing backbone buffer '" + name + "'");
    }
    if (blob->data.size() != buffer->size()) {
      throw IncompatibleBackbone("backbone buffer '" + name + "' has wrong length");
    }
    *buffer = blob->data;
  }
  model.reinit_head(seed);
  return model;
}

}  // namespace stridesense
