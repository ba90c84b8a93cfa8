#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "stridesense/nn.hpp"
#include "stridesense/rng.hpp"
#include "stridesense/tensor.hpp"

namespace stridesense {

// Six double-convolution blocks ending in pooled embeddings and two linear
// layers. Channel widths scale together so the full topology can run on a
// CPU at reduced width; width_scale 1 reproduces the standard widths.
struct ModelConfig {
  std::array<int, 6> base_channels{64, 128, 256, 512, 1024, 2048};
  double width_scale = 1.0;
  double dropout_p = 0.2;
  int n_mels = 64;

  std::array<int, 6> block_channels() const {
    std::array<int, 6> ch{};
    for (int i = 0; i < 6; ++i) {
      ch[i] = std::max<int>(1, static_cast<int>(std::llround(base_channels[i] * width_scale)));
    }
    return ch;
  }

  int embedding_dim() const { return block_channels()[5]; }

  void validate() const;
};

// Per-mel-bin input statistics, estimated on the training features and
// carried inside the checkpoint.
struct Standardization {
  std::vector<double> mean;
  std::vector<double> stddev;
};

struct CheckpointMeta {
  int epoch = -1;
  double dev_mae = std::numeric_limits<double>::quiet_NaN();
  double dev_ccc = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

template <class T>
struct Conv2dLayer {
  nn::Tensor<T> weight;  // (O,C,3,3)
  nn::Tensor<T> bias;    // (O)
};

template <class T>
struct BatchNormLayer {
  nn::Tensor<T> gamma, beta;                  // (C)
  mutable std::vector<T> running_mean, running_var;  // updated in train mode only
};

template <class T>
struct LinearLayer {
  nn::Tensor<T> weight;  // (O,F)
  nn::Tensor<T> bias;    // (O)
};

template <class T>
struct ConvBlock {
  Conv2dLayer<T> conv1, conv2;
  BatchNormLayer<T> bn1, bn2;
  int pool_stride = 2;
};

inline double kaiming_bound(int fan_in) { return std::sqrt(6.0 / static_cast<double>(fan_in)); }

template <class T>
nn::Tensor<T> kaiming_uniform(nn::Shape shape, int fan_in, Rng& rng) {
  const double bound = kaiming_bound(fan_in);
  std::vector<T> data(static_cast<std::size_t>(nn::shape_numel(shape)));
  for (auto& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
  return nn::Tensor<T>::from_data(std::move(shape), std::move(data), /*requires_grad=*/true);
}

}  // namespace detail

// The regressor. Forward maps standardized (N,1,T,n_mels) log-mel input to
// one prediction per item. Training-mode forward mutates batch-norm running
// stats, so a model под training is confined to one thread; eval-mode forward
// is const and safe to share.
template <class T>
class Cnn14 {
 public:
  Cnn14(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config.validate();
    const auto channels = config.block_channels();
    Rng rng(seed);
    int in_ch = 1;
    for (int b = 0; b < 6; ++b) {
      auto& block = blocks_[b];
      const int out_ch = channels[b];
      block.conv1.weight = detail::kaiming_uniform<T>({out_ch, in_ch, 3, 3}, in_ch * 9, rng);
      block.conv1.bias = nn::Tensor<T>::zeros({out_ch}, true);
      init_bn(block.bn1, out_ch);
      block.conv2.weight = detail::kaiming_uniform<T>({out_ch, out_ch, 3, 3}, out_ch * 9, rng);
      block.conv2.bias = nn::Tensor<T>::zeros({out_ch}, true);
      init_bn(block.bn2, out_ch);
      block.pool_stride = b < 5 ? 2 : 1;
      in_ch = out_ch;
    }
    const int emb = config.embedding_dim();
    fc1_.weight = detail::kaiming_uniform<T>({emb, emb}, emb, rng);
    fc1_.bias = nn::Tensor<T>::zeros({emb}, true);
    fc_out_.weight = detail::kaiming_uniform<T>({1, emb}, emb, rng);
    fc_out_.bias = nn::Tensor<T>::zeros({1}, true);
  }

  const ModelConfig& config() const { return config_; }

  std::optional<Standardization>& standardization() { return standardization_; }
  const std::optional<Standardization>& standardization() const { return standardization_; }

  // Re-initializes the output layer in place, forcing output dimension 1.
  void reinit_head(std::uint64_t seed) {
    Rng rng(seed);
    const int emb = config_.embedding_dim();
    fc_out_.weight = detail::kaiming_uniform<T>({1, emb}, emb, rng);
    fc_out_.bias = nn::Tensor<T>::zeros({1}, true);
  }

  nn::Tensor<T> forward(const nn::Tensor<T>& input, bool training, Rng* rng = nullptr) const {
    if (input.shape().size() != 4 || input.shape()[1] != 1 ||
        input.shape()[3] != config_.n_mels) {
      throw ShapeMismatch("forward expects (N,1,T," + std::to_string(config_.n_mels) +
                          "), got " + nn::shape_str(input.shape()));
    }
    const int t_extent = input.shape()[2];
    if (t_extent < 64) {
      throw InputTooShort("time extent " + std::to_string(t_extent) +
                          " < 64 frames; five halvings would collapse the map");
    }
    if (!standardization_.has_value()) {
      throw NotStandardized("model carries no input statistics; train or load a checkpoint first");
    }

    nn::Tensor<T> x = standardize(input);
    for (int b = 0; b < 6; ++b) {
      const auto& block = blocks_[b];
      x = nn::conv2d(x, block.conv1.weight, block.conv1.bias);
      x = nn::batchnorm2d(x, block.bn1.gamma, block.bn1.beta, block.bn1.running_mean,
                          block.bn1.running_var, training);
      x = nn::relu(x);
      x = nn::conv2d(x, block.conv2.weight, block.conv2.bias);
      x = nn::batchnorm2d(x, block.bn2.gamma, block.bn2.beta, block.bn2.running_mean,
                          block.bn2.running_var, training);
      x = nn::relu(x);
      x = nn::maxpool2d(x, block.pool_stride);
      x = nn::dropout(x, config_.dropout_p, training, rng);
    }
    // (N,C,T',M') -> mean over mel -> mean+max over time, summed.
    x = nn::mean_axis(x, 3);
    nn::Tensor<T> pooled = nn::add(nn::mean_axis(x, 2), nn::max_axis(x, 2));  // (N,C)
    nn::Tensor<T> h = nn::relu(nn::linear(pooled, fc1_.weight, fc1_.bias));
    h = nn::dropout(h, config_.dropout_p, training, rng);
    nn::Tensor<T> y = nn::linear(h, fc_out_.weight, fc_out_.bias);  // (N,1)
    return nn::reshape(y, {input.shape()[0]});
  }

  // Embedding before the head, used by shape tests.
  nn::Tensor<T> embed(const nn::Tensor<T>& input) const {
    nn::Tensor<T> x = standardize(input);
    for (int b = 0; b < 6; ++b) {
      const auto& block = blocks_[b];
      x = nn::conv2d(x, block.conv1.weight, block.conv1.bias);
      x = nn::batchnorm2d(x, block.bn1.gamma, block.bn1.beta, block.bn1.running_mean,
                          block.bn1.running_var, false);
      x = nn::relu(x);
      x = nn::conv2d(x, block.conv2.weight, block.conv2.bias);
      x = nn::batchnorm2d(x, block.bn2.gamma, block.bn2.beta, block.bn2.running_mean,
                          block.bn2.running_var, false);
      x = nn::relu(x);
      x = nn::maxpool2d(x, block.pool_stride);
    }
    x = nn::mean_axis(x, 3);
    return nn::add(nn::mean_axis(x, 2), nn::max_axis(x, 2));
  }

  std::vector<std::pair<std::string, nn::Tensor<T>>> named_parameters() {
    std::vector<std::pair<std::string, nn::Tensor<T>>> out;
    for (int b = 0; b < 6; ++b) {
      const std::string prefix = "block" + std::to_string(b + 1) + ".";
      out.emplace_back(prefix + "conv1.weight", blocks_[b].conv1.weight);
      out.emplace_back(prefix + "conv1.bias", blocks_[b].conv1.bias);
      out.emplace_back(prefix + "bn1.gamma", blocks_[b].bn1.gamma);
      out.emplace_back(prefix + "bn1.beta", blocks_[b].bn1.beta);
      out.emplace_back(prefix + "conv2.weight", blocks_[b].conv2.weight);
      out.emplace_back(prefix + "conv2.bias", blocks_[b].conv2.bias);
      out.emplace_back(prefix + "bn2.gamma", blocks_[b].bn2.gamma);
      out.emplace_back(prefix + "bn2.beta", blocks_[b].bn2.beta);
    }
    out.emplace_back("head.fc1.weight", fc1_.weight);
    out.emplace_back("head.fc1.bias", fc1_.bias);
    out.emplace_back("head.fc_out.weight", fc_out_.weight);
    out.emplace_back("head.fc_out.bias", fc_out_.bias);
    return out;
  }

  std::vector<nn::Tensor<T>> parameters() {
    std::vector<nn::Tensor<T>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  // Batch-norm running statistics; serialized alongside the parameters.
  std::vector<std::pair<std::string, std::vector<T>*>> named_buffers() const {
    std::vector<std::pair<std::string, std::vector<T>*>> out;
    for (int b = 0; b < 6; ++b) {
      const std::string prefix = "block" + std::to_string(b + 1) + ".";
      out.emplace_back(prefix + "bn1.running_mean", &blocks_[b].bn1.running_mean);
      out.emplace_back(prefix + "bn1.running_var", &blocks_[b].bn1.running_var);
      out.emplace_back(prefix + "bn2.running_mean", &blocks_[b].bn2.running_mean);
      out.emplace_back(prefix + "bn2.running_var", &blocks_[b].bn2.running_var);
    }
    return out;
  }

  std::int64_t parameter_count() {
    std::int64_t n = 0;
    for (auto& [name, t] : named_parameters()) n += t.numel();
    return n;
  }

  // Deep copy of all learnable state, used for best-epoch snapshots.
  struct Snapshot {
    std::vector<std::vector<T>> params;
    std::vector<std::vector<T>> buffers;
  };

  Snapshot snapshot() {
    Snapshot s;
    for (auto& [name, t] : named_parameters()) s.params.push_back(t.data());
    for (auto& [name, buf] : named_buffers()) s.buffers.push_back(*buf);
    return s;
  }

  void restore(const Snapshot& s) {
    auto params = named_parameters();
    auto buffers = named_buffers();
    if (s.params.size() != params.size() || s.buffers.size() != buffers.size()) {
      throw ShapeMismatch("snapshot does not match this architecture");
    }
    for (std::size_t i = 0; i < params.size(); ++i) params[i].second.data() = s.params[i];
    for (std::size_t i = 0; i < buffers.size(); ++i) *buffers[i].second = s.buffers[i];
  }

 private:
  void init_bn(detail::BatchNormLayer<T>& bn, int channels) {
    bn.gamma = nn::Tensor<T>::filled({channels}, T(1), true);
    bn.beta = nn::Tensor<T>::zeros({channels}, true);
    bn.running_mean.assign(static_cast<std::size_t>(channels), T(0));
    bn.running_var.assign(static_cast<std::size_t>(channels), T(1));
  }

  nn::Tensor<T> standardize(const nn::Tensor<T>& input) const {
    const auto& st = *standardization_;
    if (static_cast<int>(st.mean.size()) != config_.n_mels ||
        static_cast<int>(st.stddev.size()) != config_.n_mels) {
      throw NotStandardized("statistics dimension does not match n_mels");
    }
    const int mels = config_.n_mels;
    const auto& in = input.data();
    std::vector<T> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) {
      const int m = static_cast<int>(i % mels);
      out[i] = static_cast<T>((static_cast<double>(in[i]) - st.mean[m]) / st.stddev[m]);
    }
    return nn::Tensor<T>::from_data(input.shape(), std::move(out));
  }

  ModelConfig config_;
  std::array<detail::ConvBlock<T>, 6> blocks_;
  detail::LinearLayer<T> fc1_;
  detail::LinearLayer<T> fc_out_;
  std::optional<Standardization> standardization_;
};

// Expected embedding time extent for input extent t: five stride-2 halvings
// then one stride-1 kernel-2 pool.
inline int pooled_time_extent(int t) {
  for (int i = 0; i < 5; ++i) t /= 2;
  return t - 1;
}

// --- Checkpoint container -------------------------------------------------
// Layout (all little-endian): magic "SSCK", version u32, config JSON
// (u32 length + UTF-8 bytes), blob count u32, then per blob: name length u32,
// name bytes, rank u32, extents u32 each, f32 payload; trailing CRC-32 over
// everything before it.

struct RawBlob {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
};

struct RawCheckpoint {
  std::uint32_t version = 1;
  std::string config_json;
  std::vector<RawBlob> blobs;

  const RawBlob* find(const std::string& name) const {
    for (const auto& b : blobs) {
      if (b.name == name) return &b;
    }
    return nullptr;
  }
};

void write_raw_checkpoint(const std::filesystem::path& path, const RawCheckpoint& raw);
RawCheckpoint read_raw_checkpoint(const std::filesystem::path& path);

void save_checkpoint(Cnn14<float>& model, const std::filesystem::path& path,
                     const CheckpointMeta& meta = {});

struct LoadedModel {
  Cnn14<float> model;
  CheckpointMeta meta;
};

// Rebuilds the model described by the embedded config. When `expected` is
// given, its architecture must match the checkpoint's. Every parameter and
// buffer must be present with its exact shape.
LoadedModel load_checkpoint(const std::filesystem::path& path,
                            const ModelConfig* expected = nullptr);

// Copies every backbone blob from the checkpoint and re-initializes the final
// linear layer with the given seed, forcing output dimension 1. The source
// head may have any output dimension.
Cnn14<float> replace_head(const std::filesystem::path& path, std::uint64_t seed);

std::uint32_t crc32(const std::uint8_t* data, std::size_t size, std::uint32_t seed = 0);

}  // namespace stridesense
