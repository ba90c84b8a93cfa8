#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "stridesense/dataset.hpp"
#include "stridesense/model.hpp"
#include "stridesense/nn.hpp"
#include "stridesense/optimizer.hpp"

namespace stridesense {

// Lin's concordance correlation coefficient with population (1/n) moments:
//   2*cov(x,y) / (var(x) + var(y) + (mean(x) - mean(y))^2 + 1e-8).
// The epsilon keeps constant-input batches finite instead of erroring.
double ccc(std::span<const double> x, std::span<const double> y);

constexpr double kCccEpsilon = 1e-8;

// 1 - ccc(pred, target), differentiable through pred.
template <class T>
nn::Tensor<T> ccc_loss(const nn::Tensor<T>& pred, std::span<const double> target) {
  if (static_cast<std::size_t>(pred.numel()) != target.size()) {
    throw LengthMismatch("ccc_loss: " + std::to_string(pred.numel()) + " predictions vs " +
                         std::to_string(target.size()) + " targets");
  }
  const std::size_t n = target.size();
  if (n < 2) throw TooShort("ccc_loss needs at least 2 items");

  double target_mean = 0.0;
  for (double v : target) target_mean += v;
  target_mean /= static_cast<double>(n);
  double target_var = 0.0;
  std::vector<T> centered_target(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double d = target[i] - target_mean;
    target_var += d * d;
    centered_target[i] = static_cast<T>(d);
  }
  target_var /= static_cast<double>(n);

  nn::Tensor<T> ct = nn::Tensor<T>::from_data({static_cast<int>(n)}, std::move(centered_target));
  nn::Tensor<T> pred_mean = nn::mean_all(pred);
  nn::Tensor<T> centered_pred = nn::sub(pred, pred_mean);
  nn::Tensor<T> cov = nn::mean_all(nn::mul(centered_pred, ct));
  nn::Tensor<T> pred_var = nn::mean_all(nn::mul(centered_pred, centered_pred));
  nn::Tensor<T> mean_gap = nn::add_const(pred_mean, static_cast<T>(-target_mean));
  nn::Tensor<T> denom = nn::add_const(nn::add(pred_var, nn::mul(mean_gap, mean_gap)),
                                      static_cast<T>(target_var + kCccEpsilon));
  nn::Tensor<T> concordance = nn::div(nn::mul_const(cov, T(2)), denom);
  return nn::rsub_const(T(1), concordance);
}

struct TrainConfig {
  int epochs = 50;
  int batch_size = 24;
  nn::SgdConfig optimizer;
  std::uint64_t shuffle_seed = 1;
  std::uint64_t dropout_seed = 2;
  int crop_frames = 0;  // 0 keeps the full segment
  bool verbose = false;
};

struct EpochStats {
  double train_loss = 0.0;
  double dev_mae = 0.0;
  double dev_ccc = 0.0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  int best_epoch = 0;  // 1-indexed, earliest maximum of dev CCC
};

// Earliest epoch maximizing dev CCC, 1-indexed.
int best_epoch_of(const std::vector<EpochStats>& epochs);

// Epoch loop: seeded shuffle, batches of `batch_size` on raw RPE targets
// (a trailing batch of one is dropped, CCC is undefined there), one optimizer
// step per batch, dev MAE/CCC in eval mode after every epoch. The model is
// left holding the parameters of the best dev-CCC epoch. Standardization
// statistics are (re)computed from the training features before the loop.
TrainHistory train(Cnn14<float>& model, const std::vector<Segment>& train_segments,
                   const std::vector<Segment>& dev_segments,
                   const std::filesystem::path& feature_base, const TrainConfig& config);

void save_history(const std::filesystem::path& path, const TrainHistory& history);

// Loads every segment's cached features, cropped to crop_frames when
// positive. All segments must share one frame count after cropping.
struct FeatureBatchSource {
  std::vector<std::vector<float>> features;  // per segment, row-major frames x mels
  std::vector<double> targets;
  int n_frames = 0;
  int n_mels = 0;

  static FeatureBatchSource load(const std::vector<Segment>& segments,
                                 const std::filesystem::path& feature_base, int crop_frames);

  // Stacks the given indices into an (B,1,T,M) tensor of raw features.
  nn::Tensor<float> batch(std::span<const std::size_t> indices) const;
};

Standardization compute_standardization(const FeatureBatchSource& source);

}  // namespace stridesense
