#include "stridesense/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "stridesense/csv.hpp"
#include "stridesense/features.hpp"
#include "stridesense/rng.hpp"

namespace stridesense {

double ccc(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw LengthMismatch("ccc: " + std::to_string(x.size()) + " vs " + std::to_string(y.size()));
  }
  const std::size_t n = x.size();
  if (n < 2) throw TooShort("ccc needs at least 2 items");

  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double vx = 0.0, vy = 0.0, cov = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    vx += dx * dx;
    vy += dy * dy;
    cov += dx * dy;
  }
  vx /= static_cast<double>(n);
  vy /= static_cast<double>(n);
  cov /= static_cast<double>(n);
  const double gap = mx - my;
  return 2.0 * cov / (vx + vy + gap * gap + kCccEpsilon);
}

FeatureBatchSource FeatureBatchSource::load(const std::vector<Segment>& segments,
                                            const std::filesystem::path& feature_base,
                                            int crop_frames) {
  FeatureBatchSource src;
  src.features.reserve(segments.size());
  src.targets.reserve(segments.size());
  for (const auto& seg : segments) {
    if (seg.feature_path.empty()) {
      throw MissingFeatures("segment " + segment_id(seg) + " has no feature file; run featurize");
    }
    std::filesystem::path path(seg.feature_path);
    if (!path.is_absolute()) path = feature_base / path;
    if (!std::filesystem::exists(path)) {
      throw MissingFeatures("feature file " + path.string() + " does not exist");
    }
    const LogMelSpectrogram spec = load_features(path);
    int frames = spec.n_frames;
    if (crop_frames > 0) {
      if (spec.n_frames < crop_frames) {
        throw InputTooShort("segment " + segment_id(seg) + " has " +
                            std::to_string(spec.n_frames) + " frames, crop needs " +
                            std::to_string(crop_frames));
      }
      frames = crop_frames;
    }
    if (src.features.empty()) {
      src.n_frames = frames;
      src.n_mels = spec.n_mels;
    } else if (frames != src.n_frames || spec.n_mels != src.n_mels) {
      throw ShapeMismatch("segment " + segment_id(seg) + " features are " +
                          std::to_string(frames) + "x" + std::to_string(spec.n_mels) +
                          ", expected " + std::to_string(src.n_frames) + "x" +
                          std::to_string(src.n_mels));
    }
    std::vector<float> values(static_cast<std::size_t>(frames) * spec.n_mels);
    for (std::size_t i = 0; i < values.size(); ++i) {
      values[i] = static_cast<float>(spec.values[i]);
    }
    src.features.push_back(std::move(values));
    src.targets.push_back(static_cast<double>(seg.fatigue));
  }
  return src;
}

nn::Tensor<float> FeatureBatchSource::batch(std::span<const std::size_t> indices) const {
  const std::size_t item = static_cast<std::size_t>(n_frames) * n_mels;
  std::vector<float> data(indices.size() * item);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    std::copy(features[indices[b]].begin(), features[indices[b]].end(),
              data.begin() + b * item);
  }
  return nn::Tensor<float>::from_data(
      {static_cast<int>(indices.size()), 1, n_frames, n_mels}, std::move(data));
}

Standardization compute_standardization(const FeatureBatchSource& source) {
  const int mels = source.n_mels;
  std::vector<double> sum(mels, 0.0), sumsq(mels, 0.0);
  std::size_t frames = 0;
  for (const auto& item : source.features) {
    const std::size_t rows = item.size() / mels;
    for (std::size_t r = 0; r < rows; ++r) {
      const float* row = item.data() + r * mels;
      for (int m = 0; m < mels; ++m) {
        const double v = static_cast<double>(row[m]);
        sum[m] += v;
        sumsq[m] += v * v;
      }
    }
    frames += rows;
  }
  if (frames == 0) throw EmptyPartition("no frames to standardize");
  Standardization st;
  st.mean.resize(mels);
  st.stddev.resize(mels);
  for (int m = 0; m < mels; ++m) {
    st.mean[m] = sum[m] / static_cast<double>(frames);
    const double var = std::max(0.0, sumsq[m] / static_cast<double>(frames) -
                                         st.mean[m] * st.mean[m]);
    st.stddev[m] = std::max(std::sqrt(var), 1e-8);
  }
  return st;
}

int best_epoch_of(const std::vector<EpochStats>& epochs) {
  if (epochs.empty()) throw EmptyInput("no epochs recorded");
  int best = 1;
  for (std::size_t i = 1; i < epochs.size(); ++i) {
    if (epochs[i].dev_ccc > epochs[best - 1].dev_ccc) {
      best = static_cast<int>(i) + 1;
    }
  }
  return best;
}

namespace {

// Dev metrics in eval mode, batched to bound memory.
std::pair<double, double> dev_metrics(const Cnn14<float>& model, const FeatureBatchSource& dev,
                                      int batch_size) {
  std::vector<double> preds;
  preds.reserve(dev.targets.size());
  std::vector<std::size_t> indices;
  for (std::size_t start = 0; start < dev.targets.size(); start += batch_size) {
    const std::size_t end = std::min(dev.targets.size(), start + batch_size);
    indices.clear();
    for (std::size_t i = start; i < end; ++i) indices.push_back(i);
    nn::Tensor<float> out = model.forward(dev.batch(indices), /*training=*/false);
    for (float v : out.data()) preds.push_back(static_cast<double>(v));
  }
  double abs_err = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    abs_err += std::abs(preds[i] - dev.targets[i]);
  }
  const double mae = abs_err / static_cast<double>(preds.size());
  const double concordance = ccc(preds, dev.targets);
  return {mae, concordance};
}

}  // namespace

TrainHistory train(Cnn14<float>& model, const std::vector<Segment>& train_segments,
                   const std::vector<Segment>& dev_segments,
                   const std::filesystem::path& feature_base, const TrainConfig& config) {
  if (config.epochs < 1) throw InvalidConfig("epochs must be >= 1");
  if (config.batch_size < 2) throw InvalidConfig("batch_size must be >= 2, CCC needs pairs");
  if (train_segments.size() < 2) {
    throw EmptyPartition("train partition has " + std::to_string(train_segments.size()) +
                         " segments, need >= 2");
  }
  if (dev_segments.size() < 2) {
    throw EmptyPartition("dev partition has " + std::to_string(dev_segments.size()) +
                         " segments, need >= 2");
  }

  const FeatureBatchSource train_src =
      FeatureBatchSource::load(train_segments, feature_base, config.crop_frames);
  const FeatureBatchSource dev_src =
      FeatureBatchSource::load(dev_segments, feature_base, config.crop_frames);
  model.standardization() = compute_standardization(train_src);

  nn::Sgd<float> optimizer(model.parameters(), config.optimizer);
  Rng shuffle_rng(config.shuffle_seed);
  Rng dropout_rng(config.dropout_seed);

  TrainHistory history;
  double best_ccc = -std::numeric_limits<double>::infinity();
  Cnn14<float>::Snapshot best_snapshot;

  std::vector<std::size_t> order(train_src.targets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    shuffle_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    int batch_count = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      if (end - start < 2) break;  // CCC undefined on a single item
      std::span<const std::size_t> indices(order.data() + start, end - start);
      std::vector<double> targets(indices.size());
      for (std::size_t i = 0; i < indices.size(); ++i) {
        targets[i] = train_src.targets[indices[i]];
      }
      nn::Tensor<float> pred =
          model.forward(train_src.batch(indices), /*training=*/true, &dropout_rng);
      nn::Tensor<float> loss = ccc_loss(pred, targets);
      loss_sum += static_cast<double>(loss.value());
      ++batch_count;
      loss.backward();
      optimizer.step();
      optimizer.zero_grad();
    }

    EpochStats stats;
    stats.train_loss = batch_count > 0 ? loss_sum / batch_count : 0.0;
    std::tie(stats.dev_mae, stats.dev_ccc) = dev_metrics(model, dev_src, config.batch_size);
    history.epochs.push_back(stats);
    if (stats.dev_ccc > best_ccc) {
      best_ccc = stats.dev_ccc;
      history.best_epoch = epoch;
      best_snapshot = model.snapshot();
    }
    if (config.verbose) {
      std::fprintf(stderr, "epoch %3d  train_loss %.4f  dev_mae %.4f  dev_ccc %.4f\n", epoch,
                   stats.train_loss, stats.dev_mae, stats.dev_ccc);
    }
  }

  history.best_epoch = best_epoch_of(history.epochs);
  model.restore(best_snapshot);
  return history;
}

void save_history(const std::filesystem::path& path, const TrainHistory& history) {
  std::vector<std::vector<std::string>> rows;
  for (std::size_t i = 0; i < history.epochs.size(); ++i) {
    const auto& e = history.epochs[i];
    rows.push_back({std::to_string(i + 1), format_double(e.train_loss),
                    format_double(e.dev_mae), format_double(e.dev_ccc)});
  }
  write_csv(path, {"epoch", "train_loss", "dev_mae", "dev_ccc"}, rows);
}

}  // namespace stridesense
