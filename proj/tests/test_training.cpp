#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>

#include "stridesense/features.hpp"
#include "stridesense/rng.hpp"
#include "stridesense/training.hpp"
#include "test_support.hpp"

using namespace stridesense;

TEST_CASE("ccc on reference vectors") {
  SUBCASE("perfect concordance") {
    CHECK(ccc(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 3}) ==
          doctest::Approx(1.0).epsilon(1e-7));
  }
  SUBCASE("anti-concordance: cov -2/3 over equal variances and means") {
    const double v = ccc(std::vector<double>{1, 2, 3}, std::vector<double>{3, 2, 1});
    CHECK(v == doctest::Approx(-1.0).epsilon(1e-7));
    CHECK(v >= -1.0 - 1e-6);
  }
  SUBCASE("constant inputs have zero covariance") {
    CHECK(ccc(std::vector<double>{0, 0, 0}, std::vector<double>{1, 1, 1}) == 0.0);
  }
  SUBCASE("length and arity guards") {
    CHECK_THROWS_AS(ccc(std::vector<double>{1, 2}, std::vector<double>{1}), LengthMismatch);
    CHECK_THROWS_AS(ccc(std::vector<double>{1}, std::vector<double>{1}), TooShort);
  }
}

TEST_CASE("ccc is symmetric and bounded") {
  Rng rng(1);
  for (int trial = 0; trial < 500; ++trial) {
    const int n = rng.uniform_int(2, 40);
    std::vector<double> x(n), y(n);
    for (int i = 0; i < n; ++i) {
      x[i] = rng.uniform(-50.0, 50.0);
      y[i] = rng.uniform(-50.0, 50.0);
    }
    const double a = ccc(x, y);
    const double b = ccc(y, x);
    CHECK(a == b);  // exactly symmetric
    CHECK(std::abs(a) <= 1.0 + 1e-6);
  }
}

TEST_CASE("ccc approaches 1 as an affine map approaches the identity") {
  Rng rng(2);
  std::vector<double> x(64);
  for (auto& v : x) v = rng.uniform(6.0, 20.0);

  double prev = -2.0;
  for (double delta : {0.5, 0.1, 0.01}) {
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = (1.0 + delta) * x[i] + delta;
    const double v = ccc(x, y);
    CHECK(v > prev);
    prev = v;
  }
  std::vector<double> same = x;
  CHECK(ccc(x, same) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("ccc_loss mirrors the plain metric and differentiates") {
  Rng rng(3);
  SUBCASE("perfect predictions give near-zero loss") {
    std::vector<double> t{8, 12, 16, 19};
    std::vector<float> p(t.begin(), t.end());
    auto pred = nn::Tensor<float>::from_data({4}, p, true);
    CHECK(ccc_loss(pred, t).value() == doctest::Approx(0.0).epsilon(1e-6));
  }
  SUBCASE("constant predictions against varying targets lose everything") {
    std::vector<double> t{8, 12, 16, 19};
    auto pred = nn::Tensor<float>::filled({4}, 11.0f, true);
    CHECK(ccc_loss(pred, t).value() == doctest::Approx(1.0).epsilon(1e-6));
  }
  SUBCASE("agrees with the metric on random data") {
    for (int trial = 0; trial < 20; ++trial) {
      const int n = rng.uniform_int(2, 30);
      std::vector<double> x(n), t(n);
      for (int i = 0; i < n; ++i) {
        x[i] = rng.uniform(5.0, 21.0);
        t[i] = rng.uniform(5.0, 21.0);
      }
      auto pred = nn::Tensor<double>::from_data({n}, x, true);
      CHECK(ccc_loss(pred, t).value() == doctest::Approx(1.0 - ccc(x, t)).epsilon(1e-9));
    }
  }
  SUBCASE("gradient matches finite differences at batch size 24") {
    std::vector<double> t(24);
    for (auto& v : t) v = rng.uniform(6.0, 20.0);
    auto pred = nn::Tensor<double>::zeros({24}, true);
    for (auto& v : pred.data()) v = rng.uniform(6.0, 20.0);
    auto loss_fn = [&] { return ccc_loss(pred, t); };
    CHECK(nn::grad_check<double>(loss_fn, {pred}, 1e-4).max_rel_error < 1e-4);
  }
  SUBCASE("guards") {
    std::vector<double> t{10.0};
    auto pred = nn::Tensor<float>::filled({1}, 10.0f);
    CHECK_THROWS_AS(ccc_loss(pred, t), TooShort);
    std::vector<double> t2{10.0, 11.0, 12.0};
    CHECK_THROWS_AS(ccc_loss(pred, t2), LengthMismatch);
  }
}

TEST_CASE("best epoch is the earliest maximum of dev CCC") {
  auto stats = [](double c) { return EpochStats{0.0, 0.0, c}; };
  CHECK(best_epoch_of({stats(0.1), stats(0.3), stats(0.3), stats(0.2)}) == 2);
  CHECK(best_epoch_of({stats(0.5)}) == 1);
  CHECK(best_epoch_of({stats(-0.1), stats(-0.4)}) == 1);
}

namespace {

// Writes feature files whose mean encodes the target, giving the trainer an
// easily learnable signal.
std::vector<Segment> write_planted_segments(const std::filesystem::path& dir, int count,
                                            int n_frames, Rng& rng, const char* prefix) {
  std::vector<Segment> segments;
  for (int i = 0; i < count; ++i) {
    const int fatigue = 6 + (i * 7) % 15;
    LogMelSpectrogram spec;
    spec.n_frames = n_frames;
    spec.n_mels = 64;
    spec.values.resize(static_cast<std::size_t>(n_frames) * 64);
    for (auto& v : spec.values) {
      v = -20.0 + 1.5 * fatigue + 0.5 * rng.normal();
    }
    const std::string rel = std::string(prefix) + "_" + std::to_string(i) + ".smf";
    save_features(dir / rel, spec);

    Segment seg;
    seg.session_id = std::string(prefix) + std::to_string(i);
    seg.runner_id = "r" + std::to_string(i % 3);
    seg.start_s = 15.0;
    seg.end_s = 45.0;
    seg.fatigue = fatigue;
    seg.surface = "asphalt";
    seg.feature_path = rel;
    segments.push_back(std::move(seg));
  }
  return segments;
}

}  // namespace

TEST_CASE("training is reproducible and selects by dev CCC") {
  const auto dir = testsupport::scratch_dir("train_repro");
  Rng rng(4);
  const auto train_segs = write_planted_segments(dir, 10, 64, rng, "tr");
  const auto dev_segs = write_planted_segments(dir, 4, 64, rng, "dv");

  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.shuffle_seed = 11;
  cfg.dropout_seed = 12;

  ModelConfig model_cfg;
  model_cfg.width_scale = 1.0 / 32.0;

  auto run = [&] {
    Cnn14<float> model(model_cfg, 99);
    const TrainHistory history = train(model, train_segs, dev_segs, dir, cfg);
    return std::make_pair(history, model.snapshot());
  };
  auto [h1, snap1] = run();
  auto [h2, snap2] = run();

  REQUIRE(h1.epochs.size() == 3);
  for (std::size_t e = 0; e < 3; ++e) {
    CHECK(h1.epochs[e].train_loss == h2.epochs[e].train_loss);  // bitwise reproducible
    CHECK(h1.epochs[e].dev_mae == h2.epochs[e].dev_mae);
    CHECK(h1.epochs[e].dev_ccc == h2.epochs[e].dev_ccc);
  }
  CHECK(h1.best_epoch == h2.best_epoch);
  for (std::size_t i = 0; i < snap1.params.size(); ++i) {
    CHECK(snap1.params[i] == snap2.params[i]);
  }

  // selection invariant: recorded best epoch holds the maximum dev CCC
  double best = -2.0;
  for (const auto& e : h1.epochs) best = std::max(best, e.dev_ccc);
  CHECK(h1.epochs[h1.best_epoch - 1].dev_ccc == best);

  // the model is left holding the best epoch's parameters: retraining with
  // epochs = best_epoch reproduces them
  Cnn14<float> truncated(model_cfg, 99);
  TrainConfig cfg_trunc = cfg;
  cfg_trunc.epochs = h1.best_epoch;
  train(truncated, train_segs, dev_segs, dir, cfg_trunc);
  const auto snap_trunc = truncated.snapshot();
  for (std::size_t i = 0; i < snap1.params.size(); ++i) {
    CHECK(snap1.params[i] == snap_trunc.params[i]);
  }
}

TEST_CASE("history serializes as the four-column table") {
  const auto dir = testsupport::scratch_dir("history");
  TrainHistory history;
  history.epochs = {EpochStats{0.9, 5.0, 0.05}, EpochStats{0.7, 4.0, 0.2}};
  history.best_epoch = 2;
  save_history(dir / "history.csv", history);

  std::ifstream in(dir / "history.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "epoch,train_loss,dev_mae,dev_ccc");
  std::getline(in, line);
  CHECK(line.rfind("1,0.9,", 0) == 0);
}

TEST_CASE("training rejects empty partitions") {
  const auto dir = testsupport::scratch_dir("train_empty");
  Rng rng(5);
  const auto segs = write_planted_segments(dir, 4, 64, rng, "x");
  ModelConfig model_cfg;
  model_cfg.width_scale = 1.0 / 32.0;
  Cnn14<float> model(model_cfg, 1);
  TrainConfig cfg;
  cfg.epochs = 1;
  CHECK_THROWS_AS(train(model, {}, segs, dir, cfg), EmptyPartition);
  CHECK_THROWS_AS(train(model, segs, {segs[0]}, dir, cfg), EmptyPartition);
}

TEST_CASE("missing feature files are reported") {
  const auto dir = testsupport::scratch_dir("train_missing");
  Segment seg;
  seg.session_id = "s";
  seg.runner_id = "r";
  seg.fatigue = 10;
  SUBCASE("no feature path at all") {
    CHECK_THROWS_AS(FeatureBatchSource::load({seg, seg}, dir, 0), MissingFeatures);
  }
  SUBCASE("dangling feature path") {
    seg.feature_path = "nope.smf";
    CHECK_THROWS_AS(FeatureBatchSource::load({seg, seg}, dir, 0), MissingFeatures);
  }
}
