#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>

#include "stridesense/model.hpp"
#include "stridesense/rng.hpp"
#include "stridesense/training.hpp"
#include "test_support.hpp"

using namespace stridesense;

namespace {

Standardization neutral_stats(int n_mels = 64) {
  Standardization st;
  st.mean.assign(n_mels, 0.0);
  st.stddev.assign(n_mels, 1.0);
  return st;
}

nn::Tensor<float> random_input(int n, int t, Rng& rng, int mels = 64) {
  std::vector<float> data(static_cast<std::size_t>(n) * t * mels);
  for (auto& v : data) v = static_cast<float>(rng.normal());
  return nn::Tensor<float>::from_data({n, 1, t, mels}, std::move(data));
}

// Independent per-layer parameter count from the written-out formulas.
std::int64_t expected_parameter_count(const ModelConfig& cfg) {
  const auto ch = cfg.block_channels();
  std::int64_t total = 0;
  int in_ch = 1;
  for (int b = 0; b < 6; ++b) {
    const std::int64_t out_ch = ch[b];
    total += out_ch * in_ch * 9 + out_ch;   // conv1 weight + bias
    total += 2 * out_ch;                    // bn1 gamma + beta
    total += out_ch * out_ch * 9 + out_ch;  // conv2 weight + bias
    total += 2 * out_ch;                    // bn2 gamma + beta
    in_ch = ch[b];
  }
  const std::int64_t emb = cfg.embedding_dim();
  total += emb * emb + emb;  // fc1
  total += emb + 1;          // fc_out (1 x emb weight + 1 bias)
  return total;
}

}  // namespace

TEST_CASE("width_scale produces strictly increasing channel stacks") {
  ModelConfig cfg;
  CHECK(cfg.block_channels() == std::array<int, 6>{64, 128, 256, 512, 1024, 2048});
  cfg.width_scale = 0.125;
  CHECK(cfg.block_channels() == std::array<int, 6>{8, 16, 32, 64, 128, 256});
  CHECK(cfg.embedding_dim() == 256);

  ModelConfig bad;
  bad.width_scale = 1.0 / 4096.0;  // collapses widths
  CHECK_THROWS_AS(bad.validate(), InvalidConfig);
}

TEST_CASE("full-width model maps (N,1,2997,64) to embedding 2048 and one output") {
  ModelConfig cfg;  // width_scale 1
  Cnn14<float> model(cfg, 42);
  model.standardization() = neutral_stats();
  Rng rng(7);
  auto input = random_input(2, 2997, rng);
  auto emb = model.embed(input);
  CHECK(emb.shape() == nn::Shape{2, 2048});
  auto out = model.forward(input, /*training=*/false);
  CHECK(out.shape() == nn::Shape{2});
  for (float v : out.data()) CHECK(std::isfinite(v));
}

TEST_CASE("eighth-width model maps (2,1,200,64) to embedding 256") {
  ModelConfig cfg;
  cfg.width_scale = 0.125;
  Cnn14<float> model(cfg, 42);
  model.standardization() = neutral_stats();
  Rng rng(8);
  auto input = random_input(2, 200, rng);
  CHECK(model.embed(input).shape() == nn::Shape{2, 256});
  CHECK(model.forward(input, false).shape() == nn::Shape{2});
}

TEST_CASE("pooled time extents follow the floor-halving law") {
  Rng rng(9);
  ModelConfig cfg;
  cfg.width_scale = 0.0625;
  Cnn14<float> model(cfg, 1);
  model.standardization() = neutral_stats();
  for (int trial = 0; trial < 4; ++trial) {
    const int t = rng.uniform_int(64, 400);
    int expect = t;
    for (int i = 0; i < 5; ++i) expect /= 2;
    expect -= 1;
    CHECK(pooled_time_extent(t) == expect);
    auto emb = model.embed(random_input(1, t, rng));
    CHECK(emb.shape() == nn::Shape{1, cfg.embedding_dim()});
  }
}

TEST_CASE("parameter count matches the independent per-layer tally") {
  for (double scale : {1.0, 0.125}) {
    ModelConfig cfg;
    cfg.width_scale = scale;
    Cnn14<float> model(cfg, 0);
    CHECK(model.parameter_count() == expected_parameter_count(cfg));
  }
}

TEST_CASE("forward guards its preconditions") {
  ModelConfig cfg;
  cfg.width_scale = 0.0625;
  Cnn14<float> model(cfg, 3);
  Rng rng(4);

  SUBCASE("missing standardization") {
    CHECK_THROWS_AS(model.forward(random_input(1, 64, rng), false), NotStandardized);
  }
  SUBCASE("too short in time") {
    model.standardization() = neutral_stats();
    CHECK_THROWS_AS(model.forward(random_input(1, 63, rng), false), InputTooShort);
  }
  SUBCASE("wrong mel width") {
    model.standardization() = neutral_stats();
    std::vector<float> data(64 * 32);
    CHECK_THROWS_AS(model.forward(nn::Tensor<float>::from_data({1, 1, 64, 32}, data), false),
                    ShapeMismatch);
  }
}

TEST_CASE("eval-mode forward is deterministic and per-item independent") {
  ModelConfig cfg;
  cfg.width_scale = 0.0625;
  Cnn14<float> model(cfg, 11);
  model.standardization() = neutral_stats();
  Rng rng(12);
  auto input = random_input(3, 96, rng);

  const auto a = model.forward(input, false).data();
  const auto b = model.forward(input, false).data();
  CHECK(a == b);  // bit-identical

  // permuting the batch permutes predictions identically
  const auto& shape = input.shape();
  const std::size_t item = static_cast<std::size_t>(shape[2]) * shape[3];
  std::vector<float> perm_data(input.data().size());
  const int perm[3] = {2, 0, 1};
  for (int i = 0; i < 3; ++i) {
    std::copy(input.data().begin() + perm[i] * item, input.data().begin() + (perm[i] + 1) * item,
              perm_data.begin() + i * item);
  }
  const auto c = model.forward(nn::Tensor<float>::from_data(shape, perm_data), false).data();
  for (int i = 0; i < 3; ++i) {
    CHECK(c[i] == a[perm[i]]);
  }
}

TEST_CASE("all-zero standardized input stays finite") {
  ModelConfig cfg;
  cfg.width_scale = 0.0625;
  Cnn14<float> model(cfg, 5);
  model.standardization() = neutral_stats();
  auto zeros = nn::Tensor<float>::from_data({1, 1, 64, 64}, std::vector<float>(64 * 64, 0.0f));
  const auto out = model.forward(zeros, false);
  CHECK(std::isfinite(out.data()[0]));
}

TEST_CASE("gradient reaches every parameter") {
  ModelConfig cfg;
  cfg.width_scale = 0.125;
  cfg.dropout_p = 0.0;  // dropout must not mask the check
  Cnn14<float> model(cfg, 21);
  model.standardization() = neutral_stats();
  Rng rng(22);
  auto input = random_input(2, 64, rng);
  auto loss = nn::mean_all(model.forward(input, /*training=*/true));
  loss.backward();
  for (auto& [name, param] : model.named_parameters()) {
    bool any_nonzero = false;
    for (float g : param.grad()) {
      if (g != 0.0f) {
        any_nonzero = true;
        break;
      }
    }
    INFO("parameter ", name);
    CHECK(any_nonzero);
  }
}

TEST_CASE("standardization statistics whiten the training features") {
  Rng rng(31);
  FeatureBatchSource src;
  src.n_frames = 50;
  src.n_mels = 64;
  for (int item = 0; item < 12; ++item) {
    std::vector<float> feat(50 * 64);
    for (int t = 0; t < 50; ++t) {
      for (int m = 0; m < 64; ++m) {
        feat[t * 64 + m] = static_cast<float>(-20.0 + 0.3 * m + 4.0 * rng.normal());
      }
    }
    src.features.push_back(std::move(feat));
    src.targets.push_back(10.0);
  }
  const Standardization st = compute_standardization(src);
  // apply and re-estimate
  std::vector<double> sum(64, 0.0), sumsq(64, 0.0);
  std::size_t frames = 0;
  for (const auto& item : src.features) {
    for (std::size_t r = 0; r < item.size() / 64; ++r) {
      for (int m = 0; m < 64; ++m) {
        const double v = (item[r * 64 + m] - st.mean[m]) / st.stddev[m];
        sum[m] += v;
        sumsq[m] += v * v;
      }
    }
    frames += item.size() / 64;
  }
  for (int m = 0; m < 64; ++m) {
    const double mean = sum[m] / frames;
    const double var = sumsq[m] / frames - mean * mean;
    CHECK(std::abs(mean) < 1e-3);
    CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-3);
  }
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  const auto dir = testsupport::scratch_dir("checkpoint");
  ModelConfig cfg;
  cfg.width_scale = 0.0625;
  Cnn14<float> model(cfg, 77);
  model.standardization() = neutral_stats();
  CheckpointMeta meta;
  meta.epoch = 17;
  meta.dev_mae = 2.5;
  meta.dev_ccc = 0.41;
  const auto path = dir / "model.ssck";
  save_checkpoint(model, path, meta);

  LoadedModel loaded = load_checkpoint(path);
  CHECK(loaded.meta.epoch == 17);
  CHECK(loaded.meta.dev_mae == doctest::Approx(2.5));
  CHECK(loaded.meta.dev_ccc == doctest::Approx(0.41));
  auto orig = model.named_parameters();
  auto back = loaded.model.named_parameters();
  REQUIRE(orig.size() == back.size());
  for (std::size_t i = 0; i < orig.size(); ++i) {
    CHECK(orig[i].first == back[i].first);
    CHECK(orig[i].second.data() == back[i].second.data());  // bitwise
  }
  REQUIRE(loaded.model.standardization().has_value());
  CHECK(loaded.model.standardization()->mean == model.standardization()->mean);

  SUBCASE("truncation is a checksum failure") {
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 5);
    CHECK_THROWS_AS(load_checkpoint(path), CorruptFile);
  }
  SUBCASE("flipping a payload byte is a checksum failure") {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(200);
    char byte;
    f.seekg(200);
    f.read(&byte, 1);
    byte ^= 0x40;
    f.seekp(200);
    f.write(&byte, 1);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(path), CorruptFile);
  }
  SUBCASE("architecture mismatch is rejected when expectations are given") {
    ModelConfig wide;  // width_scale 1
    CHECK_THROWS_AS(load_checkpoint(path, &wide), ShapeMismatch);
  }
  SUBCASE("future versions are rejected") {
    RawCheckpoint raw = read_raw_checkpoint(path);
    raw.version = 2;
    write_raw_checkpoint(dir / "v2.ssck", raw);
    CHECK_THROWS_AS(load_checkpoint(dir / "v2.ssck"), VersionMismatch);
  }
}

TEST_CASE("replace_head keeps the backbone bit-identical and forces one output") {
  const auto dir = testsupport::scratch_dir("replace_head");
  ModelConfig cfg;
  cfg.width_scale = 0.0625;
  Cnn14<float> model(cfg, 123);
  model.standardization() = neutral_stats();
  save_checkpoint(model, dir / "src.ssck", {});

  // forge a 527-way audio-tagging head onto the same backbone
  RawCheckpoint raw = read_raw_checkpoint(dir / "src.ssck");
  const int emb = cfg.embedding_dim();
  for (auto& blob : raw.blobs) {
    if (blob.name == "head.fc_out.weight") {
      blob.shape = {527, emb};
      blob.data.assign(static_cast<std::size_t>(527) * emb, 0.25f);
    } else if (blob.name == "head.fc_out.bias") {
      blob.shape = {527};
      blob.data.assign(527, 0.1f);
    }
  }
  write_raw_checkpoint(dir / "tagging.ssck", raw);

  Cnn14<float> transferred = replace_head(dir / "tagging.ssck", 5);
  auto orig = model.named_parameters();
  auto got = transferred.named_parameters();
  REQUIRE(orig.size() == got.size());
  for (std::size_t i = 0; i < orig.size(); ++i) {
    if (orig[i].first == "head.fc_out.weight") {
      CHECK(got[i].second.shape()[0] == 1);  // output dimension forced to 1
      CHECK(got[i].second.data() != orig[i].second.data());  // freshly drawn
    } else if (orig[i].first == "head.fc_out.bias") {
      CHECK(got[i].second.shape() == nn::Shape{1});  // re-zeroed, width 1
    } else {
      CHECK(got[i].second.data() == orig[i].second.data());  // bitwise
    }
  }

  SUBCASE("the same seed reproduces the same new head") {
    Cnn14<float> again = replace_head(dir / "tagging.ssck", 5);
    auto a = transferred.named_parameters();
    auto b = again.named_parameters();
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].second.data() == b[i].second.data());
    }
  }
  SUBCASE("a missing backbone blob is an incompatibility") {
    RawCheckpoint broken = read_raw_checkpoint(dir / "src.ssck");
    broken.blobs.erase(broken.blobs.begin());  // drop block1.conv1.weight
    write_raw_checkpoint(dir / "broken.ssck", broken);
    CHECK_THROWS_AS(replace_head(dir / "broken.ssck", 5), IncompatibleBackbone);
  }
  SUBCASE("a reshaped backbone blob is an incompatibility") {
    RawCheckpoint broken = read_raw_checkpoint(dir / "src.ssck");
    for (auto& blob : broken.blobs) {
      if (blob.name == "block2.conv1.bias") {
        blob.shape = {3};
        blob.data.assign(3, 0.0f);
      }
    }
    write_raw_checkpoint(dir / "broken2.ssck", broken);
    CHECK_THROWS_AS(replace_head(dir / "broken2.ssck", 5), IncompatibleBackbone);
  }
}
