#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "stridesense/audio_io.hpp"
#include "stridesense/dataset.hpp"
#include "stridesense/pipeline.hpp"
#include "stridesense/rng.hpp"
#include "stridesense/synthdata.hpp"
#include "test_support.hpp"

using namespace stridesense;

namespace {

SynthConfig fast_config() {
  SynthConfig cfg;
  cfg.session_duration_s = 240.0;
  cfg.question_interval_min_s = 40.0;
  cfg.question_interval_max_s = 60.0;
  cfg.min_sessions_per_runner = 1;
  cfg.max_sessions_per_runner = 2;
  return cfg;
}

RunnerProfile runner(const std::string& id) { return {id, AgeRange::R31_40, Sex::F}; }

}  // namespace

TEST_CASE("session generation is a pure function of seed and indices") {
  SynthConfig cfg = fast_config();
  cfg.seed = 42;
  const auto a = generate_session(cfg, runner("rX"), 3, 1);
  const auto b = generate_session(cfg, runner("rX"), 3, 1);
  CHECK(a.samples == b.samples);  // bit-identical
  REQUIRE(a.manifest.events.size() == b.manifest.events.size());
  for (std::size_t i = 0; i < a.manifest.events.size(); ++i) {
    CHECK(a.manifest.events[i].time_s == b.manifest.events[i].time_s);
    CHECK(a.manifest.events[i].fatigue == b.manifest.events[i].fatigue);
  }
  const auto c = generate_session(cfg, runner("rX"), 3, 2);
  CHECK(a.samples != c.samples);

  SUBCASE("samples stay inside the encodable range") {
    float peak = 0.0f;
    for (float s : a.samples) peak = std::max(peak, std::abs(s));
    CHECK(peak <= 1.0f);
    CHECK(peak > 0.01f);
  }
  SUBCASE("events are strictly increasing with valid labels") {
    REQUIRE(!a.manifest.events.empty());
    for (std::size_t i = 0; i < a.manifest.events.size(); ++i) {
      const auto& e = a.manifest.events[i];
      CHECK(e.fatigue >= 6);
      CHECK(e.fatigue <= 20);
      CHECK(e.wellbeing >= -5);
      CHECK(e.wellbeing <= 5);
      if (i) CHECK(e.time_s > a.manifest.events[i - 1].time_s);
    }
  }
}

TEST_CASE("breathing band energy tracks RPE only through the planted coupling") {
  SynthConfig cfg = fast_config();
  cfg.session_duration_s = 600.0;
  cfg.seed = 7;

  auto band_energy_by_event = [&](const GeneratedSession& session) {
    std::vector<double> log_energy, rpe;
    for (const auto& event : session.manifest.events) {
      const double start = event.time_s - 15.0;
      if (start < 0.0 || event.time_s + 15.0 > cfg.session_duration_s) continue;
      const auto begin = static_cast<std::size_t>(start * cfg.sample_rate);
      const std::span<const float> window(session.samples.data() + begin,
                                          static_cast<std::size_t>(30 * cfg.sample_rate));
      log_energy.push_back(std::log(band_rms(window, cfg.sample_rate, 2000.0, 5.0)));
      rpe.push_back(static_cast<double>(event.fatigue));
    }
    return std::make_pair(log_energy, rpe);
  };

  SUBCASE("default gain couples strongly") {
    std::vector<double> le, rpe;
    for (int r = 0; r < 6; ++r) {
      const auto s = generate_session(cfg, runner("r" + std::to_string(r)), r, 0);
      auto [e, f] = band_energy_by_event(s);
      le.insert(le.end(), e.begin(), e.end());
      rpe.insert(rpe.end(), f.begin(), f.end());
    }
    REQUIRE(le.size() >= 30);
    CHECK(testsupport::pearson(le, rpe) > 0.8);
  }
  SUBCASE("zero gain decouples") {
    SynthConfig off = cfg;
    off.breathing_gain = 0.0;
    std::vector<double> le, rpe;
    for (int r = 0; r < 6; ++r) {
      const auto s = generate_session(off, runner("r" + std::to_string(r)), r, 0);
      auto [e, f] = band_energy_by_event(s);
      le.insert(le.end(), e.begin(), e.end());
      rpe.insert(rpe.end(), f.begin(), f.end());
    }
    REQUIRE(le.size() >= 30);
    CHECK(std::abs(testsupport::pearson(le, rpe)) < 0.1);
  }
}

TEST_CASE("a minimal plan writes exactly one session") {
  const auto dir = testsupport::scratch_dir("synth_one");
  SynthConfig cfg = fast_config();
  cfg.max_sessions_per_runner = 1;
  generate_corpus(cfg, {{AgeRange::R21_30, Sex::M, 1}}, dir);
  const Corpus corpus = load_manifest(dir);
  CHECK(corpus.runners.size() == 1);
  CHECK(corpus.sessions.size() == 1);
  CHECK(std::filesystem::exists(corpus.sessions[0].audio_path));
}

TEST_CASE("generated corpora pass ingestion with zero validation errors") {
  Rng trial_rng(3);
  for (int trial = 0; trial < 3; ++trial) {
    const auto dir = testsupport::scratch_dir("synth_prop_" + std::to_string(trial));
    SynthConfig cfg = fast_config();
    cfg.session_duration_s = trial_rng.uniform(120.0, 300.0);
    cfg.seed = trial_rng.next_u64();
    const int runners = trial_rng.uniform_int(2, 5);
    std::vector<DemographicsCell> plan = default_demographics_plan(runners);
    generate_corpus(cfg, plan, dir);

    const Corpus corpus = load_manifest(dir);  // throws on any invariant breach
    CHECK(corpus.runners.size() == static_cast<std::size_t>(runners));
    const auto segments = segment_corpus(corpus);
    for (const auto& seg : segments) {
      CHECK(seg.end_s - seg.start_s == doctest::Approx(30.0));
    }
    // audio decodes at the contract rate
    const AudioClip clip = decode_wav_file(corpus.sessions[0].audio_path);
    CHECK(clip.sample_rate == cfg.sample_rate);
  }
}

TEST_CASE("demographics plan mirrors the study mix") {
  const auto plan48 = default_demographics_plan(48);
  std::map<std::pair<AgeRange, Sex>, int> counts;
  int total = 0;
  for (const auto& cell : plan48) {
    counts[{cell.age_range, cell.sex}] = cell.count;
    total += cell.count;
  }
  CHECK(total == 48);
  CHECK(counts[{AgeRange::R21_30, Sex::M}] == 5);
  CHECK(counts[{AgeRange::R21_30, Sex::F}] == 7);
  CHECK(counts[{AgeRange::R31_40, Sex::M}] == 8);
  CHECK(counts[{AgeRange::R31_40, Sex::F}] == 8);
  CHECK(counts[{AgeRange::R41_50, Sex::M}] == 2);
  CHECK(counts[{AgeRange::R41_50, Sex::F}] == 4);
  CHECK(counts[{AgeRange::R51_60, Sex::M}] == 6);
  CHECK(counts[{AgeRange::R51_60, Sex::F}] == 8);

  for (int n : {8, 16, 33}) {
    const auto plan = default_demographics_plan(n);
    int sum = 0;
    for (const auto& cell : plan) {
      CHECK(cell.count >= 1);
      sum += cell.count;
    }
    CHECK(sum == n);
  }
  // below eight runners the plan requests fewer cells instead of padding
  const auto small = default_demographics_plan(3);
  CHECK(small.size() == 3);
}

TEST_CASE("session count stays within the plan arithmetic bounds") {
  const auto dir = testsupport::scratch_dir("synth_bounds");
  SynthConfig cfg;
  cfg.session_duration_s = 10.0;  // bound check only; most sessions have no events
  cfg.question_interval_min_s = 40.0;
  cfg.question_interval_max_s = 60.0;
  cfg.n_runners = 48;
  cfg.seed = 5;
  generate_corpus(cfg, default_demographics_plan(48), dir);
  const Corpus corpus = load_manifest(dir);
  CHECK(corpus.runners.size() == 48);
  CHECK(corpus.sessions.size() >= 48);
  CHECK(corpus.sessions.size() <= 240);
}

TEST_CASE("label histogram concentrates in the moderate range") {
  SynthConfig cfg = fast_config();
  cfg.session_duration_s = 2700.0;
  cfg.question_interval_min_s = 180.0;
  cfg.question_interval_max_s = 300.0;
  cfg.seed = 11;
  std::map<int, int> histogram;
  for (int r = 0; r < 12; ++r) {
    const auto session = generate_session(cfg, runner("r" + std::to_string(r)), r, 0);
    for (const auto& e : session.manifest.events) histogram[e.fatigue]++;
  }
  int mode = 6, best = -1, total = 0;
  for (const auto& [value, count] : histogram) {
    total += count;
    if (count > best) {
      best = count;
      mode = value;
    }
  }
  REQUIRE(total > 80);
  CHECK(mode >= 10);
  CHECK(mode <= 16);
}

TEST_CASE("the planted signal is linearly recoverable from band energy") {
  // Per-segment 2 kHz-band log-energy must predict RPE to better than
  // 1.5 MAE with a line fit; this bounds what the network has to find.
  SynthConfig cfg = fast_config();
  cfg.session_duration_s = 600.0;
  cfg.seed = 23;

  std::vector<double> energy, rpe;
  for (int r = 0; r < 8; ++r) {
    const auto session = generate_session(cfg, runner("r" + std::to_string(r)), r, 0);
    for (const auto& event : session.manifest.events) {
      const double start = event.time_s - 15.0;
      if (start < 0.0 || event.time_s + 15.0 > cfg.session_duration_s) continue;
      const auto begin = static_cast<std::size_t>(start * cfg.sample_rate);
      const std::span<const float> window(session.samples.data() + begin,
                                          static_cast<std::size_t>(30 * cfg.sample_rate));
      energy.push_back(std::log(band_rms(window, cfg.sample_rate, 2000.0, 5.0)));
      rpe.push_back(static_cast<double>(event.fatigue));
    }
  }
  REQUIRE(energy.size() >= 40);

  // fit on even indices, test on odd
  std::vector<double> fit_x, fit_y, test_x, test_y;
  for (std::size_t i = 0; i < energy.size(); ++i) {
    if (i % 2 == 0) {
      fit_x.push_back(energy[i]);
      fit_y.push_back(rpe[i]);
    } else {
      test_x.push_back(energy[i]);
      test_y.push_back(rpe[i]);
    }
  }
  const auto [slope, intercept] = testsupport::fit_line(fit_x, fit_y);
  double abs_err = 0.0;
  for (std::size_t i = 0; i < test_x.size(); ++i) {
    abs_err += std::abs(slope * test_x[i] + intercept - test_y[i]);
  }
  CHECK(abs_err / test_x.size() < 1.5);
}
