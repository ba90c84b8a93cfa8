#include "stridesense/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "stridesense/audio_io.hpp"
#include "stridesense/errors.hpp"
#include "stridesense/rng.hpp"

namespace stridesense {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

// RBJ bandpass (0 dB peak gain), applied as a streaming direct-form-1 biquad.
struct Biquad {
  double b0, b1, b2, a1, a2;
  double x1 = 0, x2 = 0, y1 = 0, y2 = 0;

  static Biquad bandpass(double center_hz, double q, int sample_rate) {
    const double w0 = kTwoPi * center_hz / sample_rate;
    const double alpha = std::sin(w0) / (2.0 * q);
    const double a0 = 1.0 + alpha;
    Biquad f{alpha / a0, 0.0, -alpha / a0, -2.0 * std::cos(w0) / a0, (1.0 - alpha) / a0};
    return f;
  }

  double step(double x) {
    const double y = b0 * x + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
    x2 = x1;
    x1 = x;
    y2 = y1;
    y1 = y;
    return y;
  }

  // L2 norm of the impulse response; filtered unit-variance white noise has
  // this RMS, so dividing by it normalizes the band to unit RMS.
  static double noise_gain(double center_hz, double q, int sample_rate) {
    Biquad f = bandpass(center_hz, q, sample_rate);
    double energy = 0.0;
    double x = 1.0;
    for (int i = 0; i < 16384; ++i) {
      const double y = f.step(x);
      energy += y * y;
      x = 0.0;
    }
    return std::sqrt(energy);
  }
};

// Piecewise-linear RPE path: a rising base plus smoothed noise knots, clamped
// to the Borg range.
struct RpeTrajectory {
  double duration;
  double start, end;
  std::vector<double> knots;  // noise offsets every 60 s
  double knot_spacing = 60.0;

  static RpeTrajectory sample(const SynthConfig& cfg, Rng& rng) {
    RpeTrajectory t;
    t.duration = cfg.session_duration_s;
    t.start = rng.uniform(cfg.rpe_start_min, cfg.rpe_start_max);
    t.end = rng.uniform(cfg.rpe_end_min, cfg.rpe_end_max);
    const int n_knots = static_cast<int>(t.duration / t.knot_spacing) + 2;
    t.knots.resize(n_knots);
    for (auto& k : t.knots) k = rng.normal() * cfg.rpe_noise;
    return t;
  }

  double at(double time_s) const {
    const double u = std::clamp(time_s / duration, 0.0, 1.0);
    const double base = start + (end - start) * u;
    const double pos = time_s / knot_spacing;
    const int i = std::clamp(static_cast<int>(pos), 0, static_cast<int>(knots.size()) - 2);
    const double frac = pos - i;
    const double noise = knots[i] * (1.0 - frac) + knots[i + 1] * frac;
    return std::clamp(base + noise, 6.0, 20.0);
  }
};

const char* kSurfaces[3] = {"asphalt", "gravel", "concrete"};

}  // namespace

void SynthConfig::validate() const {
  if (n_runners < 1) throw InvalidConfig("n_runners must be >= 1");
  if (min_sessions_per_runner < 1 || max_sessions_per_runner < min_sessions_per_runner) {
    throw InvalidConfig("sessions per runner must satisfy 1 <= min <= max");
  }
  if (session_duration_s <= 0.0) throw InvalidConfig("session duration must be positive");
  if (question_interval_min_s <= 0.0 || question_interval_max_s < question_interval_min_s) {
    throw InvalidConfig("question interval must satisfy 0 < min <= max");
  }
  if (sample_rate <= 0) throw InvalidConfig("sample rate must be positive");
  if (step_rate_hz <= 0.0) throw InvalidConfig("step rate must be positive");
  if (breathing_gain < 0.0 || noise_floor < 0.0 || step_amplitude < 0.0) {
    throw InvalidConfig("gains must be non-negative");
  }
}

GeneratedSession generate_session(const SynthConfig& cfg, const RunnerProfile& runner,
                                  int runner_index, int session_index) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(runner_index),
                      static_cast<std::uint64_t>(session_index)));

  const int sr = cfg.sample_rate;
  const std::size_t n = static_cast<std::size_t>(cfg.session_duration_s * sr);
  const RpeTrajectory rpe = RpeTrajectory::sample(cfg, rng);

  // Session- and runner-level nuisance draws.
  const double session_gain = rng.uniform(cfg.session_gain_min, cfg.session_gain_max);
  const double breath_rate = rng.uniform(cfg.breath_rate_min_hz, cfg.breath_rate_max_hz);
  const double breath_phase = rng.uniform(0.0, kTwoPi);
  const double step_rate =
      cfg.step_rate_hz * (1.0 + cfg.step_rate_spread * rng.uniform(-1.0, 1.0));
  const double step_amp =
      cfg.step_amplitude * (1.0 + cfg.step_amplitude_spread * rng.uniform(-1.0, 1.0));
  const double floor_amp =
      cfg.noise_floor * (1.0 + cfg.noise_floor_spread * rng.uniform(-1.0, 1.0));
  // The runner's own breathing pitch: one factor per runner, stable across
  // that runner's sessions.
  Rng runner_rng(derive_seed(cfg.seed, 0xB0D7, static_cast<std::uint64_t>(runner_index)));
  const double breath_center =
      cfg.breathing_center_hz *
      (1.0 + cfg.breathing_center_spread * runner_rng.uniform(-1.0, 1.0));

  // E[(a + b|sin|)^2] = a^2 + 4ab/pi + b^2/2 over a cycle
  const double mod_base = 1.0 - cfg.breath_mod_depth;
  const double mod_rms =
      std::sqrt(mod_base * mod_base + 4.0 * mod_base * cfg.breath_mod_depth / 3.14159265358979 +
                cfg.breath_mod_depth * cfg.breath_mod_depth / 2.0);

  GeneratedSession out;
  out.samples.assign(n, 0.0f);

  // Footstep bursts: decaying 55 Hz packets at the cadence period, a nuisance
  // carrying no label signal.
  if (cfg.step_amplitude > 0.0) {
    const double period = 1.0 / step_rate;
    const int pulse_len = static_cast<int>(0.12 * sr);
    std::vector<double> pulse(pulse_len);
    for (int k = 0; k < pulse_len; ++k) {
      const double t = static_cast<double>(k) / sr;
      pulse[k] = std::exp(-t / 0.035) * std::sin(kTwoPi * 55.0 * t);
    }
    for (double t0 = rng.uniform(0.0, period); t0 < cfg.session_duration_s; t0 += period) {
      const std::size_t i0 = static_cast<std::size_t>(t0 * sr);
      const double amp = step_amp * rng.uniform(0.85, 1.15);
      for (int k = 0; k < pulse_len && i0 + k < n; ++k) {
        out.samples[i0 + k] += static_cast<float>(amp * pulse[k]);
      }
    }
  }

  // Breathing proxy: unit-RMS band noise at the runner's breathing pitch,
  // amplitude-modulated at the breath rate, scaled per sample so the window
  // RMS stays affine in the instantaneous RPE, plus floor. The whole mix
  // carries the session's microphone gain.
  Biquad band = Biquad::bandpass(breath_center, cfg.breathing_q, sr);
  const double band_gain = 1.0 / Biquad::noise_gain(breath_center, cfg.breathing_q, sr);
  double rpe_now = rpe.at(0.0);
  double cycle = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if ((i & 1023) == 0) {
      const double t = static_cast<double>(i) / sr;
      rpe_now = rpe.at(t);
      cycle = (mod_base + cfg.breath_mod_depth *
                              std::abs(std::sin(3.14159265358979 * breath_rate * t +
                                                breath_phase))) /
              mod_rms;
    }
    const double white = rng.normal();
    const double banded = band.step(white) * band_gain;
    const double rms = cfg.breathing_gain * (0.15 + 0.85 * (rpe_now - 6.0) / 14.0);
    out.samples[i] = static_cast<float>(
        session_gain * (out.samples[i] + banded * rms * cycle + rng.normal() * floor_amp));
  }

  // Answer events every question interval; the label is the trajectory value
  // at the answer time, rounded and clamped to the Borg range.
  out.manifest.session_id = runner.runner_id + "_s" + std::to_string(session_index);
  out.manifest.runner_id = runner.runner_id;
  const char* surface = kSurfaces[rng.below(3)];
  double t = rng.uniform(cfg.question_interval_min_s, cfg.question_interval_max_s);
  while (t < cfg.session_duration_s) {
    AnswerEvent e;
    e.time_s = t;
    e.fatigue = static_cast<int>(std::clamp(std::nearbyint(rpe.at(t)), 6.0, 20.0));
    e.wellbeing = rng.uniform_int(-5, 5);
    e.surface = surface;
    out.manifest.events.push_back(std::move(e));
    t += rng.uniform(cfg.question_interval_min_s, cfg.question_interval_max_s);
  }
  return out;
}

std::vector<DemographicsCell> default_demographics_plan(int n_runners) {
  if (n_runners < 1) throw InvalidConfig("n_runners must be >= 1");
  // Study population: counts per (age range, sex) cell out of 48 runners.
  struct BaseCell {
    AgeRange age;
    Sex sex;
    int count;
  };
  const BaseCell base[] = {
      {AgeRange::R21_30, Sex::M, 5}, {AgeRange::R21_30, Sex::F, 7},
      {AgeRange::R31_40, Sex::M, 8}, {AgeRange::R31_40, Sex::F, 8},
      {AgeRange::R41_50, Sex::M, 2}, {AgeRange::R41_50, Sex::F, 4},
      {AgeRange::R51_60, Sex::M, 6}, {AgeRange::R51_60, Sex::F, 8},
  };
  constexpr int kBaseTotal = 48;

  if (n_runners < 8) {
    // Too few runners to populate all cells; fill the largest cells first.
    std::vector<BaseCell> ordered(base, base + 8);
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const BaseCell& a, const BaseCell& b) { return a.count > b.count; });
    std::vector<DemographicsCell> plan;
    for (int i = 0; i < n_runners; ++i) {
      plan.push_back({ordered[i].age, ordered[i].sex, 1});
    }
    return plan;
  }

  std::vector<DemographicsCell> plan;
  int assigned = 0;
  for (const auto& cell : base) {
    int count = std::max(1, (n_runners * cell.count + kBaseTotal / 2) / kBaseTotal);
    plan.push_back({cell.age, cell.sex, count});
    assigned += count;
  }
  // Settle rounding drift on the largest cells so the total matches exactly.
  std::size_t i = 0;
  while (assigned > n_runners) {
    auto& cell = plan[i % plan.size()];
    if (cell.count > 1) {
      --cell.count;
      --assigned;
    }
    ++i;
    if (i > plan.size() * 64) break;
  }
  i = 0;
  while (assigned < n_runners) {
    ++plan[i % plan.size()].count;
    ++assigned;
    ++i;
  }
  return plan;
}

void generate_corpus(const SynthConfig& cfg, const std::vector<DemographicsCell>& plan,
                     const std::filesystem::path& out_dir) {
  cfg.validate();
  for (const auto& cell : plan) {
    if (cell.count < 1) throw InvalidConfig("every requested demographics cell needs count >= 1");
  }

  std::filesystem::create_directories(out_dir / "wav");
  Rng structure_rng(derive_seed(cfg.seed, 0xC0DE, 0));

  Corpus corpus;
  int runner_index = 0;
  for (const auto& cell : plan) {
    for (int k = 0; k < cell.count; ++k) {
      RunnerProfile runner;
      char id[16];
      std::snprintf(id, sizeof(id), "r%03d", runner_index);
      runner.runner_id = id;
      runner.age_range = cell.age_range;
      runner.sex = cell.sex;

      const int n_sessions =
          structure_rng.uniform_int(cfg.min_sessions_per_runner, cfg.max_sessions_per_runner);
      for (int s = 0; s < n_sessions; ++s) {
        GeneratedSession session = generate_session(cfg, runner, runner_index, s);
        const std::string wav_name = "wav/" + session.manifest.session_id + ".wav";
        encode_wav_file(out_dir / wav_name, session.samples, cfg.sample_rate);
        session.manifest.audio_path = wav_name;
        corpus.sessions.push_back(std::move(session.manifest));
      }
      corpus.runners.push_back(std::move(runner));
      ++runner_index;
    }
  }
  save_manifest(out_dir, corpus);
}

double band_rms(std::span<const float> samples, int sample_rate, double center_hz, double q) {
  if (samples.empty()) throw EmptyInput("band_rms over zero samples");
  Biquad band = Biquad::bandpass(center_hz, q, sample_rate);
  double energy = 0.0;
  for (float s : samples) {
    const double y = band.step(static_cast<double>(s));
    energy += y * y;
  }
  return std::sqrt(energy / static_cast<double>(samples.size()));
}

}  // namespace stridesense
