#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "stridesense/dataset.hpp"

namespace stridesense {

// Synthetic running-session acoustics: periodic low-frequency footstep bursts
// at the cadence rate, a 2 kHz noise band whose RMS rises affinely with the
// instantaneous RPE (the breathing proxy), and a white noise floor. Answer
// events sample a monotone-plus-noise RPE trajectory.
struct SynthConfig {
  int n_runners = 16;
  int min_sessions_per_runner = 1;
  int max_sessions_per_runner = 5;
  double session_duration_s = 2700.0;      // ~45 min
  double question_interval_min_s = 180.0;  // questions every 3-5 minutes
  double question_interval_max_s = 300.0;
  double rpe_start_min = 8.0;  // session trajectories rise from ~8 toward ~17
  double rpe_start_max = 11.0;
  double rpe_end_min = 14.0;
  double rpe_end_max = 17.0;
  double rpe_noise = 0.7;
  double breathing_gain = 0.12;  // 2 kHz band RMS at maximal RPE
  double breathing_center_hz = 2000.0;
  // Runners differ: each runner's breathing band sits at breathing_center_hz
  // times a factor drawn once per runner from this spread.
  double breathing_center_spread = 0.1;
  double breathing_q = 5.0;
  // Breath-cycle amplitude modulation (depth 0 disables it). The modulator is
  // normalized to unit RMS, so the window-level RMS-vs-RPE coupling is exact
  // regardless of depth.
  double breath_mod_depth = 0.65;
  double breath_rate_min_hz = 0.35;
  double breath_rate_max_hz = 0.55;
  // Per-session recording-chain spreads: microphone gain, cadence, footstep
  // level and background level all vary between sessions.
  double session_gain_min = 0.5;
  double session_gain_max = 1.6;
  double step_rate_hz = 2.7;
  double step_rate_spread = 0.12;
  double step_amplitude = 0.25;
  double step_amplitude_spread = 0.4;
  double noise_floor = 0.01;
  double noise_floor_spread = 0.6;
  int sample_rate = 16000;
  std::uint64_t seed = 0;

  void validate() const;
};

struct GeneratedSession {
  std::vector<float> samples;
  SessionManifest manifest;
};

// Deterministic in (cfg, runner index, session index): the session seed is
// derived from cfg.seed and both indices.
GeneratedSession generate_session(const SynthConfig& cfg, const RunnerProfile& runner,
                                  int runner_index, int session_index);

struct DemographicsCell {
  AgeRange age_range;
  Sex sex;
  int count = 0;
};

// Mirrors the population mix of the study (per-cell counts scaled to
// n_runners, each requested cell kept nonempty).
std::vector<DemographicsCell> default_demographics_plan(int n_runners);

// Writes wav/, runners.csv, sessions.csv and events.csv under out_dir in the
// exact formats the ingestion side consumes.
void generate_corpus(const SynthConfig& cfg, const std::vector<DemographicsCell>& plan,
                     const std::filesystem::path& out_dir);

// RMS of the signal after a bandpass biquad at (center_hz, q). Used to probe
// the planted breathing band.
double band_rms(std::span<const float> samples, int sample_rate, double center_hz, double q);

}  // namespace stridesense
