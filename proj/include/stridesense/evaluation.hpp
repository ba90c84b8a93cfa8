#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "stridesense/dataset.hpp"
#include "stridesense/model.hpp"

namespace stridesense {

double mae(std::span<const double> preds, std::span<const double> targets);

struct EvalPair {
  std::string segment_id;
  std::string runner_id;
  double prediction = 0.0;
  double target = 0.0;
};

struct StratumKey {
  AgeRange age_range;
  Sex sex;
  auto operator<=>(const StratumKey&) const = default;
};

struct StratumStats {
  double mae = 0.0;
  int count = 0;
};

struct RunnerStats {
  std::string runner_id;
  double mae = 0.0;
  int count = 0;
};

struct EvalReport {
  std::vector<EvalPair> pairs;
  double global_mae = 0.0;
  std::optional<double> global_ccc;  // absent when fewer than 2 pairs
  std::map<StratumKey, StratumStats> strata;
  std::vector<RunnerStats> per_runner;  // ascending MAE, ties by runner id
};

// One prediction per segment in eval mode; global CCC is computed over all
// pairs at once. Inference fans out over `n_threads` with a frozen model.
EvalReport evaluate(const Cnn14<float>& model, const std::vector<Segment>& segments,
                    const std::vector<RunnerProfile>& profiles,
                    const std::filesystem::path& feature_base, int crop_frames = 0,
                    int n_threads = 1, int batch_size = 24);

// Segment-weighted MAE per (age_range, sex) cell; empty cells are omitted.
std::map<StratumKey, StratumStats> stratify(const EvalReport& report,
                                            const std::vector<RunnerProfile>& profiles);

std::vector<RunnerStats> per_runner(const EvalReport& report);

// Writes pairs.csv, strata.csv, per_runner.csv, metrics.csv plus one
// two-column plot-data file per figure analogue. `clip_predictions` clamps
// the emitted prediction column to [6, 20] for deployment-style output;
// metrics are always computed unclipped.
void emit_report(const EvalReport& report, const std::filesystem::path& out_dir,
                 bool clip_predictions = false);

}  // namespace stridesense
