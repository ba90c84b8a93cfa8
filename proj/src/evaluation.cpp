#include "stridesense/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "stridesense/csv.hpp"
#include "stridesense/threading.hpp"
#include "stridesense/training.hpp"

namespace stridesense {

double mae(std::span<const double> preds, std::span<const double> targets) {
  if (preds.size() != targets.size()) {
    throw LengthMismatch("mae: " + std::to_string(preds.size()) + " vs " +
                         std::to_string(targets.size()));
  }
  if (preds.empty()) throw EmptyInput("mae over zero pairs");
  double acc = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    acc += std::abs(preds[i] - targets[i]);
  }
  return acc / static_cast<double>(preds.size());
}

std::map<StratumKey, StratumStats> stratify(const EvalReport& report,
                                            const std::vector<RunnerProfile>& profiles) {
  std::map<std::string, const RunnerProfile*> by_id;
  for (const auto& p : profiles) by_id[p.runner_id] = &p;

  std::map<StratumKey, std::pair<double, int>> acc;  // sum of |err|, count
  for (const auto& pair : report.pairs) {
    const auto it = by_id.find(pair.runner_id);
    if (it == by_id.end()) {
      throw UnknownRunner("no profile for runner '" + pair.runner_id + "'");
    }
    const StratumKey key{it->second->age_range, it->second->sex};
    auto& slot = acc[key];
    slot.first += std::abs(pair.prediction - pair.target);
    slot.second += 1;
  }
  std::map<StratumKey, StratumStats> out;
  for (const auto& [key, slot] : acc) {
    out[key] = StratumStats{slot.first / slot.second, slot.second};
  }
  return out;
}

std::vector<RunnerStats> per_runner(const EvalReport& report) {
  std::map<std::string, std::pair<double, int>> acc;
  for (const auto& pair : report.pairs) {
    auto& slot = acc[pair.runner_id];
    slot.first += std::abs(pair.prediction - pair.target);
    slot.second += 1;
  }
  std::vector<RunnerStats> out;
  out.reserve(acc.size());
  for (const auto& [runner, slot] : acc) {
    out.push_back(RunnerStats{runner, slot.first / slot.second, slot.second});
  }
  std::sort(out.begin(), out.end(), [](const RunnerStats& a, const RunnerStats& b) {
    if (a.mae != b.mae) return a.mae < b.mae;
    return a.runner_id < b.runner_id;
  });
  return out;
}

EvalReport evaluate(const Cnn14<float>& model, const std::vector<Segment>& segments,
                    const std::vector<RunnerProfile>& profiles,
                    const std::filesystem::path& feature_base, int crop_frames, int n_threads,
                    int batch_size) {
  if (segments.empty()) throw EmptyInput("evaluate over zero segments");
  const FeatureBatchSource src = FeatureBatchSource::load(segments, feature_base, crop_frames);

  std::vector<double> preds(segments.size());
  const std::size_t n_batches =
      (segments.size() + static_cast<std::size_t>(batch_size) - 1) / batch_size;
  parallel_for(n_batches, n_threads, [&](std::size_t bi) {
    const std::size_t start = bi * static_cast<std::size_t>(batch_size);
    const std::size_t end =
        std::min(segments.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<std::size_t> indices;
    indices.reserve(end - start);
    for (std::size_t i = start; i < end; ++i) indices.push_back(i);
    nn::Tensor<float> out = model.forward(src.batch(indices), /*training=*/false);
    for (std::size_t i = start; i < end; ++i) {
      preds[i] = static_cast<double>(out.data()[i - start]);
    }
  });

  EvalReport report;
  report.pairs.reserve(segments.size());
  for (std::size_t i = 0; i < segments.size(); ++i) {
    report.pairs.push_back(
        EvalPair{segment_id(segments[i]), segments[i].runner_id, preds[i], src.targets[i]});
  }
  report.global_mae = mae(preds, src.targets);
  if (preds.size() >= 2) {
    report.global_ccc = ccc(preds, src.targets);
  }
  report.strata = stratify(report, profiles);
  report.per_runner = per_runner(report);
  return report;
}

namespace {

std::string format_exact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void emit_report(const EvalReport& report, const std::filesystem::path& out_dir,
                 bool clip_predictions) {
  std::filesystem::create_directories(out_dir);

  std::vector<std::vector<std::string>> pair_rows;
  pair_rows.reserve(report.pairs.size());
  for (const auto& p : report.pairs) {
    double pred = p.prediction;
    if (clip_predictions) pred = std::clamp(pred, 6.0, 20.0);
    pair_rows.push_back({p.segment_id, p.runner_id, format_exact(pred), format_exact(p.target)});
  }
  write_csv(out_dir / "pairs.csv", {"segment_id", "runner_id", "prediction", "target"},
            pair_rows);

  std::vector<std::vector<std::string>> strata_rows;
  for (const auto& [key, stats] : report.strata) {
    strata_rows.push_back({to_string(key.age_range), to_string(key.sex),
                           format_exact(stats.mae), std::to_string(stats.count)});
  }
  write_csv(out_dir / "strata.csv", {"age_range", "sex", "mae", "count"}, strata_rows);

  std::vector<std::vector<std::string>> runner_rows;
  for (const auto& r : report.per_runner) {
    runner_rows.push_back({r.runner_id, format_exact(r.mae), std::to_string(r.count)});
  }
  write_csv(out_dir / "per_runner.csv", {"runner_id", "mae", "count"}, runner_rows);

  std::vector<std::vector<std::string>> metric_rows;
  metric_rows.push_back({"n", std::to_string(report.pairs.size())});
  metric_rows.push_back({"global_mae", format_exact(report.global_mae)});
  metric_rows.push_back(
      {"global_ccc", report.global_ccc ? format_exact(*report.global_ccc) : "undefined"});
  write_csv(out_dir / "metrics.csv", {"metric", "value"}, metric_rows);

  // Plot data: one numeric row per cell / runner, in rank order.
  {
    std::ofstream out(out_dir / "plot_strata.txt");
    if (!out) throw IoError("cannot write plot_strata.txt");
    int index = 0;
    for (const auto& [key, stats] : report.strata) {
      out << index++ << ' ' << format_double(stats.mae) << '\n';
    }
  }
  {
    std::ofstream out(out_dir / "plot_per_runner.txt");
    if (!out) throw IoError("cannot write plot_per_runner.txt");
    int rank = 0;
    for (const auto& r : report.per_runner) {
      out << rank++ << ' ' << format_double(r.mae) << '\n';
    }
  }
}

}  // namespace stridesense
