// stridesense: perceived-exertion regression from body-worn running audio.
// Pipeline stages are subcommands that communicate only through files, so a
// run is resumable and each stage is independently testable.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "stridesense/csv.hpp"
#include "stridesense/dataset.hpp"
#include "stridesense/errors.hpp"
#include "stridesense/evaluation.hpp"
#include "stridesense/features.hpp"
#include "stridesense/model.hpp"
#include "stridesense/pipeline.hpp"
#include "stridesense/synthdata.hpp"
#include "stridesense/threading.hpp"
#include "stridesense/training.hpp"
#include "stridesense/version.hpp"

namespace ss = stridesense;
using nlohmann::ordered_json;

namespace {

std::string timestamp_utc() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// The run manifest lands in the output directory before any product file, and
// is rewritten with timings once the stage finishes.
class RunManifest {
 public:
  RunManifest(const std::filesystem::path& out_dir, const std::string& stage)
      : path_(out_dir / ("run_manifest_" + stage + ".json")) {
    doc_["tool"] = "stridesense";
    doc_["version"] = ss::kVersion;
    doc_["stage"] = stage;
    doc_["started_at"] = timestamp_utc();
    start_ = std::chrono::steady_clock::now();
    std::filesystem::create_directories(out_dir);
    write();
  }

  ordered_json& config() { return doc_["config"]; }
  ordered_json& inputs() { return doc_["inputs"]; }
  ordered_json& outputs() { return doc_["outputs"]; }

  void begin() { write(); }

  void finish() {
    doc_["finished_at"] = timestamp_utc();
    doc_["duration_s"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    write();
  }

 private:
  void write() {
    std::ofstream out(path_, std::ios::binary);
    if (!out) throw ss::IoError("cannot write " + path_.string());
    out << doc_.dump(2) << '\n';
  }

  std::filesystem::path path_;
  ordered_json doc_;
  std::chrono::steady_clock::time_point start_;
};

int crop_frames_from_seconds(double crop_seconds, const ss::StftConfig& stft, int sample_rate) {
  if (crop_seconds <= 0.0) return 0;
  const auto samples = static_cast<std::size_t>(crop_seconds * sample_rate);
  return ss::stft_frame_count(samples, stft);
}

struct SynthArgs {
  std::string out;
  ss::SynthConfig cfg;
};

int cmd_synth(const SynthArgs& args) {
  RunManifest manifest(args.out, "synth");
  auto& cfg = manifest.config();
  cfg["runners"] = args.cfg.n_runners;
  cfg["sessions_min"] = args.cfg.min_sessions_per_runner;
  cfg["sessions_max"] = args.cfg.max_sessions_per_runner;
  cfg["duration_s"] = args.cfg.session_duration_s;
  cfg["interval_s"] = {args.cfg.question_interval_min_s, args.cfg.question_interval_max_s};
  cfg["breathing_gain"] = args.cfg.breathing_gain;
  cfg["step_rate_hz"] = args.cfg.step_rate_hz;
  cfg["noise_floor"] = args.cfg.noise_floor;
  cfg["seed"] = args.cfg.seed;
  manifest.outputs()["corpus_dir"] = args.out;
  manifest.begin();

  const auto plan = ss::default_demographics_plan(args.cfg.n_runners);
  ss::generate_corpus(args.cfg, plan, args.out);
  const ss::Corpus corpus = ss::load_manifest(args.out);
  std::size_t n_events = 0;
  for (const auto& s : corpus.sessions) n_events += s.events.size();
  std::printf("synth: %zu runners, %zu sessions, %zu answer events -> %s\n",
              corpus.runners.size(), corpus.sessions.size(), n_events, args.out.c_str());
  manifest.finish();
  return 0;
}

struct SegmentArgs {
  std::string corpus;
  std::string out;
  double half_window_s = 15.0;
};

int cmd_segment(const SegmentArgs& args) {
  RunManifest manifest(args.out, "segment");
  manifest.config()["half_window_s"] = args.half_window_s;
  manifest.inputs()["corpus_dir"] = args.corpus;
  manifest.outputs()["segments"] = "segments.csv";
  manifest.begin();

  const ss::Corpus corpus = ss::load_manifest(args.corpus);
  std::vector<std::string> warnings;
  const auto segments = ss::segment_corpus(corpus, args.half_window_s, &warnings);
  for (const auto& w : warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  ss::save_segments(std::filesystem::path(args.out) / "segments.csv", segments);
  std::printf("segment: %zu segments (%zu dropped at boundaries) -> %s/segments.csv\n",
              segments.size(), warnings.size(), args.out.c_str());
  manifest.finish();
  return 0;
}

struct FeaturizeArgs {
  std::string corpus;
  std::string segments;
  std::string out;
  double window_ms = 32.0;
  double hop_ms = 10.0;
  int n_mels = 64;
  double f_min = 0.0;
  double f_max = 8000.0;
  int sample_rate = 16000;
};

int cmd_featurize(const FeaturizeArgs& args) {
  RunManifest manifest(args.out, "featurize");
  auto& cfg = manifest.config();
  cfg["window_ms"] = args.window_ms;
  cfg["hop_ms"] = args.hop_ms;
  cfg["n_mels"] = args.n_mels;
  cfg["f_min"] = args.f_min;
  cfg["f_max"] = args.f_max;
  cfg["sample_rate"] = args.sample_rate;
  manifest.inputs()["corpus_dir"] = args.corpus;
  manifest.inputs()["segments"] = args.segments;
  manifest.outputs()["segments"] = "segments_featurized.csv";
  manifest.begin();

  ss::FeaturizeOptions options;
  options.stft.window_length = static_cast<int>(args.window_ms * args.sample_rate / 1000.0);
  options.stft.hop_length = static_cast<int>(args.hop_ms * args.sample_rate / 1000.0);
  options.stft.fft_size = options.stft.window_length;
  options.mel.n_mels = args.n_mels;
  options.mel.f_min = args.f_min;
  options.mel.f_max = args.f_max;
  options.mel.sample_rate = args.sample_rate;
  options.n_threads = ss::thread_count_from_env();

  const ss::Corpus corpus = ss::load_manifest(args.corpus);
  const auto segments = ss::load_segments(args.segments);
  const auto featurized = ss::featurize_segments(corpus, segments, args.out, options);
  ss::save_segments(std::filesystem::path(args.out) / "segments_featurized.csv", featurized);
  std::printf("featurize: %zu segments, %d worker(s) -> %s/features\n", featurized.size(),
              options.n_threads, args.out.c_str());
  manifest.finish();
  return 0;
}

struct SplitArgs {
  std::string segments;
  std::string out;
  std::vector<double> ratios{0.56, 0.23, 0.21};
  std::uint64_t seed = 1;
};

int cmd_split(const SplitArgs& args) {
  if (args.ratios.size() != 3) {
    throw ss::InvalidConfig("--ratios needs exactly three values");
  }
  RunManifest manifest(args.out, "split");
  manifest.config()["ratios"] = args.ratios;
  manifest.config()["seed"] = args.seed;
  manifest.inputs()["segments"] = args.segments;
  manifest.outputs()["partitions"] = "partitions.csv";
  manifest.begin();

  const auto segments = ss::load_segments(args.segments);
  const ss::SplitRatios ratios{args.ratios[0], args.ratios[1], args.ratios[2]};
  const auto split = ss::split_partitions(segments, ratios, args.seed);
  ss::save_partitions(std::filesystem::path(args.out) / "partitions.csv", segments, split);

  std::size_t counts[3] = {0, 0, 0};
  for (auto p : split.assignment) counts[static_cast<int>(p)]++;
  std::printf("split: train %zu, dev %zu, test %zu -> %s/partitions.csv\n", counts[0], counts[1],
              counts[2], args.out.c_str());
  manifest.finish();
  return 0;
}

struct TrainArgs {
  std::string partitions;
  std::string out;
  ss::TrainConfig cfg;
  double width_scale = 1.0;
  double crop_seconds = 0.0;
  std::uint64_t seed = 1;
  std::string init = "random";
  std::string init_checkpoint;
};

int cmd_train(const TrainArgs& args) {
  if (args.init != "random" && args.init != "checkpoint") {
    throw ss::InvalidConfig("--init must be 'random' or 'checkpoint'");
  }
  if (args.init == "checkpoint" && args.init_checkpoint.empty()) {
    throw ss::InvalidConfig("--init checkpoint requires --init-checkpoint <path>");
  }

  RunManifest manifest(args.out, "train");
  auto& cfg = manifest.config();
  cfg["epochs"] = args.cfg.epochs;
  cfg["batch_size"] = args.cfg.batch_size;
  cfg["learning_rate"] = args.cfg.optimizer.learning_rate;
  cfg["momentum"] = args.cfg.optimizer.momentum;
  cfg["weight_decay"] = args.cfg.optimizer.weight_decay;
  cfg["width_scale"] = args.width_scale;
  cfg["crop_seconds"] = args.crop_seconds;
  cfg["seed"] = args.seed;
  cfg["init"] = args.init;
  if (!args.init_checkpoint.empty()) cfg["init_checkpoint"] = args.init_checkpoint;
  manifest.inputs()["partitions"] = args.partitions;
  manifest.outputs()["checkpoint"] = "checkpoint.ssck";
  manifest.outputs()["history"] = "history.csv";
  manifest.begin();

  auto [segments, split] = ss::load_partitions(args.partitions);
  std::vector<ss::Segment> train_segs, dev_segs;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    if (split.assignment[i] == ss::Partition::Train) train_segs.push_back(segments[i]);
    else if (split.assignment[i] == ss::Partition::Dev) dev_segs.push_back(segments[i]);
  }

  ss::TrainConfig train_cfg = args.cfg;
  train_cfg.shuffle_seed = args.seed;
  train_cfg.dropout_seed = ss::derive_seed(args.seed, 0xD0);
  train_cfg.crop_frames = crop_frames_from_seconds(args.crop_seconds, ss::StftConfig{}, 16000);

  ss::ModelConfig model_cfg;
  model_cfg.width_scale = args.width_scale;

  ss::Cnn14<float> model =
      args.init == "random"
          ? ss::Cnn14<float>(model_cfg, ss::derive_seed(args.seed, 0x11))
          : ss::replace_head(args.init_checkpoint, ss::derive_seed(args.seed, 0x22));

  const auto feature_base = std::filesystem::path(args.partitions).parent_path();
  const ss::TrainHistory history = ss::train(model, train_segs, dev_segs, feature_base, train_cfg);

  const auto& best = history.epochs.at(history.best_epoch - 1);
  ss::CheckpointMeta meta;
  meta.epoch = history.best_epoch;
  meta.dev_mae = best.dev_mae;
  meta.dev_ccc = best.dev_ccc;
  ss::save_checkpoint(model, std::filesystem::path(args.out) / "checkpoint.ssck", meta);
  ss::save_history(std::filesystem::path(args.out) / "history.csv", history);
  std::printf("train: best epoch %d, dev MAE %.3f, dev CCC %.3f -> %s\n", history.best_epoch,
              best.dev_mae, best.dev_ccc, args.out.c_str());
  manifest.finish();
  return 0;
}

struct EvaluateArgs {
  std::string partitions;
  std::string corpus;
  std::string checkpoint;
  std::string out;
  std::string partition = "test";
  double crop_seconds = 0.0;
  bool clip_output = false;
};

int cmd_evaluate(const EvaluateArgs& args) {
  RunManifest manifest(args.out, "evaluate");
  manifest.config()["partition"] = args.partition;
  manifest.config()["crop_seconds"] = args.crop_seconds;
  manifest.config()["clip_output"] = args.clip_output;
  manifest.inputs()["partitions"] = args.partitions;
  manifest.inputs()["corpus_dir"] = args.corpus;
  manifest.inputs()["checkpoint"] = args.checkpoint;
  manifest.begin();

  const ss::Partition wanted = ss::partition_from_string(args.partition);
  auto [segments, split] = ss::load_partitions(args.partitions);
  std::vector<ss::Segment> chosen;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    if (split.assignment[i] == wanted) chosen.push_back(segments[i]);
  }

  const ss::Corpus corpus = ss::load_manifest(args.corpus);
  ss::LoadedModel loaded = ss::load_checkpoint(args.checkpoint);
  const int crop = crop_frames_from_seconds(args.crop_seconds, ss::StftConfig{}, 16000);
  const auto feature_base = std::filesystem::path(args.partitions).parent_path();
  const ss::EvalReport report =
      ss::evaluate(loaded.model, chosen, corpus.runners, feature_base, crop,
                   ss::thread_count_from_env());
  ss::emit_report(report, args.out, args.clip_output);

  std::printf("evaluate[%s]: n %zu, MAE %.4f, CCC %s -> %s\n", args.partition.c_str(),
              report.pairs.size(), report.global_mae,
              report.global_ccc ? ss::format_double(*report.global_ccc).c_str() : "undefined",
              args.out.c_str());
  manifest.finish();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fatigue regression from running audio"};
  app.set_version_flag("--version", ss::kVersion);
  app.require_subcommand(1);

  SynthArgs synth_args;
  auto* synth = app.add_subcommand("synth", "generate a labelled synthetic corpus");
  synth->add_option("--out", synth_args.out, "corpus output directory")->required();
  synth->add_option("--runners", synth_args.cfg.n_runners, "number of runners");
  synth->add_option("--sessions-min", synth_args.cfg.min_sessions_per_runner);
  synth->add_option("--sessions-max", synth_args.cfg.max_sessions_per_runner);
  synth->add_option("--duration", synth_args.cfg.session_duration_s, "session length, seconds");
  synth->add_option("--interval-min", synth_args.cfg.question_interval_min_s);
  synth->add_option("--interval-max", synth_args.cfg.question_interval_max_s);
  synth->add_option("--breathing-gain", synth_args.cfg.breathing_gain);
  synth->add_option("--step-rate", synth_args.cfg.step_rate_hz);
  synth->add_option("--noise-floor", synth_args.cfg.noise_floor);
  synth->add_option("--seed", synth_args.cfg.seed);

  SegmentArgs segment_args;
  auto* segment = app.add_subcommand("segment", "cut labelled windows around answer events");
  segment->add_option("--corpus", segment_args.corpus, "corpus directory")->required();
  segment->add_option("--out", segment_args.out, "output directory")->required();
  segment->add_option("--half-window", segment_args.half_window_s, "seconds on each side");

  FeaturizeArgs feat_args;
  auto* featurize = app.add_subcommand("featurize", "extract log-mel features per segment");
  featurize->add_option("--corpus", feat_args.corpus)->required();
  featurize->add_option("--segments", feat_args.segments, "segments.csv path")->required();
  featurize->add_option("--out", feat_args.out, "output directory")->required();
  featurize->add_option("--window-ms", feat_args.window_ms);
  featurize->add_option("--hop-ms", feat_args.hop_ms);
  featurize->add_option("--mels", feat_args.n_mels);
  featurize->add_option("--fmin", feat_args.f_min);
  featurize->add_option("--fmax", feat_args.f_max);
  featurize->add_option("--rate", feat_args.sample_rate);

  SplitArgs split_args;
  auto* split = app.add_subcommand("split", "assign whole sessions to train/dev/test");
  split->add_option("--segments", split_args.segments, "featurized segments.csv")->required();
  split->add_option("--out", split_args.out, "output directory")->required();
  split->add_option("--ratios", split_args.ratios, "train,dev,test shares")->expected(3)
      ->delimiter(',');
  split->add_option("--seed", split_args.seed);

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "train the regressor");
  train->add_option("--partitions", train_args.partitions, "partitions.csv path")->required();
  train->add_option("--out", train_args.out, "output directory")->required();
  train->add_option("--epochs", train_args.cfg.epochs);
  train->add_option("--batch-size", train_args.cfg.batch_size);
  train->add_option("--lr", train_args.cfg.optimizer.learning_rate);
  train->add_option("--momentum", train_args.cfg.optimizer.momentum);
  train->add_option("--weight-decay", train_args.cfg.optimizer.weight_decay);
  train->add_option("--width-scale", train_args.width_scale, "channel width multiplier");
  train->add_option("--crop-seconds", train_args.crop_seconds, "leading crop per segment, 0=full");
  train->add_option("--seed", train_args.seed);
  train->add_option("--init", train_args.init, "random | checkpoint");
  train->add_option("--init-checkpoint", train_args.init_checkpoint,
                    "source checkpoint for head replacement");
  train->add_flag("--verbose", train_args.cfg.verbose, "per-epoch progress on stderr");

  EvaluateArgs eval_args;
  auto* evaluate = app.add_subcommand("evaluate", "score a checkpoint and emit report tables");
  evaluate->add_option("--partitions", eval_args.partitions)->required();
  evaluate->add_option("--corpus", eval_args.corpus, "corpus directory (runner profiles)")
      ->required();
  evaluate->add_option("--checkpoint", eval_args.checkpoint)->required();
  evaluate->add_option("--out", eval_args.out, "report output directory")->required();
  evaluate->add_option("--partition", eval_args.partition, "train | dev | test");
  evaluate->add_option("--crop-seconds", eval_args.crop_seconds);
  evaluate->add_flag("--clip-output", eval_args.clip_output,
                     "clamp emitted predictions to [6, 20]");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*synth) return cmd_synth(synth_args);
    if (*segment) return cmd_segment(segment_args);
    if (*featurize) return cmd_featurize(feat_args);
    if (*split) return cmd_split(split_args);
    if (*train) return cmd_train(train_args);
    if (*evaluate) return cmd_evaluate(eval_args);
  } catch (const ss::InvalidConfig& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const ss::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
