#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace stridesense {

enum class AgeRange { R21_30, R31_40, R41_50, R51_60 };
enum class Sex { M, F };
enum class Partition { Train, Dev, Test };

std::string to_string(AgeRange r);
std::string to_string(Sex s);
std::string to_string(Partition p);
AgeRange age_range_from_string(const std::string& s);
Sex sex_from_string(const std::string& s);
Partition partition_from_string(const std::string& s);

struct RunnerProfile {
  std::string runner_id;
  AgeRange age_range = AgeRange::R21_30;
  Sex sex = Sex::M;
};

// One in-run questionnaire answer: Borg RPE fatigue in [6, 20], wellbeing in
// [-5, 5], surface as free text.
struct AnswerEvent {
  double time_s = 0.0;
  int fatigue = 6;
  int wellbeing = 0;
  std::string surface;
};

struct SessionManifest {
  std::string session_id;
  std::string runner_id;
  std::filesystem::path audio_path;
  std::vector<AnswerEvent> events;  // strictly increasing time_s
};

// A 30 s labelled window around one answer event.
struct Segment {
  std::string session_id;
  std::string runner_id;
  double start_s = 0.0;
  double end_s = 0.0;
  int fatigue = 6;
  int wellbeing = 0;
  std::string surface;
  std::string feature_path;  // empty until featurized; relative to its table's directory
};

std::string segment_id(const Segment& seg);

// Assignment runs parallel to the segment list it was computed from.
struct PartitionSplit {
  std::vector<Partition> assignment;
  std::uint64_t seed = 0;
};

struct SplitRatios {
  double train = 0.56;
  double dev = 0.23;
  double test = 0.21;
};

struct Corpus {
  std::vector<RunnerProfile> runners;
  std::vector<SessionManifest> sessions;

  const RunnerProfile* find_runner(const std::string& runner_id) const;
};

// Cuts one candidate window [t-half, t+half] per event. Windows that would
// leave [0, audio_duration_s] are dropped (a note is appended to `warnings`
// when given); overlapping windows from adjacent events are both kept.
std::vector<Segment> segment_session(const SessionManifest& manifest, double audio_duration_s,
                                     double half_window_s = 15.0,
                                     std::vector<std::string>* warnings = nullptr);

// Whole-session greedy assignment: sessions are shuffled by the seeded RNG
// and accumulated into train, then dev, then test until each partition's
// segment share meets its ratio target. Sessions never straddle partitions,
// so the test partition is session-disjoint from train and dev by
// construction. Deterministic given the seed.
PartitionSplit split_partitions(const std::vector<Segment>& segments, const SplitRatios& ratios,
                                std::uint64_t seed);

// Corpus directory layout: runners.csv, sessions.csv, events.csv, with audio
// paths resolved relative to the directory. All type invariants are validated
// on load.
Corpus load_manifest(const std::filesystem::path& corpus_dir);
void save_manifest(const std::filesystem::path& corpus_dir, const Corpus& corpus);

void save_segments(const std::filesystem::path& path, const std::vector<Segment>& segments);
std::vector<Segment> load_segments(const std::filesystem::path& path);

void save_partitions(const std::filesystem::path& path, const std::vector<Segment>& segments,
                     const PartitionSplit& split);
std::pair<std::vector<Segment>, PartitionSplit> load_partitions(
    const std::filesystem::path& path);

}  // namespace stridesense
