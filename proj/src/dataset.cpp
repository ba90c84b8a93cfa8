#include "stridesense/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "stridesense/csv.hpp"
#include "stridesense/errors.hpp"
#include "stridesense/rng.hpp"

namespace stridesense {

std::string to_string(AgeRange r) {
  switch (r) {
    case AgeRange::R21_30: return "21-30";
    case AgeRange::R31_40: return "31-40";
    case AgeRange::R41_50: return "41-50";
    case AgeRange::R51_60: return "51-60";
  }
  return "?";
}

std::string to_string(Sex s) { return s == Sex::M ? "M" : "F"; }

std::string to_string(Partition p) {
  switch (p) {
    case Partition::Train: return "train";
    case Partition::Dev: return "dev";
    case Partition::Test: return "test";
  }
  return "?";
}

AgeRange age_range_from_string(const std::string& s) {
  if (s == "21-30") return AgeRange::R21_30;
  if (s == "31-40") return AgeRange::R31_40;
  if (s == "41-50") return AgeRange::R41_50;
  if (s == "51-60") return AgeRange::R51_60;
  throw RangeViolation("age_range '" + s + "' is not one of 21-30, 31-40, 41-50, 51-60");
}

Sex sex_from_string(const std::string& s) {
  if (s == "M") return Sex::M;
  if (s == "F") return Sex::F;
  throw RangeViolation("sex '" + s + "' is not M or F");
}

Partition partition_from_string(const std::string& s) {
  if (s == "train") return Partition::Train;
  if (s == "dev") return Partition::Dev;
  if (s == "test") return Partition::Test;
  throw ParseError("partition '" + s + "' is not train, dev or test");
}

std::string segment_id(const Segment& seg) {
  return seg.session_id + ":" + format_fixed(seg.start_s, 3);
}

const RunnerProfile* Corpus::find_runner(const std::string& runner_id) const {
  for (const auto& r : runners) {
    if (r.runner_id == runner_id) return &r;
  }
  return nullptr;
}

std::vector<Segment> segment_session(const SessionManifest& manifest, double audio_duration_s,
                                     double half_window_s,
                                     std::vector<std::string>* warnings) {
  if (audio_duration_s <= 0.0) throw RangeViolation("audio duration must be positive");
  if (half_window_s <= 0.0) throw RangeViolation("half window must be positive");
  for (std::size_t i = 1; i < manifest.events.size(); ++i) {
    if (!(manifest.events[i].time_s > manifest.events[i - 1].time_s)) {
      throw EventsNotSorted("session " + manifest.session_id + ": event " + std::to_string(i) +
                            " at " + format_fixed(manifest.events[i].time_s, 3) +
                            " s does not follow " +
                            format_fixed(manifest.events[i - 1].time_s, 3) + " s");
    }
  }

  std::vector<Segment> segments;
  for (const auto& event : manifest.events) {
    const double start = event.time_s - half_window_s;
    const double end = event.time_s + half_window_s;
    if (start < 0.0 || end > audio_duration_s) {
      if (warnings) {
        warnings->push_back("session " + manifest.session_id + ": dropped event at " +
                            format_fixed(event.time_s, 3) + " s, window [" +
                            format_fixed(start, 3) + ", " + format_fixed(end, 3) +
                            "] leaves the recording");
      }
      continue;
    }
    Segment seg;
    seg.session_id = manifest.session_id;
    seg.runner_id = manifest.runner_id;
    seg.start_s = start;
    seg.end_s = end;
    seg.fatigue = event.fatigue;
    seg.wellbeing = event.wellbeing;
    seg.surface = event.surface;
    segments.push_back(std::move(seg));
  }
  return segments;
}

PartitionSplit split_partitions(const std::vector<Segment>& segments, const SplitRatios& ratios,
                                std::uint64_t seed) {
  if (!(ratios.train > 0.0 && ratios.dev > 0.0 && ratios.test > 0.0)) {
    throw InvalidConfig("split ratios must be positive");
  }
  if (std::abs(ratios.train + ratios.dev + ratios.test - 1.0) > 1e-9) {
    throw InvalidConfig("split ratios must sum to 1");
  }

  // Sessions in order of first appearance.
  std::vector<std::string> session_order;
  std::map<std::string, std::vector<std::size_t>> by_session;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    auto [it, inserted] = by_session.try_emplace(segments[i].session_id);
    if (inserted) session_order.push_back(segments[i].session_id);
    it->second.push_back(i);
  }
  if (session_order.size() < 3) {
    throw TooFewSessions("need at least 3 sessions to split, got " +
                         std::to_string(session_order.size()));
  }

  Rng rng(seed);
  rng.shuffle(session_order.begin(), session_order.end());

  const double total = static_cast<double>(segments.size());
  const double targets[3] = {ratios.train, ratios.dev, ratios.test};
  PartitionSplit split;
  split.seed = seed;
  split.assignment.assign(segments.size(), Partition::Test);

  int part = 0;
  std::size_t filled = 0;
  for (std::size_t s = 0; s < session_order.size(); ++s) {
    const auto& idxs = by_session[session_order[s]];
    for (std::size_t i : idxs) split.assignment[i] = static_cast<Partition>(part);
    filled += idxs.size();
    if (part < 2) {
      const std::size_t sessions_left = session_order.size() - s - 1;
      const bool target_met = static_cast<double>(filled) >= targets[part] * total;
      // Advance early so each later partition still receives a session.
      const bool must_advance = sessions_left <= static_cast<std::size_t>(2 - part);
      if (target_met || must_advance) {
        ++part;
        filled = 0;
      }
    }
  }
  return split;
}

namespace {

double parse_double_field(const std::string& s, const std::string& what, int line_no) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError("line " + std::to_string(line_no) + ": " + what + " '" + s +
                     "' is not a number");
  }
}

int parse_int_field(const std::string& s, const std::string& what, int line_no) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError("line " + std::to_string(line_no) + ": " + what + " '" + s +
                     "' is not an integer");
  }
}

void validate_event(const AnswerEvent& e, const std::string& context) {
  if (e.fatigue < 6 || e.fatigue > 20) {
    throw RangeViolation(context + ": fatigue " + std::to_string(e.fatigue) +
                         " outside Borg range [6, 20]");
  }
  if (e.wellbeing < -5 || e.wellbeing > 5) {
    throw RangeViolation(context + ": wellbeing " + std::to_string(e.wellbeing) +
                         " outside [-5, 5]");
  }
  if (e.time_s < 0.0) {
    throw RangeViolation(context + ": event time must be >= 0");
  }
}

}  // namespace

Corpus load_manifest(const std::filesystem::path& corpus_dir) {
  Corpus corpus;

  const CsvTable runners = read_csv(corpus_dir / "runners.csv");
  const auto rid = runners.column("runner_id");
  const auto rage = runners.column("age_range");
  const auto rsex = runners.column("sex");
  std::set<std::string> runner_ids;
  for (std::size_t i = 0; i < runners.rows.size(); ++i) {
    const auto& row = runners.rows[i];
    RunnerProfile p;
    p.runner_id = row[rid];
    p.age_range = age_range_from_string(row[rage]);
    p.sex = sex_from_string(row[rsex]);
    if (!runner_ids.insert(p.runner_id).second) {
      throw ParseError("runners.csv line " + std::to_string(i + 2) + ": duplicate runner_id '" +
                       p.runner_id + "'");
    }
    corpus.runners.push_back(std::move(p));
  }

  const CsvTable sessions = read_csv(corpus_dir / "sessions.csv");
  const auto sid = sessions.column("session_id");
  const auto srunner = sessions.column("runner_id");
  const auto saudio = sessions.column("audio_path");
  std::map<std::string, std::size_t> session_index;
  for (std::size_t i = 0; i < sessions.rows.size(); ++i) {
    const auto& row = sessions.rows[i];
    SessionManifest m;
    m.session_id = row[sid];
    m.runner_id = row[srunner];
    if (!runner_ids.count(m.runner_id)) {
      throw UnknownRunner("sessions.csv line " + std::to_string(i + 2) + ": runner_id '" +
                          m.runner_id + "' has no profile");
    }
    std::filesystem::path audio(row[saudio]);
    m.audio_path = audio.is_absolute() ? audio : corpus_dir / audio;
    if (session_index.count(m.session_id)) {
      throw ParseError("sessions.csv line " + std::to_string(i + 2) + ": duplicate session_id '" +
                       m.session_id + "'");
    }
    session_index[m.session_id] = corpus.sessions.size();
    corpus.sessions.push_back(std::move(m));
  }

  const CsvTable events = read_csv(corpus_dir / "events.csv");
  const auto esid = events.column("session_id");
  const auto etime = events.column("time_s");
  const auto efatigue = events.column("fatigue");
  const auto ewellbeing = events.column("wellbeing");
  const auto esurface = events.column("surface");
  for (std::size_t i = 0; i < events.rows.size(); ++i) {
    const int line_no = static_cast<int>(i) + 2;
    const auto& row = events.rows[i];
    const auto it = session_index.find(row[esid]);
    if (it == session_index.end()) {
      throw ParseError("events.csv line " + std::to_string(line_no) + ": unknown session_id '" +
                       row[esid] + "'");
    }
    AnswerEvent e;
    e.time_s = parse_double_field(row[etime], "time_s", line_no);
    e.fatigue = parse_int_field(row[efatigue], "fatigue", line_no);
    e.wellbeing = parse_int_field(row[ewellbeing], "wellbeing", line_no);
    e.surface = row[esurface];
    validate_event(e, "events.csv line " + std::to_string(line_no));
    corpus.sessions[it->second].events.push_back(std::move(e));
  }

  for (const auto& session : corpus.sessions) {
    for (std::size_t i = 1; i < session.events.size(); ++i) {
      if (!(session.events[i].time_s > session.events[i - 1].time_s)) {
        throw EventsNotSorted("session " + session.session_id +
                              ": events.csv times must be strictly increasing");
      }
    }
  }
  return corpus;
}

void save_manifest(const std::filesystem::path& corpus_dir, const Corpus& corpus) {
  std::filesystem::create_directories(corpus_dir);

  std::vector<std::vector<std::string>> runner_rows;
  for (const auto& r : corpus.runners) {
    runner_rows.push_back({r.runner_id, to_string(r.age_range), to_string(r.sex)});
  }
  write_csv(corpus_dir / "runners.csv", {"runner_id", "age_range", "sex"}, runner_rows);

  std::vector<std::vector<std::string>> session_rows;
  std::vector<std::vector<std::string>> event_rows;
  for (const auto& s : corpus.sessions) {
    // Store audio paths relative to the corpus directory when possible.
    std::string audio = s.audio_path.string();
    const auto rel = s.audio_path.lexically_proximate(corpus_dir);
    if (!rel.empty() && rel.native()[0] != '.') audio = rel.string();
    session_rows.push_back({s.session_id, s.runner_id, audio});
    for (const auto& e : s.events) {
      event_rows.push_back({s.session_id, format_fixed(e.time_s, 3), std::to_string(e.fatigue),
                            std::to_string(e.wellbeing), e.surface});
    }
  }
  write_csv(corpus_dir / "sessions.csv", {"session_id", "runner_id", "audio_path"}, session_rows);
  write_csv(corpus_dir / "events.csv",
            {"session_id", "time_s", "fatigue", "wellbeing", "surface"}, event_rows);
}

namespace {

const std::vector<std::string> kSegmentHeader = {"session_id", "runner_id", "start_s", "end_s",
                                                 "fatigue",    "wellbeing", "surface", "feature_path"};

std::vector<std::string> segment_row(const Segment& s) {
  return {s.session_id,
          s.runner_id,
          format_fixed(s.start_s, 3),
          format_fixed(s.end_s, 3),
          std::to_string(s.fatigue),
          std::to_string(s.wellbeing),
          s.surface,
          s.feature_path};
}

Segment segment_from_row(const CsvTable& t, const std::vector<std::string>& row, int line_no) {
  Segment s;
  s.session_id = row[t.column("session_id")];
  s.runner_id = row[t.column("runner_id")];
  s.start_s = parse_double_field(row[t.column("start_s")], "start_s", line_no);
  s.end_s = parse_double_field(row[t.column("end_s")], "end_s", line_no);
  s.fatigue = parse_int_field(row[t.column("fatigue")], "fatigue", line_no);
  s.wellbeing = parse_int_field(row[t.column("wellbeing")], "wellbeing", line_no);
  s.surface = row[t.column("surface")];
  s.feature_path = row[t.column("feature_path")];
  if (s.fatigue < 6 || s.fatigue > 20) {
    throw RangeViolation("segments line " + std::to_string(line_no) + ": fatigue " +
                         std::to_string(s.fatigue) + " outside [6, 20]");
  }
  if (s.wellbeing < -5 || s.wellbeing > 5) {
    throw RangeViolation("segments line " + std::to_string(line_no) + ": wellbeing outside [-5, 5]");
  }
  return s;
}

}  // namespace

void save_segments(const std::filesystem::path& path, const std::vector<Segment>& segments) {
  std::vector<std::vector<std::string>> rows;
  rows.reserve(segments.size());
  for (const auto& s : segments) rows.push_back(segment_row(s));
  write_csv(path, kSegmentHeader, rows);
}

std::vector<Segment> load_segments(const std::filesystem::path& path) {
  const CsvTable t = read_csv(path);
  std::vector<Segment> segments;
  segments.reserve(t.rows.size());
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    segments.push_back(segment_from_row(t, t.rows[i], static_cast<int>(i) + 2));
  }
  return segments;
}

void save_partitions(const std::filesystem::path& path, const std::vector<Segment>& segments,
                     const PartitionSplit& split) {
  if (segments.size() != split.assignment.size()) {
    throw LengthMismatch("segments and assignment differ in length");
  }
  auto header = kSegmentHeader;
  header.push_back("partition");
  header.push_back("seed");
  std::vector<std::vector<std::string>> rows;
  rows.reserve(segments.size());
  for (std::size_t i = 0; i < segments.size(); ++i) {
    auto row = segment_row(segments[i]);
    row.push_back(to_string(split.assignment[i]));
    row.push_back(i == 0 ? std::to_string(split.seed) : "");
    rows.push_back(std::move(row));
  }
  write_csv(path, header, rows);
}

std::pair<std::vector<Segment>, PartitionSplit> load_partitions(
    const std::filesystem::path& path) {
  const CsvTable t = read_csv(path);
  const auto pcol = t.column("partition");
  const auto scol = t.column("seed");
  std::vector<Segment> segments;
  PartitionSplit split;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const int line_no = static_cast<int>(i) + 2;
    segments.push_back(segment_from_row(t, t.rows[i], line_no));
    split.assignment.push_back(partition_from_string(t.rows[i][pcol]));
    if (i == 0 && !t.rows[i][scol].empty()) {
      split.seed = std::stoull(t.rows[i][scol]);
    }
  }
  return {std::move(segments), std::move(split)};
}

}  // namespace stridesense
