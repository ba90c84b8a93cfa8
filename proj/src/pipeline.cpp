#include "stridesense/pipeline.hpp"

#include <cmath>
#include <map>

#include "stridesense/audio_io.hpp"
#include "stridesense/errors.hpp"
#include "stridesense/threading.hpp"

namespace stridesense {

std::vector<Segment> segment_corpus(const Corpus& corpus, double half_window_s,
                                    std::vector<std::string>* warnings) {
  std::vector<Segment> all;
  for (const auto& session : corpus.sessions) {
    if (corpus.find_runner(session.runner_id) == nullptr) {
      throw UnknownRunner("session " + session.session_id + " references unknown runner '" +
                          session.runner_id + "'");
    }
    const WavInfo info = probe_wav_file(session.audio_path);
    auto segs = segment_session(session, info.duration_seconds(), half_window_s, warnings);
    all.insert(all.end(), segs.begin(), segs.end());
  }
  return all;
}

std::vector<Segment> featurize_segments(const Corpus& corpus,
                                        const std::vector<Segment>& segments,
                                        const std::filesystem::path& out_dir,
                                        const FeaturizeOptions& options) {
  options.stft.validate();
  options.mel.validate();
  std::filesystem::create_directories(out_dir / "features");

  std::map<std::string, const SessionManifest*> sessions;
  for (const auto& s : corpus.sessions) sessions[s.session_id] = &s;

  // Group segment indices per session; each worker owns whole sessions.
  std::vector<std::pair<std::string, std::vector<std::size_t>>> groups;
  std::map<std::string, std::size_t> group_index;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const auto& sid = segments[i].session_id;
    if (!sessions.count(sid)) {
      throw ParseError("segment references unknown session '" + sid + "'");
    }
    auto [it, inserted] = group_index.try_emplace(sid, groups.size());
    if (inserted) groups.push_back({sid, {}});
    groups[it->second].second.push_back(i);
  }

  std::vector<Segment> out = segments;
  parallel_for(groups.size(), options.n_threads, [&](std::size_t gi) {
    const auto& [session_id, indices] = groups[gi];
    const SessionManifest* session = sessions.at(session_id);
    const AudioClip clip = decode_wav_file(session->audio_path);
    require_rate(clip, options.mel.sample_rate);

    for (std::size_t ordinal = 0; ordinal < indices.size(); ++ordinal) {
      const std::size_t i = indices[ordinal];
      const Segment& seg = segments[i];
      const auto start =
          static_cast<std::size_t>(std::llround(seg.start_s * options.mel.sample_rate));
      const auto count = static_cast<std::size_t>(
          std::llround((seg.end_s - seg.start_s) * options.mel.sample_rate));
      if (start + count > clip.samples.size()) {
        throw RangeViolation("segment " + segment_id(seg) + " exceeds audio of session " +
                             session_id);
      }
      AudioClip slice;
      slice.sample_rate = clip.sample_rate;
      slice.channel_count_original = clip.channel_count_original;
      slice.samples.assign(clip.samples.begin() + start, clip.samples.begin() + start + count);

      const LogMelSpectrogram spec = log_mel(slice, options.stft, options.mel);
      const std::string rel = "features/" + session_id + "_" + std::to_string(ordinal) + ".smf";
      save_features(out_dir / rel, spec);
      out[i].feature_path = rel;
    }
  });
  return out;
}

}  // namespace stridesense
