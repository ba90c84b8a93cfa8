#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "stridesense/dataset.hpp"
#include "stridesense/features.hpp"

namespace stridesense {

// Cuts 30 s windows for every session in the corpus, probing each recording's
// duration from its WAV header.
std::vector<Segment> segment_corpus(const Corpus& corpus, double half_window_s = 15.0,
                                    std::vector<std::string>* warnings = nullptr);

struct FeaturizeOptions {
  StftConfig stft;
  MelConfig mel;
  int n_threads = 1;
};

// Extracts log-mel features for every segment, one cache file per segment
// under out_dir/features/. Sessions are processed in parallel with no shared
// mutable state; each session's audio is decoded once. Returns the segments
// with feature_path filled in (relative to out_dir), in input order.
std::vector<Segment> featurize_segments(const Corpus& corpus,
                                        const std::vector<Segment>& segments,
                                        const std::filesystem::path& out_dir,
                                        const FeaturizeOptions& options);

}  // namespace stridesense
