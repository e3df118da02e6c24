#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "egm/types.hpp"

namespace egm {

// Raw multi-electrode recording: one time x electrode matrix per catheter
// placement, all sharing the same shape, with a per-placement class label
// (0 = normal, 1 = AFib).
struct RecordingTensor {
  std::vector<MatrixXd> placements;  // each I x J
  int sample_rate_hz = 0;
  std::vector<int> labels;  // per placement, 0 or 1

  Eigen::Index time_steps() const { return placements.empty() ? 0 : placements[0].rows(); }
  Eigen::Index electrodes() const { return placements.empty() ? 0 : placements[0].cols(); }
  void validate() const;  // throws DataError on invariant violation
};

// Z-scored recording plus the per-placement statistics it was derived with.
struct NormalizedRecording {
  std::vector<MatrixXd> z;  // same index space as the source
  std::vector<double> mu;
  std::vector<double> sigma;
  int sample_rate_hz = 0;
  std::vector<int> labels;
};

struct Segment {
  VectorXd values;  // length M
  int label = 0;
  int placement_id = 0;
  int electrode_id = 0;
  std::int64_t start_index = 0;
};

struct SegmentSet {
  std::vector<Segment> segments;
  int segment_length = 0;
};

// One WFDB-subset record: text header plus little-endian int16 payload,
// channel-interleaved frames.
struct WfdbRecord {
  std::string header_text;
  std::vector<std::uint8_t> signal_bytes;
};

// Header grammar: first line `name nsig fs nsamples`, then per signal
// `file format gain baseline units`.  Only single-segment format-16 records
// are accepted; anything else is rejected with a ParseError naming the line.
RecordingTensor parse_wfdb(const std::string& header_text,
                           const std::vector<std::uint8_t>& signal_bytes);

// Inverse of parse_wfdb for round trips and fixtures; samples are converted
// to digital units with round(x * gain + baseline) and must fit in int16.
WfdbRecord write_wfdb(const std::string& name, const MatrixXd& samples, int sample_rate_hz,
                      double gain = 200.0, double baseline = 0.0,
                      const std::string& units = "mV");

// First row names the electrodes; every following row is one time step of
// decimal amplitudes.
RecordingTensor parse_csv(const std::string& text, int sample_rate_hz = 1000);

NormalizedRecording zscore_normalize(const RecordingTensor& rec);

// Non-overlapping length-M windows per electrode per placement, contiguous
// from index 0; the trailing remainder is discarded.
SegmentSet segment(const NormalizedRecording& norm, int segment_length);

// Shuffles placement ids with the seed and partitions them by the ratios; no
// placement ends up in two splits.  With stratify=true the partition is done
// independently per class label, which guarantees every non-empty split sees
// both classes when each class has enough placements.
struct SplitResult {
  SegmentSet train, val, test;
};
SplitResult split_by_placement(const SegmentSet& set, const std::array<double, 3>& ratios,
                               std::uint64_t seed, bool stratify = false);

// Labeled synthetic spike trains.  Class 0: fixed inter-spike interval plus
// low Gaussian noise.  Class 1: jittered intervals, variable spike
// amplitudes, and an added high-frequency oscillation.  Deterministic under
// the seed; placements alternate class so placement-level splits stay
// meaningful.
SegmentSet synthesize_dataset(int n_per_class, int segment_length, std::uint64_t seed);

// Binary segment container (magic "EGMS"), byte-stable across runs.
void save_segments(const std::string& path, const SegmentSet& set);
SegmentSet load_segments(const std::string& path);

}  // namespace egm
