#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "egm/signal_io.hpp"
#include "egm/types.hpp"

namespace egm {

// Bijective token-string <-> id map.  Layout is contiguous and fixed:
//   0..3                [CLS] [SEP] [MASK] [PAD]
//   4      .. 4+V-1     signal_0 .. signal_{V-1}
//   4+V    .. 5+V       afib_0, afib_1
//   6+V    .. 5+2V      augsig_0 .. augsig_{V-1}
class Vocabulary {
 public:
  static constexpr int kCls = 0;
  static constexpr int kSep = 1;
  static constexpr int kMask = 2;
  static constexpr int kPad = 3;

  Vocabulary() = default;
  explicit Vocabulary(int levels) : levels_(levels) {}

  int levels() const { return levels_; }
  int size() const { return 2 * levels_ + 6; }

  int signal_id(int level) const { return 4 + level; }
  int afib_id(int label) const { return 4 + levels_ + label; }
  int augsig_id(int level) const { return 6 + levels_ + level; }

  bool is_signal(int id) const { return id >= 4 && id < 4 + levels_; }
  bool is_afib(int id) const { return id == afib_id(0) || id == afib_id(1); }
  bool is_augsig(int id) const { return id >= augsig_id(0) && id <= augsig_id(levels_ - 1); }

  // Quantization level of a signal_* or augsig_* token.
  int level_of(int id) const;
  // AFib class of an afib_* token.
  int class_of(int id) const;

  std::string string_of(int id) const;
  int id_of(const std::string& token) const;

 private:
  int levels_ = 0;
};

Vocabulary build_vocabulary(int levels);

void save_vocabulary_json(const std::string& path, const Vocabulary& vocab);
Vocabulary load_vocabulary_json(const std::string& path);

// Positions that were hidden, with enough bookkeeping to undo the mask.
struct MaskPlan {
  std::vector<int> masked_signal_positions;            // sorted
  bool afib_masked = false;
  std::vector<std::pair<int, int>> originals;          // (position, original id), sorted

  bool empty() const { return masked_signal_positions.empty() && !afib_masked; }
  int original_at(int position) const;                 // throws if not recorded
};

// One assembled model input: [CLS] signal tokens [SEP] afib token [SEP],
// optionally with an augmentation run spliced in before the first [SEP].
struct TokenSequence {
  std::vector<int> ids;
  MaskPlan mask;
  int label = 0;
  double s_min = 0.0;
  double s_max = 0.0;
  int afib_position = 0;
  int signal_len = 0;   // |T_S|; signal tokens occupy [1, 1 + signal_len)
  int aug_len = 0;      // augmentation tokens occupy [1 + signal_len, 1 + signal_len + aug_len)
  bool degenerate = false;  // constant source segment
  int placement_id = -1;
  int electrode_id = -1;
  std::int64_t start_index = 0;

  int length() const { return static_cast<int>(ids.size()); }
};

// Per-segment min-max normalization followed by floor(norm * V), with the
// norm = 1 boundary clamped to V-1.  A constant segment maps to all zeros.
std::vector<int> quantize_levels(const VectorXd& segment, int levels);

// Same quantization applied to values already in [0, 1] (no re-normalization);
// used when a transform ran between normalization and quantization.
std::vector<int> quantize_unit_levels(const VectorXd& unit_values, int levels);

TokenSequence tokenize_segment(const VectorXd& segment, int label, const Vocabulary& vocab);
TokenSequence tokenize_segment(const Segment& segment, const Vocabulary& vocab);

// Hides round(rate * signal_len) signal positions chosen uniformly without
// replacement, plus the afib token; [CLS]/[SEP] and augmentation tokens are
// never touched.  The returned plan records every original id.
TokenSequence apply_mask(const TokenSequence& seq, double rate, std::uint64_t seed);

// Restores every masked position from the plan originals.
TokenSequence unmask(const TokenSequence& seq);

// Bin-midpoint reconstruction: level q -> s_min + ((q + 0.5) / V) * (s_max - s_min).
VectorXd detokenize_levels(const std::vector<int>& levels, double s_min, double s_max, int V);
VectorXd detokenize_ids(const std::vector<int>& ids, double s_min, double s_max,
                        const Vocabulary& vocab);

// Signal levels of the sequence, read back from its signal tokens (masked
// positions taken from the plan originals).
std::vector<int> signal_levels(const TokenSequence& seq, const Vocabulary& vocab);

void validate_token_sequence(const TokenSequence& seq, const Vocabulary& vocab);

// Binary dataset container (magic "EGMT"): header (V, M, count) then per-
// sequence records with ids as u16 and extrema as f64.  A vocabulary JSON
// sidecar travels with it.
struct TokenizedDataset {
  int levels = 0;          // V
  int segment_length = 0;  // M
  std::vector<TokenSequence> sequences;
};

void save_dataset(const std::string& path, const TokenizedDataset& ds);
TokenizedDataset load_dataset(const std::string& path);

TokenizedDataset tokenize_segment_set(const SegmentSet& set, const Vocabulary& vocab);

}  // namespace egm
