#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "egm/model.hpp"
#include "egm/tokenizer.hpp"

namespace egm {

// AFib is the positive class.
struct ConfusionMatrix {
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::int64_t total() const { return tp + fp + tn + fn; }
  void add(int truth, int predicted);
};

// Zero denominators yield nullopt, which serializes as JSON null.
struct ClassificationMetrics {
  std::optional<double> sensitivity, specificity, ppv, npv, accuracy;
};

ClassificationMetrics classification_metrics(const ConfusionMatrix& cm);

struct EvalReport {
  ClassificationMetrics classification;
  ConfusionMatrix confusion;
  double mse = 0.0;
  double mae = 0.0;
  std::int64_t n_sequences = 0;
  std::int64_t n_masked_positions = 0;
  // Times the unrestricted argmax landed outside the signal tokens and the
  // restricted argmax was used instead.
  std::int64_t decoding_incidents = 0;

  std::string to_json_string() const;
};

// Squared/absolute reconstruction error at the masked signal positions,
// measured after bin-midpoint detokenization with the sequence's extrema.
// `predicted_levels` must cover mask.masked_signal_positions in order.
struct InterpolationError {
  double sse = 0.0;  // sum of squared errors
  double sae = 0.0;  // sum of absolute errors
  std::int64_t count = 0;
};
InterpolationError interpolation_error(const std::vector<int>& predicted_levels,
                                       const TokenSequence& seq, const Vocabulary& vocab);

// Pair (mse, mae) over one sequence.
std::pair<double, double> interpolation_metrics(const std::vector<int>& predicted_levels,
                                                const TokenSequence& seq, const Vocabulary& vocab);

struct EvalOptions {
  double mask_rate = 0.75;
  std::uint64_t seed = 0;
  int batch_size = 1;
  // Optional CSV sinks (written when non-empty).
  std::string per_sequence_csv;
  std::string per_position_csv;
};

// The deterministic mask seed used for dataset entry `index`; exposed so
// external checks can reproduce the exact evaluation masking.
std::uint64_t eval_mask_seed(std::uint64_t root, std::int64_t index);

// Per sequence: mask under the standard regime, one forward pass, argmax over
// the two afib tokens for the class and argmax over signal tokens at masked
// positions for interpolation.
template <class S>
EvalReport evaluate(const ModelState<S>& state, const TokenizedDataset& data,
                    const Vocabulary& vocab, const EvalOptions& options);

// Effective global positions for a sequence: {0, afib_position} plus any
// extras configured on the model.
AttentionPattern pattern_for_sequence(const ModelConfig& config, int seq_len, int afib_position,
                                      std::uint64_t seed);

}  // namespace egm
