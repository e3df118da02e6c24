#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "egm/metrics.hpp"
#include "egm/model.hpp"
#include "egm/tokenizer.hpp"

namespace egm {

enum class CounterfactualKind { none, substitution, addition, label_flip };
std::string to_string(CounterfactualKind kind);
CounterfactualKind counterfactual_kind_from_string(const std::string& name);

struct CounterfactualSpec {
  CounterfactualKind kind = CounterfactualKind::none;
  int window = 5;            // moving-average width (substitution); odd
  int segment_length = 250;  // augmentation run length (addition)
  std::uint64_t seed = 0;
};

struct AttributionReport {
  VectorXd per_token_scores;
  double completeness_residual = 0.0;
  double f_input = 0.0;
  double f_baseline = 0.0;
  std::string target_description;
  std::string baseline_description;
  int steps = 0;
};

struct IgTarget {
  enum class Kind { afib_logit_diff, token_at_position };
  Kind kind = Kind::afib_logit_diff;
  int position = 0;
  int token_id = 0;

  static IgTarget afib() { return IgTarget{}; }
  static IgTarget token(int position, int token_id) {
    return IgTarget{Kind::token_at_position, position, token_id};
  }
};

struct PathIntegralResult {
  MatrixXd attributions;  // per input dimension: (x - x') .* averaged gradient
  double f_input = 0.0;
  double f_baseline = 0.0;
};

// Midpoint-rule approximation of the attribution path integral from
// `baseline` to `input`.  `value_and_grad(x, grad_out)` must return F(x) and
// write dF/dx into grad_out.  Exact for F linear in x at any steps >= 1.
template <class F>
PathIntegralResult integrate_gradients_path(F&& value_and_grad, const MatrixXd& input,
                                            const MatrixXd& baseline, int steps) {
  if (steps < 1) throw DataError("integrated gradients: steps must be >= 1");
  if (input.rows() != baseline.rows() || input.cols() != baseline.cols())
    throw DataError("integrated gradients: baseline shape does not match input");

  const MatrixXd delta = input - baseline;
  MatrixXd grad_sum = MatrixXd::Zero(input.rows(), input.cols());
  MatrixXd grad(input.rows(), input.cols());
  for (int s = 1; s <= steps; ++s) {
    const double alpha = (s - 0.5) / steps;
    const MatrixXd point = baseline + alpha * delta;
    value_and_grad(point, grad);
    if (!grad.allFinite())
      throw NumericError("integrated gradients: non-finite gradient at step " + std::to_string(s));
    grad_sum += grad;
  }

  PathIntegralResult result;
  result.attributions = delta.cwiseProduct(grad_sum / steps);
  result.f_input = value_and_grad(input, grad);
  result.f_baseline = value_and_grad(baseline, grad);
  return result;
}

// Path attribution of the model through its embedding-level entry point.
// Baseline: [PAD] token embeddings of identical length.  Per-token scores are
// per-dimension attributions summed over the embedding axis; the default
// target is logit(afib_1) - logit(afib_0) at the sequence's afib slot.
// Computed at 64-bit precision regardless of the state's scalar type.
template <class S>
AttributionReport integrated_gradients(const ModelState<S>& state, const TokenSequence& seq,
                                       const Vocabulary& vocab, const IgTarget& target,
                                       int steps = 64);

// Per-token attention received: for every position, the column mean over the
// rows whose pattern admits it, averaged over layers and heads, normalized to
// sum to one.
template <class S>
VectorXd attention_summary(const ForwardTrace<S>& trace);

// Centered moving average with replicate edge padding; window must be odd.
VectorXd token_substitution(const VectorXd& segment, int window);

// Level-space variant for already-tokenized sequences: signal levels are
// mapped to bin midpoints in [0, 1], smoothed, and re-quantized in place.
TokenSequence token_substitution_sequence(const TokenSequence& seq, int window,
                                          const Vocabulary& vocab);

// Splices a run of `augsig_q` tokens (levels copied from the sequence's own
// quantized signal at a seeded random offset) between the signal run and the
// first [SEP].  Augmented positions are never maskable.
TokenSequence token_addition(const TokenSequence& seq, const CounterfactualSpec& spec,
                             const Vocabulary& vocab);

// Flips the stored label and the afib slot token (or its masked original);
// everything else is untouched.  An involution.
TokenSequence label_flip(const TokenSequence& seq, const Vocabulary& vocab);

// Applies the configured transform to every sequence; per-sequence sub-seeds
// derive from spec.seed.
TokenizedDataset apply_counterfactual(const TokenizedDataset& data, const CounterfactualSpec& spec,
                                      const Vocabulary& vocab);

struct AttributionOverlay {
  int sequence_index = 0;
  std::string model;   // "plain" or "counterfactual"
  std::string regime;  // "ta_masked" or "ta_ts_masked"
  std::vector<double> amplitude;  // per token; NaN where no amplitude applies
  VectorXd attention;
  VectorXd attribution;
};

struct StudyCell {
  std::string model;  // "plain" or "counterfactual"
  std::string input;  // "unmodified" or "modified"
  EvalReport report;
};

struct StudyReport {
  std::vector<StudyCell> grid;  // 2 models x 2 inputs
  std::vector<AttributionOverlay> overlays;
  std::string to_json_string() const;
};

struct StudyOptions {
  EvalOptions eval;
  int overlay_samples = 2;
  int ig_steps = 32;
};

// Evaluates both checkpoints on unmodified and transformed inputs and
// collects attention/attribution overlays for the first few sequences under
// the afib-only and full masking regimes.
template <class S>
StudyReport counterfactual_study(const ModelState<S>& plain, const ModelState<S>& with_cf,
                                 const TokenizedDataset& data, const Vocabulary& vocab,
                                 const CounterfactualSpec& spec, const StudyOptions& options);

}  // namespace egm
