#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "egm/interpret.hpp"
#include "egm/model.hpp"
#include "egm/tokenizer.hpp"

namespace egm {

struct LossBreakdown {
  double l_mlm = 0.0;
  double l_afib = 0.0;
  double total = 0.0;
  double alpha1 = 1.0;
  double alpha2 = 1.0;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-2;
  int batch_size_train = 8;
  int batch_size_eval = 1;
  int epochs = 5;
  double alpha1 = 1.0;
  double alpha2 = 1.0;
  CounterfactualKind counterfactual_kind = CounterfactualKind::none;
  double counterfactual_fraction = 0.25;
  double mask_rate = 0.75;
  int substitution_window = 5;
  int addition_segment_length = 250;
  std::uint64_t seed = 0;

  void validate() const;
};

// l_mlm: mean negative log full-vocabulary softmax probability of the
// original token over the masked signal positions.  l_afib: negative log of
// the two-way softmax over the afib_0/afib_1 logits at the afib slot.
// total = alpha1 * l_mlm + alpha2 * l_afib.
template <class S>
LossBreakdown compute_losses(const Matrix<S>& logits, const TokenSequence& seq,
                             const Vocabulary& vocab, double alpha1, double alpha2);

// d(total)/d(logits), computed analytically; optionally also reports the
// breakdown so callers need only one softmax pass.
template <class S>
Matrix<S> loss_gradient_logits(const Matrix<S>& logits, const TokenSequence& seq,
                               const Vocabulary& vocab, double alpha1, double alpha2,
                               LossBreakdown* breakdown = nullptr);

template <class S>
struct AdamWState {
  std::vector<Vector<S>> m;
  std::vector<Vector<S>> v;
  long step = 0;
};

template <class S>
AdamWState<S> make_adamw_state(const std::vector<ParamRef<S>>& params);

// Decoupled weight decay: w <- w - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * w.
// A non-finite gradient refuses the whole step and throws NumericError naming
// the offending parameter.
template <class S>
void adamw_step(std::vector<ParamRef<S>>& params, const std::vector<ParamRef<S>>& grads,
                AdamWState<S>& opt, double lr, double wd, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);

struct EpochStats {
  int epoch = 0;
  double l_mlm = 0.0;
  double l_afib = 0.0;
  double total = 0.0;
  double wall_seconds = 0.0;
};

struct TrainResult {
  ModelState<float> state;
  std::vector<EpochStats> history;
  bool diverged = false;
  // Scale factor between the mean reduction used here and a summed MLM loss.
  int masked_positions_per_sequence = 0;
};

// Hook for tests and diagnostics: sees every assembled batch after
// counterfactual injection and masking.
struct BatchObservation {
  int epoch = 0;
  int batch_index = 0;
  std::vector<int> sequence_indices;           // dataset indices, batch order
  std::vector<int> modified;                   // batch slots that got the counterfactual
  const std::vector<TokenSequence>* sequences = nullptr;  // final token streams
};
using BatchObserver = std::function<void(const BatchObservation&)>;

// Deterministic under config.seed.  When a counterfactual kind is set,
// round(fraction * batch_size) samples per batch are replaced by their
// transform: substitution before masking, addition after tokenization,
// label flipping at the afib slot.  On a non-finite loss the run aborts and
// returns the last epoch-boundary state with diverged = true.
TrainResult run_training(const TokenizedDataset& data, const ModelConfig& model_config,
                         const TrainConfig& train_config, const Vocabulary& vocab,
                         const BatchObserver& observer = {});

// History CSV: epoch, l_mlm, l_afib, total, wall_seconds.
void save_history_csv(const std::string& path, const std::vector<EpochStats>& history);

}  // namespace egm
