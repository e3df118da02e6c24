#include "egm/training.hpp"

#include <algorithm>
#include <chrono>
#include <deque>
#include <cmath>
#include <fstream>

#include "egm/rng.hpp"

namespace egm {

void TrainConfig::validate() const {
  if (learning_rate <= 0.0) throw DataError("train config: learning_rate must be positive");
  if (weight_decay < 0.0) throw DataError("train config: weight_decay must be non-negative");
  if (batch_size_train < 1) throw DataError("train config: batch_size_train must be positive");
  if (batch_size_eval < 1) throw DataError("train config: batch_size_eval must be positive");
  if (epochs < 1) throw DataError("train config: epochs must be positive");
  if (alpha1 < 0.0 || alpha1 > 1.0 || alpha2 < 0.0 || alpha2 > 1.0)
    throw DataError("train config: loss weights must be in [0, 1]");
  if (counterfactual_fraction < 0.0 || counterfactual_fraction > 1.0)
    throw DataError("train config: counterfactual_fraction must be in [0, 1]");
  if (mask_rate < 0.0 || mask_rate > 1.0)
    throw DataError("train config: mask_rate must be in [0, 1]");
  if (substitution_window < 1 || substitution_window % 2 == 0)
    throw DataError("train config: substitution_window must be a positive odd integer");
  if (addition_segment_length < 1)
    throw DataError("train config: addition_segment_length must be positive");
}

namespace {

// Stable log-sum-exp of one logit row.
template <class S>
double row_lse(const Matrix<S>& logits, Eigen::Index row) {
  const double mx = static_cast<double>(logits.row(row).maxCoeff());
  double acc = 0.0;
  for (Eigen::Index c = 0; c < logits.cols(); ++c)
    acc += std::exp(static_cast<double>(logits(row, c)) - mx);
  return mx + std::log(acc);
}

// Target class for the afib slot: the visible token, or its masked original.
int afib_target_class(const TokenSequence& seq, const Vocabulary& vocab) {
  int id = seq.ids[static_cast<std::size_t>(seq.afib_position)];
  if (id == Vocabulary::kMask) id = seq.mask.original_at(seq.afib_position);
  if (!vocab.is_afib(id)) throw DataError("loss: afib slot holds no afib token");
  return vocab.class_of(id);
}

}  // namespace

template <class S>
LossBreakdown compute_losses(const Matrix<S>& logits, const TokenSequence& seq,
                             const Vocabulary& vocab, double alpha1, double alpha2) {
  if (logits.rows() != seq.length())
    throw DataError("loss: logits do not cover the full sequence");
  const auto& masked = seq.mask.masked_signal_positions;
  if (masked.empty() && alpha1 > 0.0)
    throw DataError("loss: empty mask set with alpha1 > 0");

  LossBreakdown out;
  out.alpha1 = alpha1;
  out.alpha2 = alpha2;

  if (!masked.empty()) {
    double acc = 0.0;
    for (int pos : masked) {
      const int original = seq.mask.original_at(pos);
      const double logp =
          static_cast<double>(logits(pos, original)) - row_lse(logits, pos);
      acc -= logp;
    }
    out.l_mlm = acc / static_cast<double>(masked.size());
  }

  const int target = afib_target_class(seq, vocab);
  const double z0 = static_cast<double>(logits(seq.afib_position, vocab.afib_id(0)));
  const double z1 = static_cast<double>(logits(seq.afib_position, vocab.afib_id(1)));
  const double mx = std::max(z0, z1);
  const double lse = mx + std::log(std::exp(z0 - mx) + std::exp(z1 - mx));
  out.l_afib = -((target == 1 ? z1 : z0) - lse);

  out.total = alpha1 * out.l_mlm + alpha2 * out.l_afib;
  return out;
}

template <class S>
Matrix<S> loss_gradient_logits(const Matrix<S>& logits, const TokenSequence& seq,
                               const Vocabulary& vocab, double alpha1, double alpha2,
                               LossBreakdown* breakdown) {
  LossBreakdown bd = compute_losses(logits, seq, vocab, alpha1, alpha2);
  if (breakdown) *breakdown = bd;

  Matrix<S> d = Matrix<S>::Zero(logits.rows(), logits.cols());
  const auto& masked = seq.mask.masked_signal_positions;
  if (!masked.empty() && alpha1 > 0.0) {
    const double w = alpha1 / static_cast<double>(masked.size());
    for (int pos : masked) {
      const int original = seq.mask.original_at(pos);
      const double mx = static_cast<double>(logits.row(pos).maxCoeff());
      double z = 0.0;
      for (Eigen::Index c = 0; c < logits.cols(); ++c)
        z += std::exp(static_cast<double>(logits(pos, c)) - mx);
      for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        const double p = std::exp(static_cast<double>(logits(pos, c)) - mx) / z;
        d(pos, c) += static_cast<S>(w * (p - (c == original ? 1.0 : 0.0)));
      }
    }
  }

  if (alpha2 > 0.0) {
    const int target = afib_target_class(seq, vocab);
    const double z0 = static_cast<double>(logits(seq.afib_position, vocab.afib_id(0)));
    const double z1 = static_cast<double>(logits(seq.afib_position, vocab.afib_id(1)));
    const double mx = std::max(z0, z1);
    const double e0 = std::exp(z0 - mx);
    const double e1 = std::exp(z1 - mx);
    const double p0 = e0 / (e0 + e1);
    const double p1 = e1 / (e0 + e1);
    d(seq.afib_position, vocab.afib_id(0)) += static_cast<S>(alpha2 * (p0 - (target == 0 ? 1.0 : 0.0)));
    d(seq.afib_position, vocab.afib_id(1)) += static_cast<S>(alpha2 * (p1 - (target == 1 ? 1.0 : 0.0)));
  }
  return d;
}

template <class S>
AdamWState<S> make_adamw_state(const std::vector<ParamRef<S>>& params) {
  AdamWState<S> opt;
  opt.m.reserve(params.size());
  opt.v.reserve(params.size());
  for (const auto& p : params) {
    opt.m.push_back(Vector<S>::Zero(p.size));
    opt.v.push_back(Vector<S>::Zero(p.size));
  }
  return opt;
}

template <class S>
void adamw_step(std::vector<ParamRef<S>>& params, const std::vector<ParamRef<S>>& grads,
                AdamWState<S>& opt, double lr, double wd, double beta1, double beta2, double eps) {
  if (params.size() != grads.size() || params.size() != opt.m.size())
    throw DataError("adamw: parameter/gradient/moment counts do not match");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size != grads[i].size)
      throw DataError("adamw: shape mismatch for " + params[i].name);
    for (std::int64_t k = 0; k < grads[i].size; ++k)
      if (!std::isfinite(static_cast<double>(grads[i].data[k])))
        throw NumericError("adamw: non-finite gradient in " + params[i].name + " at index " +
                           std::to_string(k) + "; step refused");
  }

  opt.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(opt.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    S* w = params[i].data;
    const S* g = grads[i].data;
    S* m = opt.m[i].data();
    S* v = opt.v[i].data();
    for (std::int64_t k = 0; k < params[i].size; ++k) {
      const double gk = static_cast<double>(g[k]);
      const double mk = beta1 * static_cast<double>(m[k]) + (1.0 - beta1) * gk;
      const double vk = beta2 * static_cast<double>(v[k]) + (1.0 - beta2) * gk * gk;
      m[k] = static_cast<S>(mk);
      v[k] = static_cast<S>(vk);
      const double m_hat = mk / bc1;
      const double v_hat = vk / bc2;
      const double wk = static_cast<double>(w[k]);
      w[k] = static_cast<S>(wk - lr * (m_hat / (std::sqrt(v_hat) + eps)) - lr * wd * wk);
    }
  }
}

TrainResult run_training(const TokenizedDataset& data, const ModelConfig& model_config,
                         const TrainConfig& train_config, const Vocabulary& vocab,
                         const BatchObserver& observer) {
  using clock = std::chrono::steady_clock;
  train_config.validate();
  model_config.validate();
  if (data.sequences.empty()) throw DataError("training: empty dataset");
  if (vocab.size() != model_config.vocab_size)
    throw DataError("training: vocabulary size does not match model vocab_size");
  if (vocab.levels() != data.levels)
    throw DataError("training: dataset was tokenized with a different V");

  TrainResult result;
  result.state = init_state<float>(model_config);
  result.masked_positions_per_sequence =
      static_cast<int>(std::lround(train_config.mask_rate * data.segment_length));

  auto params = parameters(result.state);
  AdamWState<float> opt = make_adamw_state(params);
  Gradients<float> grads = make_gradients<float>(model_config);
  auto grad_refs = parameters(grads, model_config);

  // Patterns keyed by (length, afib position); counterfactual addition makes
  // two shapes coexist within one run.  Deque keeps the references stable.
  std::deque<std::pair<std::pair<int, int>, AttentionPattern>> patterns;
  const auto pattern_for = [&](int len, int afib_pos) -> const AttentionPattern& {
    for (const auto& entry : patterns)
      if (entry.first == std::make_pair(len, afib_pos)) return entry.second;
    patterns.emplace_back(std::make_pair(len, afib_pos),
                          pattern_for_sequence(model_config, len, afib_pos, model_config.seed));
    return patterns.back().second;
  };

  const std::uint64_t seed = train_config.seed;
  const std::int64_t n = static_cast<std::int64_t>(data.sequences.size());
  ModelState<float> last_good = result.state;
  std::uint64_t sample_counter = 0;

  for (int epoch = 1; epoch <= train_config.epochs; ++epoch) {
    const auto epoch_start = clock::now();
    std::vector<int> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = static_cast<int>(i);
    Rng order_rng(derive_seed(seed, "order", static_cast<std::uint64_t>(epoch)));
    order_rng.shuffle(order);

    double sum_mlm = 0.0, sum_afib = 0.0, sum_total = 0.0;
    std::int64_t n_samples = 0;
    bool aborted = false;

    int batch_index = 0;
    for (std::int64_t begin = 0; begin < n && !aborted; begin += train_config.batch_size_train) {
      const std::int64_t end = std::min<std::int64_t>(n, begin + train_config.batch_size_train);
      const int batch_n = static_cast<int>(end - begin);

      std::vector<int> modified;
      if (train_config.counterfactual_kind != CounterfactualKind::none) {
        const int k = static_cast<int>(
            std::lround(train_config.counterfactual_fraction * batch_n));
        Rng pick_rng(derive_seed(seed, "cfpick",
                                 static_cast<std::uint64_t>(epoch) * 1000003ULL +
                                     static_cast<std::uint64_t>(batch_index)));
        modified = pick_rng.sample_without_replacement(batch_n, k);
      }

      std::vector<TokenSequence> batch;
      std::vector<int> batch_source;
      batch.reserve(static_cast<std::size_t>(batch_n));
      for (int b = 0; b < batch_n; ++b) {
        const int idx = order[static_cast<std::size_t>(begin + b)];
        batch_source.push_back(idx);
        TokenSequence seq = data.sequences[static_cast<std::size_t>(idx)];
        const bool is_modified =
            std::find(modified.begin(), modified.end(), b) != modified.end();
        const std::uint64_t sample_seed = derive_seed(seed, "sample", sample_counter++);
        if (is_modified) {
          switch (train_config.counterfactual_kind) {
            case CounterfactualKind::substitution:
              seq = token_substitution_sequence(seq, train_config.substitution_window, vocab);
              break;
            case CounterfactualKind::addition: {
              CounterfactualSpec spec;
              spec.kind = CounterfactualKind::addition;
              spec.segment_length = train_config.addition_segment_length;
              spec.seed = sample_seed;
              seq = token_addition(seq, spec, vocab);
              break;
            }
            case CounterfactualKind::label_flip:
              seq = label_flip(seq, vocab);
              break;
            case CounterfactualKind::none:
              break;
          }
        }
        batch.push_back(apply_mask(seq, train_config.mask_rate, derive_seed(seed, "mask", sample_seed)));
      }

      if (observer) {
        BatchObservation obs;
        obs.epoch = epoch;
        obs.batch_index = batch_index;
        obs.sequence_indices = batch_source;
        obs.modified = modified;
        obs.sequences = &batch;
        observer(obs);
      }

      zero_gradients(grads);
      bool finite = true;
      for (const TokenSequence& seq : batch) {
        const AttentionPattern& pattern = pattern_for(seq.length(), seq.afib_position);
        Activations<float> acts;
        const MatrixXf logits = forward(result.state, seq.ids, pattern, &acts);
        LossBreakdown bd;
        const MatrixXf d_logits = loss_gradient_logits(
            logits, seq, vocab, train_config.alpha1, train_config.alpha2, &bd);
        if (!std::isfinite(bd.total)) {
          finite = false;
          break;
        }
        sum_mlm += bd.l_mlm;
        sum_afib += bd.l_afib;
        sum_total += bd.total;
        ++n_samples;
        backward(result.state, acts, d_logits, grads);
      }
      if (!finite) {
        aborted = true;
        break;
      }

      const float inv = 1.0f / static_cast<float>(batch_n);
      for (auto& g : grad_refs)
        for (std::int64_t k = 0; k < g.size; ++k) g.data[k] *= inv;
      try {
        adamw_step(params, grad_refs, opt, train_config.learning_rate, train_config.weight_decay);
      } catch (const NumericError&) {
        aborted = true;
        break;
      }
      ++batch_index;
    }

    if (aborted) {
      result.state = last_good;
      result.diverged = true;
      break;
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.l_mlm = sum_mlm / static_cast<double>(n_samples);
    stats.l_afib = sum_afib / static_cast<double>(n_samples);
    stats.total = sum_total / static_cast<double>(n_samples);
    stats.wall_seconds =
        std::chrono::duration<double>(clock::now() - epoch_start).count();
    result.history.push_back(stats);
    last_good = result.state;
  }
  return result;
}

void save_history_csv(const std::string& path, const std::vector<EpochStats>& history) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  os << "epoch,l_mlm,l_afib,total,wall_seconds\n";
  os.precision(17);
  for (const EpochStats& e : history)
    os << e.epoch << "," << e.l_mlm << "," << e.l_afib << "," << e.total << "," << e.wall_seconds
       << "\n";
  if (!os) throw DataError("failed writing '" + path + "'");
}

template LossBreakdown compute_losses(const Matrix<float>&, const TokenSequence&, const Vocabulary&,
                                      double, double);
template LossBreakdown compute_losses(const Matrix<double>&, const TokenSequence&,
                                      const Vocabulary&, double, double);
template Matrix<float> loss_gradient_logits(const Matrix<float>&, const TokenSequence&,
                                            const Vocabulary&, double, double, LossBreakdown*);
template Matrix<double> loss_gradient_logits(const Matrix<double>&, const TokenSequence&,
                                             const Vocabulary&, double, double, LossBreakdown*);
template AdamWState<float> make_adamw_state(const std::vector<ParamRef<float>>&);
template AdamWState<double> make_adamw_state(const std::vector<ParamRef<double>>&);
template void adamw_step(std::vector<ParamRef<float>>&, const std::vector<ParamRef<float>>&,
                         AdamWState<float>&, double, double, double, double, double);
template void adamw_step(std::vector<ParamRef<double>>&, const std::vector<ParamRef<double>>&,
                         AdamWState<double>&, double, double, double, double, double);

}  // namespace egm
