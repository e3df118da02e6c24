#include "egm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>

#include <json.hpp>

#include "egm/rng.hpp"

namespace egm {

namespace {

using nlohmann::json;

json opt_to_json(const std::optional<double>& v) {
  if (v.has_value()) return *v;
  return nullptr;
}

}  // namespace

void ConfusionMatrix::add(int truth, int predicted) {
  if (truth == 1)
    predicted == 1 ? ++tp : ++fn;
  else
    predicted == 1 ? ++fp : ++tn;
}

ClassificationMetrics classification_metrics(const ConfusionMatrix& cm) {
  if (cm.total() < 1) throw DataError("classification metrics: empty confusion matrix");
  ClassificationMetrics m;
  const auto ratio = [](std::int64_t num, std::int64_t den) -> std::optional<double> {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
  };
  m.sensitivity = ratio(cm.tp, cm.tp + cm.fn);
  m.specificity = ratio(cm.tn, cm.tn + cm.fp);
  m.ppv = ratio(cm.tp, cm.tp + cm.fp);
  m.npv = ratio(cm.tn, cm.tn + cm.fn);
  m.accuracy = ratio(cm.tp + cm.tn, cm.total());
  return m;
}

std::string EvalReport::to_json_string() const {
  json j;
  j["sensitivity"] = opt_to_json(classification.sensitivity);
  j["specificity"] = opt_to_json(classification.specificity);
  j["ppv"] = opt_to_json(classification.ppv);
  j["npv"] = opt_to_json(classification.npv);
  j["accuracy"] = opt_to_json(classification.accuracy);
  j["confusion"] = {{"tp", confusion.tp}, {"fp", confusion.fp}, {"tn", confusion.tn}, {"fn", confusion.fn}};
  j["mse"] = mse;
  j["mae"] = mae;
  j["n_sequences"] = n_sequences;
  j["n_masked_positions"] = n_masked_positions;
  j["decoding_incidents"] = decoding_incidents;
  return j.dump(2);
}

InterpolationError interpolation_error(const std::vector<int>& predicted_levels,
                                       const TokenSequence& seq, const Vocabulary& vocab) {
  const auto& positions = seq.mask.masked_signal_positions;
  if (predicted_levels.size() != positions.size())
    throw DataError("interpolation: prediction must cover every masked signal position");
  InterpolationError err;
  const int V = vocab.levels();
  const double span = seq.s_max - seq.s_min;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const int original = vocab.level_of(seq.mask.original_at(positions[i]));
    const int predicted = predicted_levels[i];
    if (predicted < 0 || predicted >= V)
      throw DataError("interpolation: predicted level out of range");
    const double truth = seq.s_min + ((original + 0.5) / V) * span;
    const double guess = seq.s_min + ((predicted + 0.5) / V) * span;
    const double d = guess - truth;
    err.sse += d * d;
    err.sae += std::abs(d);
    ++err.count;
  }
  return err;
}

std::pair<double, double> interpolation_metrics(const std::vector<int>& predicted_levels,
                                                const TokenSequence& seq, const Vocabulary& vocab) {
  const InterpolationError e = interpolation_error(predicted_levels, seq, vocab);
  if (e.count == 0) return {0.0, 0.0};
  return {e.sse / static_cast<double>(e.count), e.sae / static_cast<double>(e.count)};
}

std::uint64_t eval_mask_seed(std::uint64_t root, std::int64_t index) {
  return derive_seed(root, "evalmask", static_cast<std::uint64_t>(index));
}

AttentionPattern pattern_for_sequence(const ModelConfig& config, int seq_len, int afib_position,
                                      std::uint64_t seed) {
  ModelConfig with_globals = config;
  with_globals.global_positions.push_back(0);
  with_globals.global_positions.push_back(afib_position);
  std::sort(with_globals.global_positions.begin(), with_globals.global_positions.end());
  with_globals.global_positions.erase(
      std::unique(with_globals.global_positions.begin(), with_globals.global_positions.end()),
      with_globals.global_positions.end());
  return attention_pattern(with_globals, seq_len, seed);
}

namespace {

// Argmax over the two afib tokens; never undefined.
template <class S>
int decode_class(const Matrix<S>& logits, const TokenSequence& seq, const Vocabulary& vocab) {
  const Eigen::Index p = seq.afib_position;
  return logits(p, vocab.afib_id(1)) > logits(p, vocab.afib_id(0)) ? 1 : 0;
}

}  // namespace

template <class S>
EvalReport evaluate(const ModelState<S>& state, const TokenizedDataset& data,
                    const Vocabulary& vocab, const EvalOptions& options) {
  if (vocab.size() != state.config.vocab_size)
    throw DataError("evaluate: vocabulary size " + std::to_string(vocab.size()) +
                    " does not match model vocab_size " + std::to_string(state.config.vocab_size));
  if (vocab.levels() != data.levels)
    throw DataError("evaluate: dataset was tokenized with a different V");
  if (data.sequences.empty()) throw DataError("evaluate: empty dataset");

  std::ofstream seq_csv, pos_csv;
  if (!options.per_sequence_csv.empty()) {
    seq_csv.open(options.per_sequence_csv, std::ios::trunc);
    if (!seq_csv) throw DataError("cannot open '" + options.per_sequence_csv + "' for writing");
    seq_csv.precision(17);
    seq_csv << "index,label,predicted,n_masked,sum_sq_err,sum_abs_err\n";
  }
  if (!options.per_position_csv.empty()) {
    pos_csv.open(options.per_position_csv, std::ios::trunc);
    if (!pos_csv) throw DataError("cannot open '" + options.per_position_csv + "' for writing");
    pos_csv << "index,position,original_level,predicted_level\n";
  }

  EvalReport report;
  double sse = 0.0, sae = 0.0;
  const int batch = std::max(1, options.batch_size);

  // Patterns depend only on (length, afib position); the deque cache keeps
  // references stable as new shapes appear.
  std::deque<std::pair<std::pair<int, int>, AttentionPattern>> patterns;
  const auto pattern_for = [&](int len, int afib_pos) -> const AttentionPattern& {
    for (const auto& entry : patterns)
      if (entry.first == std::make_pair(len, afib_pos)) return entry.second;
    patterns.emplace_back(std::make_pair(len, afib_pos),
                          pattern_for_sequence(state.config, len, afib_pos, state.config.seed));
    return patterns.back().second;
  };

  const std::int64_t n = static_cast<std::int64_t>(data.sequences.size());
  for (std::int64_t begin = 0; begin < n; begin += batch) {
    const std::int64_t end = std::min(n, begin + batch);
    for (std::int64_t i = begin; i < end; ++i) {
      const TokenSequence& clean = data.sequences[static_cast<std::size_t>(i)];
      const TokenSequence masked = apply_mask(clean, options.mask_rate, eval_mask_seed(options.seed, i));
      const AttentionPattern& pattern = pattern_for(masked.length(), masked.afib_position);
      const Matrix<S> logits = forward(state, masked.ids, pattern);

      const int predicted_class = decode_class(logits, masked, vocab);
      report.confusion.add(masked.label, predicted_class);

      std::vector<int> predicted_levels;
      predicted_levels.reserve(masked.mask.masked_signal_positions.size());
      const int first_signal = vocab.signal_id(0);
      for (int pos : masked.mask.masked_signal_positions) {
        Eigen::Index arg_any = 0;
        logits.row(pos).maxCoeff(&arg_any);
        Eigen::Index arg_sig = 0;
        logits.row(pos).segment(first_signal, vocab.levels()).maxCoeff(&arg_sig);
        if (!vocab.is_signal(static_cast<int>(arg_any))) ++report.decoding_incidents;
        predicted_levels.push_back(static_cast<int>(arg_sig));
      }
      const InterpolationError err = interpolation_error(predicted_levels, masked, vocab);
      sse += err.sse;
      sae += err.sae;
      report.n_masked_positions += err.count;
      ++report.n_sequences;

      if (seq_csv.is_open())
        seq_csv << i << "," << masked.label << "," << predicted_class << "," << err.count << ","
                << err.sse << "," << err.sae << "\n";
      if (pos_csv.is_open())
        for (std::size_t m = 0; m < predicted_levels.size(); ++m)
          pos_csv << i << "," << masked.mask.masked_signal_positions[m] << ","
                  << vocab.level_of(masked.mask.original_at(masked.mask.masked_signal_positions[m]))
                  << "," << predicted_levels[m] << "\n";
    }
  }

  report.classification = classification_metrics(report.confusion);
  if (report.n_masked_positions > 0) {
    report.mse = sse / static_cast<double>(report.n_masked_positions);
    report.mae = sae / static_cast<double>(report.n_masked_positions);
  }
  return report;
}

template EvalReport evaluate(const ModelState<float>&, const TokenizedDataset&, const Vocabulary&,
                             const EvalOptions&);
template EvalReport evaluate(const ModelState<double>&, const TokenizedDataset&, const Vocabulary&,
                             const EvalOptions&);

}  // namespace egm
