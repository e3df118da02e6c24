#include "egm/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <json.hpp>

#include "egm/rng.hpp"

namespace egm {

namespace {

using nlohmann::json;

double target_value(const MatrixXd& logits, const IgTarget& target, const TokenSequence& seq,
                    const Vocabulary& vocab) {
  if (target.kind == IgTarget::Kind::afib_logit_diff)
    return logits(seq.afib_position, vocab.afib_id(1)) - logits(seq.afib_position, vocab.afib_id(0));
  return logits(target.position, target.token_id);
}

void target_gradient(MatrixXd& d_logits, const IgTarget& target, const TokenSequence& seq,
                     const Vocabulary& vocab) {
  d_logits.setZero();
  if (target.kind == IgTarget::Kind::afib_logit_diff) {
    d_logits(seq.afib_position, vocab.afib_id(1)) = 1.0;
    d_logits(seq.afib_position, vocab.afib_id(0)) = -1.0;
  } else {
    d_logits(target.position, target.token_id) = 1.0;
  }
}

std::string describe(const IgTarget& target, const TokenSequence& seq, const Vocabulary& vocab) {
  if (target.kind == IgTarget::Kind::afib_logit_diff)
    return "logit(afib_1) - logit(afib_0) at position " + std::to_string(seq.afib_position);
  return "logit of '" + vocab.string_of(target.token_id) + "' at position " +
         std::to_string(target.position);
}

}  // namespace

std::string to_string(CounterfactualKind kind) {
  switch (kind) {
    case CounterfactualKind::none: return "none";
    case CounterfactualKind::substitution: return "substitution";
    case CounterfactualKind::addition: return "addition";
    case CounterfactualKind::label_flip: return "label_flip";
  }
  return "none";
}

CounterfactualKind counterfactual_kind_from_string(const std::string& name) {
  if (name == "none") return CounterfactualKind::none;
  if (name == "substitution") return CounterfactualKind::substitution;
  if (name == "addition") return CounterfactualKind::addition;
  if (name == "label_flip") return CounterfactualKind::label_flip;
  throw DataError("unknown counterfactual kind '" + name + "'");
}

template <class S>
AttributionReport integrated_gradients(const ModelState<S>& state, const TokenSequence& seq,
                                       const Vocabulary& vocab, const IgTarget& target, int steps) {
  const ModelState<double> dstate = cast_state<double>(state);
  const AttentionPattern pattern =
      pattern_for_sequence(dstate.config, seq.length(), seq.afib_position, dstate.config.seed);

  const MatrixXd input = embed_tokens(dstate, seq.ids);
  const std::vector<int> pad_ids(seq.ids.size(), Vocabulary::kPad);
  const MatrixXd baseline = embed_tokens(dstate, pad_ids);

  Gradients<double> grads = make_gradients<double>(dstate.config);
  MatrixXd d_logits(seq.length(), dstate.config.vocab_size);
  const auto value_and_grad = [&](const MatrixXd& point, MatrixXd& grad_out) -> double {
    Activations<double> acts;
    const MatrixXd logits = forward_from_embeddings(dstate, point, pattern, &acts);
    target_gradient(d_logits, target, seq, vocab);
    zero_gradients(grads);
    backward(dstate, acts, d_logits, grads, /*want_embedding_grad=*/true);
    grad_out = grads.d_embeddings;
    return target_value(logits, target, seq, vocab);
  };

  const PathIntegralResult path = integrate_gradients_path(value_and_grad, input, baseline, steps);

  AttributionReport report;
  report.per_token_scores = path.attributions.rowwise().sum();
  report.f_input = path.f_input;
  report.f_baseline = path.f_baseline;
  report.completeness_residual =
      report.per_token_scores.sum() - (path.f_input - path.f_baseline);
  report.target_description = describe(target, seq, vocab);
  report.baseline_description = "all-[PAD] token embeddings";
  report.steps = steps;
  return report;
}

template <class S>
VectorXd attention_summary(const ForwardTrace<S>& trace) {
  const AttentionPattern& pattern = trace.pattern;
  const int n = pattern.seq_len;
  if (n == 0 || trace.attn.empty()) throw DataError("attention summary: empty trace");

  VectorXd admitted_by = VectorXd::Zero(n);
  for (int r = 0; r < n; ++r)
    for (int c : pattern.admits[static_cast<std::size_t>(r)]) admitted_by[c] += 1.0;

  VectorXd summary = VectorXd::Zero(n);
  std::int64_t maps = 0;
  for (const auto& layer : trace.attn) {
    for (const auto& head : layer) {
      VectorXd received = VectorXd::Zero(n);
      for (int r = 0; r < n; ++r) {
        const auto& adm = pattern.admits[static_cast<std::size_t>(r)];
        const auto& w = head[static_cast<std::size_t>(r)];
        for (std::size_t j = 0; j < adm.size(); ++j)
          received[adm[j]] += static_cast<double>(w[static_cast<Eigen::Index>(j)]);
      }
      summary += received.cwiseQuotient(admitted_by);
      ++maps;
    }
  }
  summary /= static_cast<double>(maps);
  const double total = summary.sum();
  if (total > 0.0) summary /= total;
  return summary;
}

VectorXd token_substitution(const VectorXd& segment, int window) {
  if (window < 1 || window % 2 == 0)
    throw DataError("token substitution: window must be a positive odd integer, got " +
                    std::to_string(window));
  const Eigen::Index n = segment.size();
  if (window > n) throw DataError("token substitution: window exceeds segment length");
  const int half = window / 2;
  VectorXd out(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int k = -half; k <= half; ++k) {
      Eigen::Index j = i + k;
      if (j < 0) j = 0;               // replicate edge padding
      if (j > n - 1) j = n - 1;
      acc += segment[j];
    }
    out[i] = acc / window;
  }
  return out;
}

TokenSequence token_substitution_sequence(const TokenSequence& seq, int window,
                                          const Vocabulary& vocab) {
  const std::vector<int> levels = signal_levels(seq, vocab);
  const int V = vocab.levels();
  VectorXd unit(static_cast<Eigen::Index>(levels.size()));
  for (std::size_t i = 0; i < levels.size(); ++i)
    unit[static_cast<Eigen::Index>(i)] = (levels[i] + 0.5) / V;
  const VectorXd smoothed = token_substitution(unit, window);
  const std::vector<int> new_levels = quantize_unit_levels(smoothed, V);

  TokenSequence out = seq;
  for (int off = 0; off < seq.signal_len; ++off) {
    const int pos = 1 + off;
    const int id = vocab.signal_id(new_levels[static_cast<std::size_t>(off)]);
    if (out.ids[static_cast<std::size_t>(pos)] == Vocabulary::kMask) {
      for (auto& [mpos, mid] : out.mask.originals)
        if (mpos == pos) mid = id;
    } else {
      out.ids[static_cast<std::size_t>(pos)] = id;
    }
  }
  return out;
}

TokenSequence token_addition(const TokenSequence& seq, const CounterfactualSpec& spec,
                             const Vocabulary& vocab) {
  if (seq.aug_len != 0) throw DataError("token addition: sequence already carries an augmentation run");
  if (spec.segment_length < 1 || spec.segment_length > seq.signal_len)
    throw DataError("token addition: segment_length must be in [1, signal length]");

  const std::vector<int> levels = signal_levels(seq, vocab);
  Rng rng(derive_seed(spec.seed, "augoff"));
  const int offset =
      static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(seq.signal_len - spec.segment_length + 1)));

  TokenSequence out = seq;
  const int insert_at = 1 + seq.signal_len;  // before the first [SEP]
  std::vector<int> aug_ids(static_cast<std::size_t>(spec.segment_length));
  for (int i = 0; i < spec.segment_length; ++i)
    aug_ids[static_cast<std::size_t>(i)] =
        vocab.augsig_id(levels[static_cast<std::size_t>(offset + i)]);
  out.ids.insert(out.ids.begin() + insert_at, aug_ids.begin(), aug_ids.end());
  out.aug_len = spec.segment_length;
  out.afib_position = seq.afib_position + spec.segment_length;
  for (auto& [pos, id] : out.mask.originals)
    if (pos >= insert_at) pos += spec.segment_length;
  return out;
}

TokenSequence label_flip(const TokenSequence& seq, const Vocabulary& vocab) {
  TokenSequence out = seq;
  out.label = 1 - seq.label;
  const auto pos = static_cast<std::size_t>(seq.afib_position);
  if (seq.ids[pos] == Vocabulary::kMask) {
    bool found = false;
    for (auto& [mpos, mid] : out.mask.originals) {
      if (mpos == seq.afib_position) {
        if (!vocab.is_afib(mid)) throw DataError("label flip: masked afib slot holds no afib token");
        mid = vocab.afib_id(1 - vocab.class_of(mid));
        found = true;
      }
    }
    if (!found) throw DataError("label flip: masked afib slot has no recorded original");
  } else {
    if (!vocab.is_afib(seq.ids[pos])) throw DataError("label flip: afib slot holds no afib token");
    out.ids[pos] = vocab.afib_id(1 - vocab.class_of(seq.ids[pos]));
  }
  return out;
}

TokenizedDataset apply_counterfactual(const TokenizedDataset& data, const CounterfactualSpec& spec,
                                      const Vocabulary& vocab) {
  TokenizedDataset out;
  out.levels = data.levels;
  out.segment_length = data.segment_length;
  out.sequences.reserve(data.sequences.size());
  for (std::size_t i = 0; i < data.sequences.size(); ++i) {
    const TokenSequence& seq = data.sequences[i];
    switch (spec.kind) {
      case CounterfactualKind::none:
        out.sequences.push_back(seq);
        break;
      case CounterfactualKind::substitution:
        out.sequences.push_back(token_substitution_sequence(seq, spec.window, vocab));
        break;
      case CounterfactualKind::addition: {
        CounterfactualSpec per = spec;
        per.seed = derive_seed(spec.seed, "cfseq", static_cast<std::uint64_t>(i));
        out.sequences.push_back(token_addition(seq, per, vocab));
        break;
      }
      case CounterfactualKind::label_flip:
        out.sequences.push_back(label_flip(seq, vocab));
        break;
    }
  }
  return out;
}

std::string StudyReport::to_json_string() const {
  json j;
  j["grid"] = json::array();
  for (const StudyCell& cell : grid) {
    json c;
    c["model"] = cell.model;
    c["input"] = cell.input;
    c["report"] = json::parse(cell.report.to_json_string());
    j["grid"].push_back(c);
  }
  j["overlays"] = json::array();
  for (const AttributionOverlay& o : overlays) {
    json v;
    v["sequence_index"] = o.sequence_index;
    v["model"] = o.model;
    v["regime"] = o.regime;
    v["positions"] = o.attention.size();
    j["overlays"].push_back(v);
  }
  return j.dump(2);
}

namespace {

void check_compatible(const ModelConfig& a, const ModelConfig& b) {
  const bool ok = a.vocab_size == b.vocab_size && a.d_model == b.d_model &&
                  a.n_layers == b.n_layers && a.n_heads == b.n_heads && a.d_ffn == b.d_ffn &&
                  a.max_seq_len == b.max_seq_len && a.window_size == b.window_size &&
                  a.tie_output == b.tie_output;
  if (!ok) throw DataError("counterfactual study: checkpoint configurations do not match");
}

template <class S>
AttributionOverlay make_overlay(const ModelState<S>& state, const TokenSequence& clean,
                                const Vocabulary& vocab, int index, const std::string& model_name,
                                const std::string& regime, double mask_rate, std::uint64_t seed,
                                int ig_steps) {
  const TokenSequence masked = apply_mask(clean, mask_rate, eval_mask_seed(seed, index));
  const AttentionPattern pattern =
      pattern_for_sequence(state.config, masked.length(), masked.afib_position, state.config.seed);
  ForwardTrace<S> trace;
  forward<S>(state, masked.ids, pattern, nullptr, &trace);

  AttributionOverlay overlay;
  overlay.sequence_index = index;
  overlay.model = model_name;
  overlay.regime = regime;
  overlay.attention = attention_summary(trace);
  overlay.attribution =
      integrated_gradients(state, masked, vocab, IgTarget::afib(), ig_steps).per_token_scores;

  const std::vector<int> levels = signal_levels(clean, vocab);
  const VectorXd amplitudes = detokenize_levels(levels, clean.s_min, clean.s_max, vocab.levels());
  overlay.amplitude.assign(static_cast<std::size_t>(masked.length()),
                           std::numeric_limits<double>::quiet_NaN());
  for (int off = 0; off < clean.signal_len; ++off)
    overlay.amplitude[static_cast<std::size_t>(1 + off)] = amplitudes[off];
  return overlay;
}

}  // namespace

template <class S>
StudyReport counterfactual_study(const ModelState<S>& plain, const ModelState<S>& with_cf,
                                 const TokenizedDataset& data, const Vocabulary& vocab,
                                 const CounterfactualSpec& spec, const StudyOptions& options) {
  check_compatible(plain.config, with_cf.config);
  const TokenizedDataset modified = apply_counterfactual(data, spec, vocab);

  StudyReport report;
  const struct {
    const ModelState<S>* state;
    const char* name;
  } models[2] = {{&plain, "plain"}, {&with_cf, "counterfactual"}};
  for (const auto& m : models) {
    report.grid.push_back({m.name, "unmodified", evaluate(*m.state, data, vocab, options.eval)});
    report.grid.push_back({m.name, "modified", evaluate(*m.state, modified, vocab, options.eval)});
  }

  const int samples =
      std::min<int>(options.overlay_samples, static_cast<int>(data.sequences.size()));
  for (int i = 0; i < samples; ++i) {
    const TokenSequence& clean = data.sequences[static_cast<std::size_t>(i)];
    for (const auto& m : models) {
      report.overlays.push_back(make_overlay(*m.state, clean, vocab, i, m.name, "ta_masked", 0.0,
                                             options.eval.seed, options.ig_steps));
      report.overlays.push_back(make_overlay(*m.state, clean, vocab, i, m.name, "ta_ts_masked",
                                             options.eval.mask_rate, options.eval.seed,
                                             options.ig_steps));
    }
  }
  return report;
}

template AttributionReport integrated_gradients(const ModelState<float>&, const TokenSequence&,
                                                const Vocabulary&, const IgTarget&, int);
template AttributionReport integrated_gradients(const ModelState<double>&, const TokenSequence&,
                                                const Vocabulary&, const IgTarget&, int);
template VectorXd attention_summary(const ForwardTrace<float>&);
template VectorXd attention_summary(const ForwardTrace<double>&);
template StudyReport counterfactual_study(const ModelState<float>&, const ModelState<float>&,
                                          const TokenizedDataset&, const Vocabulary&,
                                          const CounterfactualSpec&, const StudyOptions&);
template StudyReport counterfactual_study(const ModelState<double>&, const ModelState<double>&,
                                          const TokenizedDataset&, const Vocabulary&,
                                          const CounterfactualSpec&, const StudyOptions&);

}  // namespace egm
