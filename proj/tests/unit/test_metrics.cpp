#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "egm/metrics.hpp"
#include "egm/rng.hpp"
#include "egm/training.hpp"

using namespace egm;

TEST_CASE("definitional classification values") {
  ConfusionMatrix cm;
  cm.tp = 9;
  cm.fn = 1;
  cm.tn = 5;
  cm.fp = 5;
  const ClassificationMetrics m = classification_metrics(cm);
  CHECK(*m.sensitivity == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(*m.specificity == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(*m.accuracy == doctest::Approx(0.7).epsilon(1e-15));
}

TEST_CASE("zero denominators yield undefined, not zero") {
  ConfusionMatrix cm;
  cm.tn = 10;
  cm.fn = 2;
  const ClassificationMetrics m = classification_metrics(cm);
  CHECK_FALSE(m.ppv.has_value());       // tp + fp = 0
  CHECK(*m.sensitivity == 0.0);         // tp=0, fn=2 is defined
  CHECK(m.specificity.has_value());
  CHECK(*m.npv == doctest::Approx(10.0 / 12.0));
}

TEST_CASE("metrics equal a brute-force recount over random pairs") {
  Rng rng(5);
  std::vector<int> truth(1000), pred(1000);
  ConfusionMatrix cm;
  for (int i = 0; i < 1000; ++i) {
    truth[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_int(2));
    pred[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_int(2));
    cm.add(truth[static_cast<std::size_t>(i)], pred[static_cast<std::size_t>(i)]);
  }
  // Independent recount, one metric at a time.
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (int i = 0; i < 1000; ++i) {
    const int t = truth[static_cast<std::size_t>(i)], p = pred[static_cast<std::size_t>(i)];
    tp += (t == 1 && p == 1);
    fp += (t == 0 && p == 1);
    tn += (t == 0 && p == 0);
    fn += (t == 1 && p == 0);
  }
  const ClassificationMetrics m = classification_metrics(cm);
  CHECK(*m.sensitivity == static_cast<double>(tp) / (tp + fn));
  CHECK(*m.specificity == static_cast<double>(tn) / (tn + fp));
  CHECK(*m.ppv == static_cast<double>(tp) / (tp + fp));
  CHECK(*m.npv == static_cast<double>(tn) / (tn + fn));
  CHECK(*m.accuracy == static_cast<double>(tp + tn) / 1000.0);

  // accuracy = (sens * P + spec * N) / (P + N)
  const double P = static_cast<double>(tp + fn), N = static_cast<double>(tn + fp);
  CHECK(std::abs(*m.accuracy - (*m.sensitivity * P + *m.specificity * N) / (P + N)) < 1e-12);
}

TEST_CASE("aggregation is permutation invariant") {
  Rng rng(7);
  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < 200; ++i)
    pairs.emplace_back(static_cast<int>(rng.uniform_int(2)), static_cast<int>(rng.uniform_int(2)));
  ConfusionMatrix forward_order, reverse_order;
  for (const auto& [t, p] : pairs) forward_order.add(t, p);
  for (auto it = pairs.rbegin(); it != pairs.rend(); ++it) reverse_order.add(it->first, it->second);
  CHECK(forward_order.tp == reverse_order.tp);
  CHECK(forward_order.fp == reverse_order.fp);
  CHECK(forward_order.tn == reverse_order.tn);
  CHECK(forward_order.fn == reverse_order.fn);
}

namespace {

TokenSequence masked_fixture(const Vocabulary& vocab, std::uint64_t seed, int m = 32) {
  Rng rng(seed);
  VectorXd seg(m);
  for (int i = 0; i < m; ++i) seg[i] = rng.gaussian() * 2.0;
  return apply_mask(tokenize_segment(seg, static_cast<int>(seed % 2), vocab), 0.5, seed + 1);
}

std::vector<int> original_levels(const TokenSequence& seq, const Vocabulary& vocab) {
  std::vector<int> out;
  for (int pos : seq.mask.masked_signal_positions)
    out.push_back(vocab.level_of(seq.mask.original_at(pos)));
  return out;
}

}  // namespace

TEST_CASE("exact reconstruction scores zero error") {
  const Vocabulary vocab = build_vocabulary(20);
  const TokenSequence seq = masked_fixture(vocab, 3);
  const auto [mse, mae] = interpolation_metrics(original_levels(seq, vocab), seq, vocab);
  CHECK(mse == 0.0);
  CHECK(mae == 0.0);
}

TEST_CASE("uniform one-level offset gives the closed-form error") {
  const Vocabulary vocab = build_vocabulary(20);
  const TokenSequence seq = masked_fixture(vocab, 5);
  std::vector<int> pred = original_levels(seq, vocab);
  for (int& q : pred) q = q < vocab.levels() - 1 ? q + 1 : q - 1;  // shift one bin
  const double delta = (seq.s_max - seq.s_min) / vocab.levels();
  const auto [mse, mae] = interpolation_metrics(pred, seq, vocab);
  CHECK(mae == doctest::Approx(delta).epsilon(1e-12));
  CHECK(mse == doctest::Approx(delta * delta).epsilon(1e-12));
}

TEST_CASE("interpolation errors are non-negative for random predictions") {
  const Vocabulary vocab = build_vocabulary(20);
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const TokenSequence seq = masked_fixture(vocab, 50 + static_cast<std::uint64_t>(trial));
    std::vector<int> pred;
    for (std::size_t i = 0; i < seq.mask.masked_signal_positions.size(); ++i)
      pred.push_back(static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(vocab.levels()))));
    const auto [mse, mae] = interpolation_metrics(pred, seq, vocab);
    CHECK(mse >= 0.0);
    CHECK(mae >= 0.0);
    CHECK(mse + 1e-15 >= mae * mae);  // Cauchy-Schwarz on the per-position errors
  }
}

TEST_CASE("prediction must cover every masked position") {
  const Vocabulary vocab = build_vocabulary(20);
  const TokenSequence seq = masked_fixture(vocab, 13);
  std::vector<int> pred = original_levels(seq, vocab);
  pred.pop_back();
  CHECK_THROWS_AS(interpolation_metrics(pred, seq, vocab), DataError);
}

namespace {

struct EvalFixture {
  Vocabulary vocab = build_vocabulary(12);
  TokenizedDataset data;
  ModelState<float> state;

  EvalFixture() {
    data = tokenize_segment_set(synthesize_dataset(10, 48, 17), vocab);
    ModelConfig mc;
    mc.vocab_size = vocab.size();
    mc.d_model = 16;
    mc.n_layers = 1;
    mc.n_heads = 2;
    mc.d_ffn = 32;
    mc.max_seq_len = 64;
    mc.window_size = 9;
    mc.seed = 23;
    state = init_state<float>(mc);
  }
};

}  // namespace

TEST_CASE("evaluate aggregates and recomposes from its own details") {
  EvalFixture fx;
  EvalOptions options;
  options.seed = 31;
  options.per_sequence_csv = "/tmp/egm_test_per_seq.csv";
  options.per_position_csv = "/tmp/egm_test_per_pos.csv";
  const EvalReport report = evaluate(fx.state, fx.data, fx.vocab, options);
  CHECK(report.n_sequences == 20);
  CHECK(report.n_masked_positions == 20 * 36);  // round(0.75 * 48) per sequence

  // Recompose classification and interpolation metrics from the CSV.
  std::ifstream is(options.per_sequence_csv);
  std::string line;
  std::getline(is, line);
  ConfusionMatrix cm;
  double sse = 0.0, sae = 0.0;
  std::int64_t count = 0;
  while (std::getline(is, line)) {
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    REQUIRE(cells.size() == 6);
    cm.add(std::stoi(cells[1]), std::stoi(cells[2]));
    count += std::stol(cells[3]);
    sse += std::stod(cells[4]);
    sae += std::stod(cells[5]);
  }
  CHECK(cm.tp == report.confusion.tp);
  CHECK(cm.fp == report.confusion.fp);
  CHECK(cm.tn == report.confusion.tn);
  CHECK(cm.fn == report.confusion.fn);
  const ClassificationMetrics recomposed = classification_metrics(cm);
  CHECK(recomposed.accuracy == report.classification.accuracy);
  CHECK(recomposed.sensitivity == report.classification.sensitivity);
  CHECK(count == report.n_masked_positions);
  CHECK(report.mse == doctest::Approx(sse / count).epsilon(1e-12));
  CHECK(report.mae == doctest::Approx(sae / count).epsilon(1e-12));
}

TEST_CASE("evaluation batching does not change the outputs") {
  EvalFixture fx;
  EvalOptions one;
  one.seed = 37;
  one.batch_size = 1;
  EvalOptions eight = one;
  eight.batch_size = 8;
  const EvalReport a = evaluate(fx.state, fx.data, fx.vocab, one);
  const EvalReport b = evaluate(fx.state, fx.data, fx.vocab, eight);
  CHECK(a.to_json_string() == b.to_json_string());
}

TEST_CASE("evaluate rejects vocabulary mismatches") {
  EvalFixture fx;
  const Vocabulary other = build_vocabulary(20);
  EvalOptions options;
  CHECK_THROWS_AS(evaluate(fx.state, fx.data, other, options), DataError);
}

TEST_CASE("eval report serializes undefined metrics as null") {
  EvalReport report;
  report.confusion.tn = 3;
  report.confusion.fn = 1;
  report.classification = classification_metrics(report.confusion);
  report.n_sequences = 4;
  const std::string text = report.to_json_string();
  CHECK(text.find("\"ppv\": null") != std::string::npos);
  CHECK(text.find("\"accuracy\": 0.75") != std::string::npos);
}
