#include <doctest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <map>

#include "egm/rng.hpp"
#include "egm/tokenizer.hpp"
#include "egm/training.hpp"

using namespace egm;

namespace {

TokenSequence masked_sequence(const Vocabulary& vocab, std::uint64_t seed, int m = 24,
                              double rate = 0.75) {
  Rng rng(seed);
  VectorXd seg(m);
  for (int i = 0; i < m; ++i) seg[i] = rng.gaussian();
  return apply_mask(tokenize_segment(seg, static_cast<int>(seed % 2), vocab), rate, seed + 1);
}

}  // namespace

TEST_CASE("perfect predictions give zero loss") {
  const Vocabulary vocab = build_vocabulary(250);
  const TokenSequence seq = masked_sequence(vocab, 1);
  MatrixXd logits = MatrixXd::Zero(seq.length(), vocab.size());
  for (const auto& [pos, id] : seq.mask.originals) logits(pos, id) = 1e4;
  const LossBreakdown bd = compute_losses(logits, seq, vocab, 1.0, 1.0);
  CHECK(bd.l_mlm == 0.0);
  CHECK(bd.l_afib == 0.0);
  CHECK(bd.total == 0.0);
}

TEST_CASE("uniform logits give ln(vocab) per masked position") {
  const Vocabulary vocab = build_vocabulary(250);
  REQUIRE(vocab.size() == 506);
  const TokenSequence seq = masked_sequence(vocab, 2);
  const MatrixXd logits = MatrixXd::Constant(seq.length(), vocab.size(), 0.37);
  const LossBreakdown bd = compute_losses(logits, seq, vocab, 1.0, 1.0);
  CHECK(std::abs(bd.l_mlm - std::log(506.0)) < 1e-9);
  CHECK(std::abs(bd.l_afib - std::log(2.0)) < 1e-9);
}

TEST_CASE("total is the weighted sum across a random grid") {
  const Vocabulary vocab = build_vocabulary(8);
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const TokenSequence seq = masked_sequence(vocab, 100 + static_cast<std::uint64_t>(trial), 12, 0.5);
    MatrixXd logits(seq.length(), vocab.size());
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = 4.0 * rng.gaussian();
    const double a1 = rng.uniform();
    const double a2 = rng.uniform();
    const LossBreakdown bd = compute_losses(logits, seq, vocab, a1, a2);
    CHECK(std::abs(bd.total - (a1 * bd.l_mlm + a2 * bd.l_afib)) <= 1e-6);
    CHECK(bd.l_mlm >= 0.0);
    CHECK(bd.l_afib >= 0.0);
  }
}

TEST_CASE("losses ignore logits outside their positions") {
  const Vocabulary vocab = build_vocabulary(16);
  const TokenSequence seq = masked_sequence(vocab, 5, 32, 0.5);
  Rng rng(7);
  MatrixXd logits(seq.length(), vocab.size());
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = rng.gaussian();
  const LossBreakdown base = compute_losses(logits, seq, vocab, 1.0, 1.0);

  // Perturb every unmasked, non-afib row: l_mlm and l_afib are unchanged.
  MatrixXd perturbed = logits;
  for (int pos = 0; pos < seq.length(); ++pos) {
    const bool masked = std::find(seq.mask.masked_signal_positions.begin(),
                                  seq.mask.masked_signal_positions.end(),
                                  pos) != seq.mask.masked_signal_positions.end();
    if (!masked && pos != seq.afib_position) perturbed.row(pos).array() += 3.0;
  }
  const LossBreakdown same = compute_losses(perturbed, seq, vocab, 1.0, 1.0);
  CHECK(same.l_mlm == base.l_mlm);
  CHECK(same.l_afib == base.l_afib);

  // Perturbing non-afib logits at the afib position leaves l_afib alone.
  MatrixXd perturbed2 = logits;
  for (int c = 0; c < vocab.size(); ++c)
    if (c != vocab.afib_id(0) && c != vocab.afib_id(1)) perturbed2(seq.afib_position, c) += 2.0;
  CHECK(compute_losses(perturbed2, seq, vocab, 1.0, 1.0).l_afib == base.l_afib);
}

TEST_CASE("alpha extremes recover the single-task regimes") {
  const Vocabulary vocab = build_vocabulary(8);
  const TokenSequence seq = masked_sequence(vocab, 11, 16, 0.5);
  Rng rng(13);
  MatrixXd logits(seq.length(), vocab.size());
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = rng.gaussian();
  const LossBreakdown mlm_only = compute_losses(logits, seq, vocab, 1.0, 0.0);
  CHECK(mlm_only.total == mlm_only.l_mlm);
  const LossBreakdown afib_only = compute_losses(logits, seq, vocab, 0.0, 1.0);
  CHECK(afib_only.total == afib_only.l_afib);
}

TEST_CASE("an empty mask with alpha1 > 0 is an error") {
  const Vocabulary vocab = build_vocabulary(8);
  const TokenSequence seq = masked_sequence(vocab, 15, 16, 0.0);  // only the afib slot is masked
  const MatrixXd logits = MatrixXd::Zero(seq.length(), vocab.size());
  CHECK_THROWS_AS(compute_losses(logits, seq, vocab, 1.0, 1.0), DataError);
  CHECK_NOTHROW(compute_losses(logits, seq, vocab, 0.0, 1.0));
}

TEST_CASE("loss gradient matches finite differences on the logits") {
  const Vocabulary vocab = build_vocabulary(6);
  const TokenSequence seq = masked_sequence(vocab, 17, 12, 0.5);
  Rng rng(19);
  MatrixXd logits(seq.length(), vocab.size());
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = rng.gaussian();
  LossBreakdown bd;
  const MatrixXd grad = loss_gradient_logits(logits, seq, vocab, 0.7, 0.4, &bd);
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::Index r = static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(logits.rows())));
    const Eigen::Index c = static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(logits.cols())));
    const double h = 1e-6;
    MatrixXd up = logits, dn = logits;
    up(r, c) += h;
    dn(r, c) -= h;
    const double fd = (compute_losses(up, seq, vocab, 0.7, 0.4).total -
                       compute_losses(dn, seq, vocab, 0.7, 0.4).total) /
                      (2.0 * h);
    CHECK(grad(r, c) == doctest::Approx(fd).epsilon(1e-5).scale(1.0));
  }
}

namespace {

struct ScalarParam {
  Vector<double> w;
  std::vector<ParamRef<double>> refs() {
    return {{"w", w.data(), static_cast<std::int64_t>(w.size())}};
  }
};

}  // namespace

TEST_CASE("adamw zero-gradient step applies pure decoupled decay") {
  ScalarParam p;
  p.w = Vector<double>::Constant(3, 1.0);
  ScalarParam g;
  g.w = Vector<double>::Zero(3);
  auto params = p.refs();
  auto grads = g.refs();
  AdamWState<double> opt = make_adamw_state(params);
  adamw_step(params, grads, opt, 0.1, 0.01);
  for (int i = 0; i < 3; ++i) CHECK(p.w[i] == doctest::Approx(0.999).epsilon(1e-15));
}

TEST_CASE("adamw minimizes a convex quadratic") {
  ScalarParam p;
  p.w = Vector<double>::Constant(1, 1.0);
  ScalarParam g;
  g.w = Vector<double>::Zero(1);
  auto params = p.refs();
  auto grads = g.refs();
  AdamWState<double> opt = make_adamw_state(params);
  for (int step = 0; step < 500; ++step) {
    g.w[0] = 2.0 * p.w[0];  // d/dw of w^2
    adamw_step(params, grads, opt, 0.05, 0.0);
  }
  CHECK(std::abs(p.w[0]) < 1e-2);
}

TEST_CASE("identical coordinates with identical gradients stay identical") {
  ScalarParam p;
  p.w = Vector<double>::Constant(2, 0.8);
  ScalarParam g;
  g.w = Vector<double>::Zero(2);
  auto params = p.refs();
  auto grads = g.refs();
  AdamWState<double> opt = make_adamw_state(params);
  Rng rng(23);
  for (int step = 0; step < 50; ++step) {
    const double gv = rng.gaussian();
    g.w[0] = gv;
    g.w[1] = gv;
    adamw_step(params, grads, opt, 0.01, 0.01);
    CHECK(p.w[0] == p.w[1]);
  }
}

TEST_CASE("adamw refuses non-finite gradients without touching the weights") {
  ScalarParam p;
  p.w = Vector<double>::Constant(2, 0.5);
  ScalarParam g;
  g.w = Vector<double>::Zero(2);
  g.w[1] = std::numeric_limits<double>::quiet_NaN();
  auto params = p.refs();
  auto grads = g.refs();
  AdamWState<double> opt = make_adamw_state(params);
  CHECK_THROWS_AS(adamw_step(params, grads, opt, 0.1, 0.01), NumericError);
  CHECK(p.w[0] == 0.5);
  CHECK(p.w[1] == 0.5);
  CHECK(opt.step == 0);
}

namespace {

ModelConfig small_model_config(int vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  c.d_model = 32;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ffn = 64;
  c.max_seq_len = 128;
  c.window_size = 17;
  c.seed = derive_seed(7, "model-init");
  return c;
}

TrainConfig small_train_config(int epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.seed = derive_seed(7, "train");
  return c;
}

TokenizedDataset small_dataset(int n_per_class, int m, int levels) {
  const Vocabulary vocab = build_vocabulary(levels);
  return tokenize_segment_set(synthesize_dataset(n_per_class, m, 7), vocab);
}

}  // namespace

TEST_CASE("training reduces the total loss on separable synthetic data") {
  const Vocabulary vocab = build_vocabulary(16);
  const TokenizedDataset data = small_dataset(100, 64, 16);  // 200 segments
  REQUIRE(data.sequences.size() == 200);
  const TrainResult result =
      run_training(data, small_model_config(vocab.size()), small_train_config(5), vocab);
  REQUIRE(result.history.size() == 5);
  CHECK_FALSE(result.diverged);
  CHECK(result.history.back().total < result.history.front().total);
}

TEST_CASE("counterfactual injection modifies round(fraction * batch) samples") {
  const Vocabulary vocab = build_vocabulary(16);
  const TokenizedDataset data = small_dataset(40, 64, 16);
  TrainConfig tc = small_train_config(1);
  tc.counterfactual_kind = CounterfactualKind::label_flip;
  tc.counterfactual_fraction = 0.25;

  std::vector<int> modified_counts;
  run_training(data, small_model_config(vocab.size()), tc, vocab,
               [&](const BatchObservation& obs) {
                 if (obs.sequence_indices.size() == 8)
                   modified_counts.push_back(static_cast<int>(obs.modified.size()));
               });
  REQUIRE_FALSE(modified_counts.empty());
  for (int count : modified_counts) CHECK(count == 2);
}

TEST_CASE("label flipping touches only the afib slot of modified samples") {
  const Vocabulary vocab = build_vocabulary(16);
  const TokenizedDataset data = small_dataset(24, 64, 16);
  const ModelConfig mc = small_model_config(vocab.size());

  struct Captured {
    std::vector<TokenSequence> sequences;
    std::vector<int> modified;
    std::vector<int> sources;
  };
  std::map<std::pair<int, int>, Captured> plain, flipped;
  const auto capture = [](std::map<std::pair<int, int>, Captured>& sink) {
    return [&sink](const BatchObservation& obs) {
      sink[{obs.epoch, obs.batch_index}] = {*obs.sequences, obs.modified, obs.sequence_indices};
    };
  };

  TrainConfig none_cfg = small_train_config(1);
  run_training(data, mc, none_cfg, vocab, capture(plain));
  TrainConfig flip_cfg = none_cfg;
  flip_cfg.counterfactual_kind = CounterfactualKind::label_flip;
  run_training(data, mc, flip_cfg, vocab, capture(flipped));

  REQUIRE(plain.size() == flipped.size());
  for (const auto& [key, a] : plain) {
    const Captured& b = flipped.at(key);
    REQUIRE(a.sequences.size() == b.sequences.size());
    CHECK(a.sources == b.sources);  // same shuffled order
    for (std::size_t s = 0; s < a.sequences.size(); ++s) {
      const bool modified =
          std::find(b.modified.begin(), b.modified.end(), static_cast<int>(s)) != b.modified.end();
      CHECK(a.sequences[s].ids == b.sequences[s].ids);  // the afib slot is masked either way
      CHECK(a.sequences[s].mask.masked_signal_positions == b.sequences[s].mask.masked_signal_positions);
      const int ta = a.sequences[s].mask.original_at(a.sequences[s].afib_position);
      const int tb = b.sequences[s].mask.original_at(b.sequences[s].afib_position);
      if (modified) {
        CHECK(a.sequences[s].label == 1 - b.sequences[s].label);
        CHECK(ta != tb);
      } else {
        CHECK(a.sequences[s].label == b.sequences[s].label);
        CHECK(ta == tb);
      }
      // Signal originals agree everywhere.
      for (int pos : a.sequences[s].mask.masked_signal_positions)
        CHECK(a.sequences[s].mask.original_at(pos) == b.sequences[s].mask.original_at(pos));
    }
  }
}

TEST_CASE("training is bit-reproducible under a fixed seed") {
  const Vocabulary vocab = build_vocabulary(16);
  const TokenizedDataset data = small_dataset(30, 64, 16);
  const ModelConfig mc = small_model_config(vocab.size());
  const TrainConfig tc = small_train_config(2);

  TrainResult a = run_training(data, mc, tc, vocab);
  TrainResult b = run_training(data, mc, tc, vocab);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t e = 0; e < a.history.size(); ++e) {
    CHECK(a.history[e].l_mlm == b.history[e].l_mlm);
    CHECK(a.history[e].l_afib == b.history[e].l_afib);
    CHECK(a.history[e].total == b.history[e].total);
  }
  auto pa = parameters(a.state);
  auto pb = parameters(b.state);
  for (std::size_t t = 0; t < pa.size(); ++t)
    for (std::int64_t i = 0; i < pa[t].size; ++i) CHECK(pa[t].data[i] == pb[t].data[i]);
}

TEST_CASE("history csv has the declared columns") {
  std::vector<EpochStats> history = {{1, 2.5, 0.5, 3.0, 1.25}, {2, 2.0, 0.25, 2.25, 1.5}};
  const std::string path = "/tmp/egm_test_history.csv";
  save_history_csv(path, history);
  std::ifstream is(path);
  std::string line;
  std::getline(is, line);
  CHECK(line == "epoch,l_mlm,l_afib,total,wall_seconds");
  std::getline(is, line);
  CHECK(line.rfind("1,2.5,0.5,3,", 0) == 0);
}
