#include <doctest.h>

#include <set>

#include "egm/rng.hpp"
#include "egm/tokenizer.hpp"

using namespace egm;

TEST_CASE("vocabulary sizes and layout") {
  const Vocabulary v250 = build_vocabulary(250);
  CHECK(v250.size() == 506);
  CHECK(build_vocabulary(2).size() == 10);
  CHECK_THROWS_AS(build_vocabulary(1), DataError);

  CHECK(Vocabulary::kCls == 0);
  CHECK(Vocabulary::kSep == 1);
  CHECK(Vocabulary::kMask == 2);
  CHECK(Vocabulary::kPad == 3);
  CHECK(v250.signal_id(0) == 4);
  CHECK(v250.signal_id(249) == 253);
  CHECK(v250.afib_id(0) == 254);
  CHECK(v250.afib_id(1) == 255);
  CHECK(v250.augsig_id(0) == 256);
  CHECK(v250.augsig_id(249) == 505);
}

TEST_CASE("vocabulary mappings are bijective") {
  const Vocabulary vocab = build_vocabulary(50);
  std::set<std::string> seen;
  for (int id = 0; id < vocab.size(); ++id) {
    const std::string token = vocab.string_of(id);
    CHECK(seen.insert(token).second);
    CHECK(vocab.id_of(token) == id);
  }
  CHECK(vocab.id_of("signal_7") == vocab.signal_id(7));
  CHECK(vocab.string_of(vocab.afib_id(1)) == "afib_1");
  CHECK_THROWS_AS(vocab.id_of("signal_50"), DataError);
  CHECK_THROWS_AS(vocab.id_of("bogus"), DataError);
  CHECK_THROWS_AS(vocab.string_of(vocab.size()), DataError);
}

TEST_CASE("quantization matches the worked example") {
  VectorXd seg(4);
  seg << 1.0, 2.0, 3.0, 4.0;
  const auto q = quantize_levels(seg, 250);
  CHECK(q == std::vector<int>{0, 83, 166, 249});
}

TEST_CASE("constant segments map to level zero") {
  VectorXd seg = VectorXd::Constant(5, 5.0);
  CHECK(quantize_levels(seg, 250) == std::vector<int>(5, 0));
  CHECK(quantize_levels(seg, 2) == std::vector<int>(5, 0));
}

TEST_CASE("quantization is monotone and spans the level range") {
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const int m = 8 + static_cast<int>(rng.uniform_int(64));
    const int levels = 2 + static_cast<int>(rng.uniform_int(300));
    VectorXd seg(m);
    for (int i = 0; i < m; ++i) seg[i] = rng.gaussian() * (1.0 + rng.uniform() * 5.0);
    const auto q = quantize_levels(seg, levels);
    Eigen::Index lo_at, hi_at;
    seg.minCoeff(&lo_at);
    seg.maxCoeff(&hi_at);
    CHECK(q[static_cast<std::size_t>(lo_at)] == 0);
    CHECK(q[static_cast<std::size_t>(hi_at)] == levels - 1);
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < m; ++j)
        if (seg[i] <= seg[j])
          CHECK(q[static_cast<std::size_t>(i)] <= q[static_cast<std::size_t>(j)]);
    }
  }
}

TEST_CASE("tokenized sequences follow the assembly layout") {
  const Vocabulary vocab = build_vocabulary(50);
  VectorXd seg(1000);
  for (int i = 0; i < 1000; ++i) seg[i] = std::sin(0.05 * i);
  const TokenSequence seq = tokenize_segment(seg, 1, vocab);

  CHECK(seq.length() == 1004);
  CHECK(seq.afib_position == 1002);
  CHECK(seq.ids[0] == Vocabulary::kCls);
  CHECK(seq.ids[1001] == Vocabulary::kSep);
  CHECK(seq.ids[1003] == Vocabulary::kSep);
  CHECK(seq.ids[1002] == vocab.afib_id(1));
  CHECK(seq.signal_len == 1000);
  CHECK(seq.s_min == seg.minCoeff());
  CHECK(seq.s_max == seg.maxCoeff());
  CHECK_FALSE(seq.degenerate);
  validate_token_sequence(seq, vocab);

  const TokenSequence seq0 = tokenize_segment(seg, 0, vocab);
  CHECK(seq0.ids[1002] == vocab.afib_id(0));
}

TEST_CASE("masking hits the exact count and never touches structure") {
  const Vocabulary vocab = build_vocabulary(50);
  VectorXd seg(1000);
  for (int i = 0; i < 1000; ++i) seg[i] = std::cos(0.03 * i) + 0.1 * i;
  const TokenSequence clean = tokenize_segment(seg, 0, vocab);

  const TokenSequence masked = apply_mask(clean, 0.75, 99);
  CHECK(masked.mask.masked_signal_positions.size() == 750);
  CHECK(masked.mask.afib_masked);
  CHECK(masked.ids[static_cast<std::size_t>(masked.afib_position)] == Vocabulary::kMask);
  CHECK(masked.ids[0] == Vocabulary::kCls);
  CHECK(masked.ids[1001] == Vocabulary::kSep);
  CHECK(masked.ids[1003] == Vocabulary::kSep);

  const TokenSequence again = apply_mask(clean, 0.75, 99);
  CHECK(again.ids == masked.ids);
  CHECK(again.mask.masked_signal_positions == masked.mask.masked_signal_positions);

  const TokenSequence other = apply_mask(clean, 0.75, 100);
  CHECK(other.ids != masked.ids);
}

TEST_CASE("mask count is round(rate * M) for any rate and unmasking restores the input") {
  const Vocabulary vocab = build_vocabulary(16);
  Rng rng(5);
  VectorXd seg(64);
  for (int i = 0; i < 64; ++i) seg[i] = rng.gaussian();
  const TokenSequence clean = tokenize_segment(seg, 1, vocab);
  for (int trial = 0; trial < 40; ++trial) {
    const double rate = rng.uniform();
    const TokenSequence masked = apply_mask(clean, rate, rng.next_u64());
    CHECK(static_cast<int>(masked.mask.masked_signal_positions.size()) ==
          static_cast<int>(std::lround(rate * 64)));
    for (int pos : masked.mask.masked_signal_positions) {
      CHECK(pos >= 1);
      CHECK(pos < 1 + clean.signal_len);
    }
    const TokenSequence restored = unmask(masked);
    CHECK(restored.ids == clean.ids);
  }
}

TEST_CASE("detokenization lands on bin midpoints") {
  const Vocabulary vocab = build_vocabulary(250);
  const VectorXd lo = detokenize_levels({0}, -2.0, 2.0, 250);
  const VectorXd hi = detokenize_levels({249}, -2.0, 2.0, 250);
  CHECK(lo[0] == doctest::Approx(-1.992).epsilon(1e-12));
  CHECK(hi[0] == doctest::Approx(1.992).epsilon(1e-12));

  const VectorXd via_ids = detokenize_ids({vocab.signal_id(0), vocab.signal_id(249)}, -2.0, 2.0, vocab);
  CHECK(via_ids[0] == lo[0]);
  CHECK(via_ids[1] == hi[0]);
}

TEST_CASE("detokenize rejects non-signal tokens naming the position") {
  const Vocabulary vocab = build_vocabulary(250);
  CHECK_THROWS_WITH_AS(detokenize_ids({vocab.signal_id(3), Vocabulary::kMask}, 0.0, 1.0, vocab),
                       doctest::Contains("position 1"), DataError);
}

TEST_CASE("tokenize-detokenize error stays within one bin width") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const int m = 4 + static_cast<int>(rng.uniform_int(200));
    const int levels = 2 + static_cast<int>(rng.uniform_int(250));
    VectorXd seg(m);
    for (int i = 0; i < m; ++i) seg[i] = 3.0 * rng.gaussian();
    const auto q = quantize_levels(seg, levels);
    const VectorXd back = detokenize_levels(q, seg.minCoeff(), seg.maxCoeff(), levels);
    const double bound = (seg.maxCoeff() - seg.minCoeff()) / levels;
    CHECK((back - seg).cwiseAbs().maxCoeff() <= bound);
  }
}

TEST_CASE("dataset container round trips masked sequences") {
  const Vocabulary vocab = build_vocabulary(12);
  const SegmentSet set = synthesize_dataset(6, 40, 21);
  TokenizedDataset ds = tokenize_segment_set(set, vocab);
  ds.sequences[0] = apply_mask(ds.sequences[0], 0.5, 77);
  ds.sequences[3] = apply_mask(ds.sequences[3], 0.75, 78);

  const std::string path = "/tmp/egm_test_dataset.tok";
  save_dataset(path, ds);
  const TokenizedDataset loaded = load_dataset(path);
  REQUIRE(loaded.sequences.size() == ds.sequences.size());
  CHECK(loaded.levels == ds.levels);
  CHECK(loaded.segment_length == ds.segment_length);
  for (std::size_t i = 0; i < ds.sequences.size(); ++i) {
    const TokenSequence& a = ds.sequences[i];
    const TokenSequence& b = loaded.sequences[i];
    CHECK(a.ids == b.ids);
    CHECK(a.label == b.label);
    CHECK(a.s_min == b.s_min);
    CHECK(a.s_max == b.s_max);
    CHECK(a.afib_position == b.afib_position);
    CHECK(a.signal_len == b.signal_len);
    CHECK(a.mask.masked_signal_positions == b.mask.masked_signal_positions);
    CHECK(a.mask.afib_masked == b.mask.afib_masked);
    CHECK(a.mask.originals == b.mask.originals);
    CHECK(a.placement_id == b.placement_id);
  }
}

TEST_CASE("vocabulary json sidecar round trips") {
  const std::string path = "/tmp/egm_test_vocab.json";
  save_vocabulary_json(path, build_vocabulary(50));
  const Vocabulary loaded = load_vocabulary_json(path);
  CHECK(loaded.levels() == 50);
  CHECK(loaded.size() == 106);
}
