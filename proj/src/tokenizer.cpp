#include "egm/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "egm/rng.hpp"

namespace egm {

namespace {

using nlohmann::json;

template <class T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is, const char* what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError(std::string("dataset file truncated while reading ") + what);
  return v;
}

}  // namespace

int Vocabulary::level_of(int id) const {
  if (is_signal(id)) return id - 4;
  if (is_augsig(id)) return id - 6 - levels_;
  throw DataError("token id " + std::to_string(id) + " carries no quantization level");
}

int Vocabulary::class_of(int id) const {
  if (!is_afib(id)) throw DataError("token id " + std::to_string(id) + " is not an afib token");
  return id - afib_id(0);
}

std::string Vocabulary::string_of(int id) const {
  switch (id) {
    case kCls: return "[CLS]";
    case kSep: return "[SEP]";
    case kMask: return "[MASK]";
    case kPad: return "[PAD]";
    default: break;
  }
  if (is_signal(id)) return "signal_" + std::to_string(level_of(id));
  if (is_afib(id)) return "afib_" + std::to_string(class_of(id));
  if (is_augsig(id)) return "augsig_" + std::to_string(level_of(id));
  throw DataError("token id " + std::to_string(id) + " is out of vocabulary");
}

int Vocabulary::id_of(const std::string& token) const {
  if (token == "[CLS]") return kCls;
  if (token == "[SEP]") return kSep;
  if (token == "[MASK]") return kMask;
  if (token == "[PAD]") return kPad;
  const auto parse_suffix = [&](const std::string& prefix, int lo, int hi) -> int {
    if (token.size() <= prefix.size() || token.compare(0, prefix.size(), prefix) != 0) return -1;
    const std::string digits = token.substr(prefix.size());
    if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos) return -1;
    const long v = std::stol(digits);
    if (v < lo || v > hi) return -1;
    return static_cast<int>(v);
  };
  int v = parse_suffix("signal_", 0, levels_ - 1);
  if (v >= 0) return signal_id(v);
  v = parse_suffix("afib_", 0, 1);
  if (v >= 0) return afib_id(v);
  v = parse_suffix("augsig_", 0, levels_ - 1);
  if (v >= 0) return augsig_id(v);
  throw DataError("unknown token '" + token + "'");
}

Vocabulary build_vocabulary(int levels) {
  if (levels < 2) throw DataError("vocabulary: V must be >= 2, got " + std::to_string(levels));
  return Vocabulary(levels);
}

void save_vocabulary_json(const std::string& path, const Vocabulary& vocab) {
  json tokens = json::object();
  for (int id = 0; id < vocab.size(); ++id) tokens[vocab.string_of(id)] = id;
  json doc;
  doc["levels"] = vocab.levels();
  doc["size"] = vocab.size();
  doc["id_of"] = tokens;
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  os << doc.dump(2) << "\n";
}

Vocabulary load_vocabulary_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open '" + path + "'");
  json doc;
  try {
    is >> doc;
  } catch (const json::exception& e) {
    throw DataError("'" + path + "' is not valid vocabulary JSON: " + e.what());
  }
  if (!doc.contains("levels")) throw DataError("'" + path + "' lacks a levels field");
  return build_vocabulary(doc["levels"].get<int>());
}

int MaskPlan::original_at(int position) const {
  for (const auto& [pos, id] : originals)
    if (pos == position) return id;
  throw DataError("position " + std::to_string(position) + " is not in the mask plan");
}

std::vector<int> quantize_levels(const VectorXd& segment, int levels) {
  if (segment.size() < 1) throw DataError("quantize: empty segment");
  const double lo = segment.minCoeff();
  const double hi = segment.maxCoeff();
  std::vector<int> out(static_cast<std::size_t>(segment.size()));
  if (hi <= lo) {
    std::fill(out.begin(), out.end(), 0);
    return out;
  }
  const double span = hi - lo;
  for (Eigen::Index i = 0; i < segment.size(); ++i) {
    const double norm = (segment[i] - lo) / span;
    int q = static_cast<int>(std::floor(norm * levels));
    if (q > levels - 1) q = levels - 1;  // norm = 1.0 boundary
    if (q < 0) q = 0;
    out[static_cast<std::size_t>(i)] = q;
  }
  return out;
}

std::vector<int> quantize_unit_levels(const VectorXd& unit_values, int levels) {
  std::vector<int> out(static_cast<std::size_t>(unit_values.size()));
  for (Eigen::Index i = 0; i < unit_values.size(); ++i) {
    int q = static_cast<int>(std::floor(unit_values[i] * levels));
    if (q > levels - 1) q = levels - 1;
    if (q < 0) q = 0;
    out[static_cast<std::size_t>(i)] = q;
  }
  return out;
}

TokenSequence tokenize_segment(const VectorXd& segment, int label, const Vocabulary& vocab) {
  if (label != 0 && label != 1) throw DataError("tokenize: label must be 0 or 1");
  const std::vector<int> levels = quantize_levels(segment, vocab.levels());
  const int m = static_cast<int>(levels.size());

  TokenSequence seq;
  seq.ids.reserve(static_cast<std::size_t>(m) + 4);
  seq.ids.push_back(Vocabulary::kCls);
  for (int q : levels) seq.ids.push_back(vocab.signal_id(q));
  seq.ids.push_back(Vocabulary::kSep);
  seq.ids.push_back(vocab.afib_id(label));
  seq.ids.push_back(Vocabulary::kSep);

  seq.label = label;
  seq.s_min = segment.minCoeff();
  seq.s_max = segment.maxCoeff();
  seq.afib_position = m + 2;
  seq.signal_len = m;
  seq.degenerate = !(seq.s_max > seq.s_min);
  return seq;
}

TokenSequence tokenize_segment(const Segment& segment, const Vocabulary& vocab) {
  TokenSequence seq = tokenize_segment(segment.values, segment.label, vocab);
  seq.placement_id = segment.placement_id;
  seq.electrode_id = segment.electrode_id;
  seq.start_index = segment.start_index;
  return seq;
}

TokenSequence apply_mask(const TokenSequence& seq, double rate, std::uint64_t seed) {
  if (rate < 0.0 || rate > 1.0) throw DataError("mask rate must be in [0, 1]");
  TokenSequence out = seq;
  out.mask = MaskPlan{};

  const int n_mask = static_cast<int>(std::lround(rate * seq.signal_len));
  Rng rng(seed);
  std::vector<int> offsets = rng.sample_without_replacement(seq.signal_len, n_mask);

  out.mask.masked_signal_positions.reserve(offsets.size());
  out.mask.originals.reserve(offsets.size() + 1);
  for (int off : offsets) {
    const int pos = 1 + off;  // signal tokens start after [CLS]
    out.mask.masked_signal_positions.push_back(pos);
    out.mask.originals.emplace_back(pos, seq.ids[static_cast<std::size_t>(pos)]);
    out.ids[static_cast<std::size_t>(pos)] = Vocabulary::kMask;
  }
  out.mask.afib_masked = true;
  out.mask.originals.emplace_back(seq.afib_position,
                                  seq.ids[static_cast<std::size_t>(seq.afib_position)]);
  out.ids[static_cast<std::size_t>(seq.afib_position)] = Vocabulary::kMask;
  return out;
}

TokenSequence unmask(const TokenSequence& seq) {
  TokenSequence out = seq;
  for (const auto& [pos, id] : seq.mask.originals) out.ids[static_cast<std::size_t>(pos)] = id;
  out.mask = MaskPlan{};
  return out;
}

VectorXd detokenize_levels(const std::vector<int>& levels, double s_min, double s_max, int V) {
  VectorXd out(static_cast<Eigen::Index>(levels.size()));
  const double span = s_max - s_min;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const int q = levels[i];
    if (q < 0 || q >= V)
      throw DataError("level " + std::to_string(q) + " at position " + std::to_string(i) +
                      " is outside [0, " + std::to_string(V - 1) + "]");
    out[static_cast<Eigen::Index>(i)] = s_min + ((q + 0.5) / V) * span;
  }
  return out;
}

VectorXd detokenize_ids(const std::vector<int>& ids, double s_min, double s_max,
                        const Vocabulary& vocab) {
  std::vector<int> levels(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!vocab.is_signal(ids[i]))
      throw DataError("token at position " + std::to_string(i) + " ('" +
                      vocab.string_of(ids[i]) + "') is not a signal token");
    levels[i] = vocab.level_of(ids[i]);
  }
  return detokenize_levels(levels, s_min, s_max, vocab.levels());
}

std::vector<int> signal_levels(const TokenSequence& seq, const Vocabulary& vocab) {
  std::vector<int> levels(static_cast<std::size_t>(seq.signal_len));
  for (int off = 0; off < seq.signal_len; ++off) {
    const int pos = 1 + off;
    int id = seq.ids[static_cast<std::size_t>(pos)];
    if (id == Vocabulary::kMask) id = seq.mask.original_at(pos);
    levels[static_cast<std::size_t>(off)] = vocab.level_of(id);
  }
  return levels;
}

void validate_token_sequence(const TokenSequence& seq, const Vocabulary& vocab) {
  const int expected_len = 1 + seq.signal_len + seq.aug_len + 3;
  if (seq.length() != expected_len)
    throw DataError("sequence length " + std::to_string(seq.length()) + " does not match layout " +
                    std::to_string(expected_len));
  if (seq.ids[0] != Vocabulary::kCls) throw DataError("sequence must start with [CLS]");
  const int sep1 = 1 + seq.signal_len + seq.aug_len;
  const int sep2 = seq.afib_position + 1;
  if (seq.afib_position != sep1 + 1)
    throw DataError("afib position does not follow the first [SEP]");
  if (seq.ids[static_cast<std::size_t>(sep1)] != Vocabulary::kSep ||
      seq.ids[static_cast<std::size_t>(sep2)] != Vocabulary::kSep)
    throw DataError("sequence separators are misplaced");
  const int afib_id = seq.ids[static_cast<std::size_t>(seq.afib_position)];
  if (afib_id != Vocabulary::kMask && !vocab.is_afib(afib_id))
    throw DataError("afib slot holds neither an afib token nor [MASK]");
  for (int p : seq.mask.masked_signal_positions) {
    if (p < 1 || p >= 1 + seq.signal_len)
      throw DataError("masked position " + std::to_string(p) + " is outside the signal run");
    seq.mask.original_at(p);  // throws if unrecorded
  }
}

void save_dataset(const std::string& path, const TokenizedDataset& ds) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  os.write("EGMT", 4);
  write_pod<std::uint32_t>(os, 1);
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.levels));
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.segment_length));
  write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(ds.sequences.size()));
  for (const TokenSequence& s : ds.sequences) {
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.ids.size()));
    for (int id : s.ids) write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(id));
    write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(s.label));
    write_pod<double>(os, s.s_min);
    write_pod<double>(os, s.s_max);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.afib_position));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.signal_len));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.aug_len));
    write_pod<std::uint8_t>(os, s.degenerate ? 1 : 0);
    write_pod<std::int32_t>(os, s.placement_id);
    write_pod<std::int32_t>(os, s.electrode_id);
    write_pod<std::int64_t>(os, s.start_index);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.mask.masked_signal_positions.size()));
    for (int p : s.mask.masked_signal_positions) write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(p));
    write_pod<std::uint8_t>(os, s.mask.afib_masked ? 1 : 0);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.mask.originals.size()));
    for (const auto& [pos, id] : s.mask.originals) {
      write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(pos));
      write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(id));
    }
  }
  if (!os) throw DataError("failed writing '" + path + "'");
}

TokenizedDataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "EGMT", 4) != 0)
    throw DataError("'" + path + "' is not a tokenized dataset");
  const auto version = read_pod<std::uint32_t>(is, "version");
  if (version != 1) throw DataError("unsupported dataset container version");

  TokenizedDataset ds;
  ds.levels = static_cast<int>(read_pod<std::uint32_t>(is, "levels"));
  ds.segment_length = static_cast<int>(read_pod<std::uint32_t>(is, "segment length"));
  const auto count = read_pod<std::uint64_t>(is, "count");
  ds.sequences.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    TokenSequence& s = ds.sequences[i];
    const auto len = read_pod<std::uint32_t>(is, "sequence length");
    s.ids.resize(len);
    for (std::uint32_t p = 0; p < len; ++p) s.ids[p] = read_pod<std::uint16_t>(is, "token id");
    s.label = read_pod<std::uint8_t>(is, "label");
    s.s_min = read_pod<double>(is, "s_min");
    s.s_max = read_pod<double>(is, "s_max");
    s.afib_position = static_cast<int>(read_pod<std::uint32_t>(is, "afib position"));
    s.signal_len = static_cast<int>(read_pod<std::uint32_t>(is, "signal length"));
    s.aug_len = static_cast<int>(read_pod<std::uint32_t>(is, "aug length"));
    s.degenerate = read_pod<std::uint8_t>(is, "degenerate flag") != 0;
    s.placement_id = read_pod<std::int32_t>(is, "placement");
    s.electrode_id = read_pod<std::int32_t>(is, "electrode");
    s.start_index = read_pod<std::int64_t>(is, "start index");
    const auto n_masked = read_pod<std::uint32_t>(is, "mask count");
    s.mask.masked_signal_positions.resize(n_masked);
    for (std::uint32_t p = 0; p < n_masked; ++p)
      s.mask.masked_signal_positions[p] = static_cast<int>(read_pod<std::uint32_t>(is, "mask position"));
    s.mask.afib_masked = read_pod<std::uint8_t>(is, "afib masked flag") != 0;
    const auto n_orig = read_pod<std::uint32_t>(is, "original count");
    s.mask.originals.resize(n_orig);
    for (std::uint32_t p = 0; p < n_orig; ++p) {
      const int pos = static_cast<int>(read_pod<std::uint32_t>(is, "original position"));
      const int id = read_pod<std::uint16_t>(is, "original id");
      s.mask.originals[p] = {pos, id};
    }
  }
  return ds;
}

TokenizedDataset tokenize_segment_set(const SegmentSet& set, const Vocabulary& vocab) {
  TokenizedDataset ds;
  ds.levels = vocab.levels();
  ds.segment_length = set.segment_length;
  ds.sequences.reserve(set.segments.size());
  for (const Segment& seg : set.segments) ds.sequences.push_back(tokenize_segment(seg, vocab));
  return ds;
}

}  // namespace egm
