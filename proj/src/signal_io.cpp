#include "egm/signal_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "egm/rng.hpp"

namespace egm {

namespace {

std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

long parse_long(const std::string& tok, int line_no, const char* what) {
  std::size_t pos = 0;
  long v = 0;
  try {
    v = std::stol(tok, &pos);
  } catch (...) {
    throw DataError("wfdb header line " + std::to_string(line_no) + ": bad " + what + " '" + tok + "'");
  }
  if (pos != tok.size())
    throw DataError("wfdb header line " + std::to_string(line_no) + ": bad " + what + " '" + tok + "'");
  return v;
}

double parse_real(const std::string& tok, int line_no, const char* what) {
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(tok, &pos);
  } catch (...) {
    throw DataError("wfdb header line " + std::to_string(line_no) + ": bad " + what + " '" + tok + "'");
  }
  if (pos != tok.size())
    throw DataError("wfdb header line " + std::to_string(line_no) + ": bad " + what + " '" + tok + "'");
  return v;
}

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
}

template <class T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is, const char* what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError(std::string("segment file truncated while reading ") + what);
  return v;
}

}  // namespace

void RecordingTensor::validate() const {
  if (placements.empty()) throw DataError("recording has no placements");
  if (sample_rate_hz <= 0) throw DataError("sample_rate_hz must be positive");
  if (labels.size() != placements.size())
    throw DataError("label count does not match placement count");
  const auto rows = placements[0].rows();
  const auto cols = placements[0].cols();
  for (std::size_t k = 0; k < placements.size(); ++k) {
    if (placements[k].rows() != rows || placements[k].cols() != cols)
      throw DataError("placement " + std::to_string(k) + " has mismatched shape");
    if (labels[k] != 0 && labels[k] != 1)
      throw DataError("placement " + std::to_string(k) + " label must be 0 or 1");
  }
}

RecordingTensor parse_wfdb(const std::string& header_text,
                           const std::vector<std::uint8_t>& signal_bytes) {
  std::istringstream hs(header_text);
  std::string line;
  int line_no = 0;

  if (!std::getline(hs, line)) throw DataError("wfdb header is empty");
  ++line_no;
  auto record_toks = split_ws(line);
  if (record_toks.size() != 4)
    throw DataError("wfdb header line 1: expected 'name nsig fs nsamples', got '" + line + "'");
  const long nsig = parse_long(record_toks[1], 1, "signal count");
  const long fs = parse_long(record_toks[2], 1, "sample rate");
  const long nsamp = parse_long(record_toks[3], 1, "sample count");
  if (nsig <= 0) throw DataError("wfdb header line 1: signal count must be positive");
  if (fs <= 0) throw DataError("wfdb header line 1: sample rate must be positive");
  if (nsamp <= 0) throw DataError("wfdb header line 1: sample count must be positive");

  std::vector<double> gain(static_cast<std::size_t>(nsig));
  std::vector<double> baseline(static_cast<std::size_t>(nsig));
  for (long j = 0; j < nsig; ++j) {
    if (!std::getline(hs, line))
      throw DataError("wfdb header ended before signal line " + std::to_string(j + 1));
    ++line_no;
    auto toks = split_ws(line);
    if (toks.size() != 5)
      throw DataError("wfdb header line " + std::to_string(line_no) +
                      ": expected 'file format gain baseline units', got '" + line + "'");
    const long format = parse_long(toks[1], line_no, "format");
    if (format != 16)
      throw DataError("wfdb header line " + std::to_string(line_no) + ": unsupported format " +
                      std::to_string(format) + " (only 16 is accepted)");
    gain[static_cast<std::size_t>(j)] = parse_real(toks[2], line_no, "gain");
    baseline[static_cast<std::size_t>(j)] = parse_real(toks[3], line_no, "baseline");
    if (gain[static_cast<std::size_t>(j)] == 0.0)
      throw DataError("wfdb header line " + std::to_string(line_no) + ": gain must be non-zero");
  }

  const std::size_t expected = 2 * static_cast<std::size_t>(nsamp) * static_cast<std::size_t>(nsig);
  if (signal_bytes.size() != expected)
    throw DataError("wfdb signal payload length mismatch: expected " + std::to_string(expected) +
                    " bytes, got " + std::to_string(signal_bytes.size()));

  MatrixXd samples(nsamp, nsig);
  std::size_t p = 0;
  for (long i = 0; i < nsamp; ++i) {
    for (long j = 0; j < nsig; ++j) {
      const std::uint16_t lo = signal_bytes[p];
      const std::uint16_t hi = signal_bytes[p + 1];
      p += 2;
      const auto digital = static_cast<std::int16_t>(static_cast<std::uint16_t>(lo | (hi << 8)));
      samples(i, j) =
          (static_cast<double>(digital) - baseline[static_cast<std::size_t>(j)]) /
          gain[static_cast<std::size_t>(j)];
    }
  }

  RecordingTensor rec;
  rec.placements.push_back(std::move(samples));
  rec.sample_rate_hz = static_cast<int>(fs);
  rec.labels.push_back(0);
  rec.validate();
  return rec;
}

WfdbRecord write_wfdb(const std::string& name, const MatrixXd& samples, int sample_rate_hz,
                      double gain, double baseline, const std::string& units) {
  if (samples.size() == 0) throw DataError("wfdb writer: no samples");
  if (sample_rate_hz <= 0) throw DataError("wfdb writer: sample rate must be positive");
  if (gain == 0.0) throw DataError("wfdb writer: gain must be non-zero");

  WfdbRecord rec;
  std::ostringstream hs;
  hs << name << " " << samples.cols() << " " << sample_rate_hz << " " << samples.rows() << "\n";
  for (Eigen::Index j = 0; j < samples.cols(); ++j)
    hs << name << ".dat 16 " << gain << " " << baseline << " " << units << "\n";
  rec.header_text = hs.str();

  std::string bytes;
  bytes.reserve(static_cast<std::size_t>(samples.size()) * 2);
  for (Eigen::Index i = 0; i < samples.rows(); ++i) {
    for (Eigen::Index j = 0; j < samples.cols(); ++j) {
      const double digital = std::round(samples(i, j) * gain + baseline);
      if (digital < std::numeric_limits<std::int16_t>::min() ||
          digital > std::numeric_limits<std::int16_t>::max())
        throw DataError("wfdb writer: sample at (" + std::to_string(i) + "," + std::to_string(j) +
                        ") does not fit in int16 after gain/baseline scaling");
      put_u16(bytes, static_cast<std::uint16_t>(static_cast<std::int16_t>(digital)));
    }
  }
  rec.signal_bytes.assign(bytes.begin(), bytes.end());
  return rec;
}

RecordingTensor parse_csv(const std::string& text, int sample_rate_hz) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw DataError("csv: empty input");
  const auto header = split_ws([&] {
    std::string h = line;
    std::replace(h.begin(), h.end(), ',', ' ');
    return h;
  }());
  if (header.empty()) throw DataError("csv: header row names no electrodes");
  const std::size_t ncols = header.size();

  std::vector<double> values;
  std::size_t nrows = 0;
  int row_no = 1;
  while (std::getline(is, line)) {
    ++row_no;
    if (line.empty() || line == "\r") continue;
    std::string h = line;
    std::replace(h.begin(), h.end(), ',', ' ');
    auto toks = split_ws(h);
    if (toks.size() != ncols)
      throw DataError("csv row " + std::to_string(row_no) + ": expected " + std::to_string(ncols) +
                      " values, got " + std::to_string(toks.size()));
    for (std::size_t c = 0; c < toks.size(); ++c) {
      std::size_t pos = 0;
      double v = 0;
      try {
        v = std::stod(toks[c], &pos);
      } catch (...) {
        pos = std::string::npos;
      }
      if (pos != toks[c].size())
        throw DataError("csv row " + std::to_string(row_no) + ", column " + std::to_string(c + 1) +
                        ": not a number: '" + toks[c] + "'");
      values.push_back(v);
    }
    ++nrows;
  }
  if (nrows == 0) throw DataError("csv: no samples");

  MatrixXd samples(static_cast<Eigen::Index>(nrows), static_cast<Eigen::Index>(ncols));
  for (std::size_t i = 0; i < nrows; ++i)
    for (std::size_t j = 0; j < ncols; ++j)
      samples(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = values[i * ncols + j];

  RecordingTensor rec;
  rec.placements.push_back(std::move(samples));
  rec.sample_rate_hz = sample_rate_hz;
  rec.labels.push_back(0);
  rec.validate();
  return rec;
}

NormalizedRecording zscore_normalize(const RecordingTensor& rec) {
  rec.validate();
  NormalizedRecording out;
  out.sample_rate_hz = rec.sample_rate_hz;
  out.labels = rec.labels;
  out.z.reserve(rec.placements.size());
  out.mu.reserve(rec.placements.size());
  out.sigma.reserve(rec.placements.size());
  for (std::size_t k = 0; k < rec.placements.size(); ++k) {
    const MatrixXd& x = rec.placements[k];
    const double mu = x.mean();
    // Population standard deviation over all (i, j) of the placement.
    const double var = (x.array() - mu).square().mean();
    const double sigma = std::sqrt(var);
    if (sigma <= 0.0)
      throw DataError("degenerate placement " + std::to_string(k) + ": constant signal (sigma = 0)");
    out.z.push_back(((x.array() - mu) / sigma).matrix());
    out.mu.push_back(mu);
    out.sigma.push_back(sigma);
  }
  return out;
}

SegmentSet segment(const NormalizedRecording& norm, int segment_length) {
  if (norm.z.empty()) throw DataError("segment: empty recording");
  const Eigen::Index n_time = norm.z[0].rows();
  if (segment_length <= 0 || segment_length > n_time)
    throw DataError("segment: length must be in [1, " + std::to_string(n_time) + "], got " +
                    std::to_string(segment_length));

  SegmentSet set;
  set.segment_length = segment_length;
  const Eigen::Index per_electrode = n_time / segment_length;
  for (std::size_t k = 0; k < norm.z.size(); ++k) {
    const MatrixXd& z = norm.z[k];
    for (Eigen::Index j = 0; j < z.cols(); ++j) {
      for (Eigen::Index s = 0; s < per_electrode; ++s) {
        Segment seg;
        seg.values = z.col(j).segment(s * segment_length, segment_length);
        seg.label = norm.labels[k];
        seg.placement_id = static_cast<int>(k);
        seg.electrode_id = static_cast<int>(j);
        seg.start_index = static_cast<std::int64_t>(s) * segment_length;
        set.segments.push_back(std::move(seg));
      }
    }
  }
  return set;
}

namespace {

// Largest-remainder apportionment of `n` items over the ratios, forcing at
// least one item into every split with a positive ratio.
std::array<int, 3> apportion(int n, const std::array<double, 3>& ratios) {
  std::array<int, 3> counts{0, 0, 0};
  std::array<double, 3> frac{0, 0, 0};
  int assigned = 0;
  for (int s = 0; s < 3; ++s) {
    const double target = ratios[static_cast<std::size_t>(s)] * n;
    counts[static_cast<std::size_t>(s)] = static_cast<int>(std::floor(target));
    frac[static_cast<std::size_t>(s)] = target - counts[static_cast<std::size_t>(s)];
    assigned += counts[static_cast<std::size_t>(s)];
  }
  while (assigned < n) {
    int best = 0;
    for (int s = 1; s < 3; ++s)
      if (frac[static_cast<std::size_t>(s)] > frac[static_cast<std::size_t>(best)]) best = s;
    ++counts[static_cast<std::size_t>(best)];
    frac[static_cast<std::size_t>(best)] = -1.0;
    ++assigned;
  }
  for (int s = 0; s < 3; ++s) {
    if (ratios[static_cast<std::size_t>(s)] > 0.0 && counts[static_cast<std::size_t>(s)] == 0) {
      int donor = 0;
      for (int d = 1; d < 3; ++d)
        if (counts[static_cast<std::size_t>(d)] > counts[static_cast<std::size_t>(donor)]) donor = d;
      if (counts[static_cast<std::size_t>(donor)] <= 1)
        throw DataError("split: fewer placements than non-empty splits");
      --counts[static_cast<std::size_t>(donor)];
      ++counts[static_cast<std::size_t>(s)];
    }
  }
  return counts;
}

void partition_ids(std::vector<int>& ids, const std::array<double, 3>& ratios, Rng& rng,
                   std::array<std::vector<int>, 3>& out) {
  rng.shuffle(ids);
  const auto counts = apportion(static_cast<int>(ids.size()), ratios);
  std::size_t at = 0;
  for (int s = 0; s < 3; ++s) {
    for (int c = 0; c < counts[static_cast<std::size_t>(s)]; ++c)
      out[static_cast<std::size_t>(s)].push_back(ids[at++]);
  }
}

}  // namespace

SplitResult split_by_placement(const SegmentSet& set, const std::array<double, 3>& ratios,
                               std::uint64_t seed, bool stratify) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (ratios[0] < 0 || ratios[1] < 0 || ratios[2] < 0 || std::abs(total - 1.0) > 1e-9)
    throw DataError("split: ratios must be non-negative and sum to 1");

  std::vector<int> placement_ids;
  std::vector<int> placement_labels;
  for (const Segment& s : set.segments) {
    if (std::find(placement_ids.begin(), placement_ids.end(), s.placement_id) ==
        placement_ids.end()) {
      placement_ids.push_back(s.placement_id);
      placement_labels.push_back(s.label);
    }
  }
  int non_empty = 0;
  for (double r : ratios)
    if (r > 0.0) ++non_empty;
  if (static_cast<int>(placement_ids.size()) < std::max(non_empty, 3))
    throw DataError("split: need at least " + std::to_string(std::max(non_empty, 3)) +
                    " placements, got " + std::to_string(placement_ids.size()));

  Rng rng(derive_seed(seed, "split"));
  std::array<std::vector<int>, 3> buckets;
  if (stratify) {
    for (int cls = 0; cls <= 1; ++cls) {
      std::vector<int> ids;
      for (std::size_t i = 0; i < placement_ids.size(); ++i)
        if (placement_labels[i] == cls) ids.push_back(placement_ids[i]);
      if (!ids.empty()) partition_ids(ids, ratios, rng, buckets);
    }
  } else {
    std::vector<int> ids = placement_ids;
    partition_ids(ids, ratios, rng, buckets);
  }

  SplitResult result;
  SegmentSet* outs[3] = {&result.train, &result.val, &result.test};
  for (int s = 0; s < 3; ++s) {
    outs[s]->segment_length = set.segment_length;
    for (const Segment& seg : set.segments)
      if (std::find(buckets[static_cast<std::size_t>(s)].begin(),
                    buckets[static_cast<std::size_t>(s)].end(),
                    seg.placement_id) != buckets[static_cast<std::size_t>(s)].end())
        outs[s]->segments.push_back(seg);
  }
  return result;
}

SegmentSet synthesize_dataset(int n_per_class, int segment_length, std::uint64_t seed) {
  if (n_per_class < 1) throw DataError("synthesize: n_per_class must be >= 1");
  if (segment_length < 16) throw DataError("synthesize: segment length must be >= 16");

  // Fixed generator parameters.  Class 0 fires every `base_isi` samples with
  // near-constant amplitude; class 1 jitters each interval by up to 40%,
  // varies spike amplitude, and rides on a fast sine.
  const int base_isi = std::max(8, segment_length / 8);
  const double spike_amp = 4.0;
  const double noise_sd = 0.05;
  const double hf_amp = 0.8;
  const int placements_per_class = std::max(4, (n_per_class + 49) / 50);

  SegmentSet set;
  set.segment_length = segment_length;
  set.segments.reserve(static_cast<std::size_t>(2 * n_per_class));

  for (int cls = 0; cls <= 1; ++cls) {
    for (int i = 0; i < n_per_class; ++i) {
      Rng rng(derive_seed(seed, "synth", static_cast<std::uint64_t>(cls) * 1000003ULL +
                                             static_cast<std::uint64_t>(i)));
      VectorXd v = VectorXd::Zero(segment_length);
      for (int t = 0; t < segment_length; ++t) v[t] = noise_sd * rng.gaussian();
      if (cls == 1) {
        const double phase = rng.uniform() * 6.283185307179586;
        for (int t = 0; t < segment_length; ++t)
          v[t] += hf_amp * std::sin(0.9 * t + phase);
      }
      int t = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(base_isi)));
      while (t < segment_length) {
        const double amp = (cls == 0) ? spike_amp : spike_amp * (0.5 + rng.uniform());
        v[t] += amp;
        if (t + 1 < segment_length) v[t + 1] += 0.5 * amp;
        int isi = base_isi;
        if (cls == 1) {
          const int jitter = static_cast<int>(std::lround((rng.uniform() * 0.8 - 0.4) * base_isi));
          isi = std::max(2, base_isi + jitter);
        }
        t += isi;
      }
      Segment seg;
      seg.values = std::move(v);
      seg.label = cls;
      seg.placement_id = cls * placements_per_class + i % placements_per_class;
      seg.electrode_id = 0;
      seg.start_index = static_cast<std::int64_t>(i / placements_per_class) * segment_length;
      set.segments.push_back(std::move(seg));
    }
  }
  return set;
}

void save_segments(const std::string& path, const SegmentSet& set) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  os.write("EGMS", 4);
  write_pod<std::uint32_t>(os, 1);  // container version
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(set.segment_length));
  write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(set.segments.size()));
  for (const Segment& s : set.segments) {
    write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(s.label));
    write_pod<std::int32_t>(os, s.placement_id);
    write_pod<std::int32_t>(os, s.electrode_id);
    write_pod<std::int64_t>(os, s.start_index);
    os.write(reinterpret_cast<const char*>(s.values.data()),
             static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(s.values.size())));
  }
  if (!os) throw DataError("failed writing '" + path + "'");
}

SegmentSet load_segments(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "EGMS", 4) != 0)
    throw DataError("'" + path + "' is not a segment container");
  const auto version = read_pod<std::uint32_t>(is, "version");
  if (version != 1) throw DataError("unsupported segment container version");
  SegmentSet set;
  set.segment_length = static_cast<int>(read_pod<std::uint32_t>(is, "segment length"));
  const auto count = read_pod<std::uint64_t>(is, "count");
  set.segments.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    Segment& s = set.segments[i];
    s.label = read_pod<std::uint8_t>(is, "label");
    s.placement_id = read_pod<std::int32_t>(is, "placement");
    s.electrode_id = read_pod<std::int32_t>(is, "electrode");
    s.start_index = read_pod<std::int64_t>(is, "start index");
    s.values.resize(set.segment_length);
    is.read(reinterpret_cast<char*>(s.values.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(set.segment_length)));
    if (!is) throw DataError("segment file truncated while reading values");
  }
  return set;
}

}  // namespace egm
