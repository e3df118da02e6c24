#include "egm/cli.hpp"

#include <array>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "egm/interpret.hpp"
#include "egm/metrics.hpp"
#include "egm/model.hpp"
#include "egm/rng.hpp"
#include "egm/signal_io.hpp"
#include "egm/svg.hpp"
#include "egm/tokenizer.hpp"
#include "egm/training.hpp"

namespace egm {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<std::uint8_t> read_binary_file(const std::string& path) {
  const std::string text = read_text_file(path);
  return std::vector<std::uint8_t>(text.begin(), text.end());
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  os << text;
  if (!os) throw DataError("failed writing '" + path + "'");
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory '" + dir + "': " + ec.message());
}

void write_resolved_config(const std::string& out_dir, const std::string& command, json params) {
  params["tool_version"] = version_string();
  params["command"] = command;
  write_text_file((fs::path(out_dir) / "resolved_config.json").string(), params.dump(2) + "\n");
}

std::array<double, 3> parse_ratios(const std::string& text) {
  std::array<double, 3> out{0, 0, 0};
  std::stringstream ss(text);
  std::string cell;
  int i = 0;
  while (std::getline(ss, cell, ',')) {
    if (i >= 3) throw UsageError("split ratios: expected three comma-separated fractions");
    out[static_cast<std::size_t>(i++)] = std::stod(cell);
  }
  if (i != 3) throw UsageError("split ratios: expected three comma-separated fractions");
  return out;
}

// Splits "a,b,..." preserving empty cells.
std::vector<std::string> split_commas(const std::string& text) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(text);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

struct ModelFlags {
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int d_ffn = 256;
  int max_seq_len = 4096;
  int window = 64;
  int random_blocks = 0;
  bool untied = false;

  void add_options(CLI::App* cmd) {
    cmd->add_option("--d-model", d_model, "embedding width");
    cmd->add_option("--layers", n_layers, "encoder layers");
    cmd->add_option("--heads", n_heads, "attention heads");
    cmd->add_option("--ffn", d_ffn, "feed-forward width");
    cmd->add_option("--max-seq", max_seq_len, "maximum sequence length");
    cmd->add_option("--window", window, "sliding-window width");
    cmd->add_option("--random-blocks", random_blocks, "random attention targets per row");
    cmd->add_flag("--untied", untied, "untie the output projection from the embedding");
  }

  ModelConfig to_config(int vocab_size, std::uint64_t seed) const {
    ModelConfig c;
    c.vocab_size = vocab_size;
    c.d_model = d_model;
    c.n_layers = n_layers;
    c.n_heads = n_heads;
    c.d_ffn = d_ffn;
    c.max_seq_len = max_seq_len;
    c.window_size = window;
    c.random_blocks_per_row = random_blocks;
    c.seed = derive_seed(seed, "model-init");
    c.tie_output = !untied;
    c.validate();
    return c;
  }

  json to_json() const {
    return json{{"d_model", d_model},       {"layers", n_layers}, {"heads", n_heads},
                {"ffn", d_ffn},             {"max_seq", max_seq_len}, {"window", window},
                {"random_blocks", random_blocks}, {"untied", untied}};
  }
};

struct TrainFlags {
  double lr = 1e-4;
  double wd = 1e-2;
  int batch = 8;
  int batch_eval = 1;
  int epochs = 5;
  double alpha1 = 1.0;
  double alpha2 = 1.0;
  std::string counterfactual = "none";
  double cf_fraction = 0.25;
  double mask_rate = 0.75;
  int cf_window = 5;
  int cf_segment = 250;

  void add_options(CLI::App* cmd) {
    cmd->add_option("--lr", lr, "learning rate");
    cmd->add_option("--wd", wd, "weight decay");
    cmd->add_option("--batch", batch, "training batch size");
    cmd->add_option("--batch-eval", batch_eval, "evaluation batch size");
    cmd->add_option("--epochs", epochs, "training epochs");
    cmd->add_option("--alpha1", alpha1, "masked-token loss weight");
    cmd->add_option("--alpha2", alpha2, "classification loss weight");
    cmd->add_option("--counterfactual", counterfactual,
                    "training-time counterfactual: none|substitution|addition|label_flip");
    cmd->add_option("--cf-fraction", cf_fraction, "fraction of each batch to modify");
    cmd->add_option("--cf-window", cf_window, "moving-average window (substitution)");
    cmd->add_option("--cf-segment", cf_segment, "augmentation run length (addition)");
    cmd->add_option("--mask-rate", mask_rate, "fraction of signal tokens to mask");
  }

  TrainConfig to_config(std::uint64_t seed) const {
    TrainConfig c;
    c.learning_rate = lr;
    c.weight_decay = wd;
    c.batch_size_train = batch;
    c.batch_size_eval = batch_eval;
    c.epochs = epochs;
    c.alpha1 = alpha1;
    c.alpha2 = alpha2;
    c.counterfactual_kind = counterfactual_kind_from_string(counterfactual);
    c.counterfactual_fraction = cf_fraction;
    c.mask_rate = mask_rate;
    c.substitution_window = cf_window;
    c.addition_segment_length = cf_segment;
    c.seed = derive_seed(seed, "train");
    c.validate();
    return c;
  }

  json to_json() const {
    return json{{"lr", lr},
                {"wd", wd},
                {"batch", batch},
                {"batch_eval", batch_eval},
                {"epochs", epochs},
                {"alpha1", alpha1},
                {"alpha2", alpha2},
                {"counterfactual", counterfactual},
                {"cf_fraction", cf_fraction},
                {"cf_window", cf_window},
                {"cf_segment", cf_segment},
                {"mask_rate", mask_rate}};
  }
};

struct SplitDatasets {
  TokenizedDataset train, val, test;
  json manifest;
};

SplitDatasets split_and_tokenize(const SegmentSet& set, int levels,
                                 const std::array<double, 3>& ratios, std::uint64_t seed,
                                 bool stratify) {
  const Vocabulary vocab = build_vocabulary(levels);
  const SplitResult split = split_by_placement(set, ratios, seed, stratify);
  SplitDatasets out;
  out.train = tokenize_segment_set(split.train, vocab);
  out.val = tokenize_segment_set(split.val, vocab);
  out.test = tokenize_segment_set(split.test, vocab);

  const auto placements_of = [](const SegmentSet& s) {
    std::vector<int> ids;
    for (const Segment& seg : s.segments)
      if (std::find(ids.begin(), ids.end(), seg.placement_id) == ids.end())
        ids.push_back(seg.placement_id);
    std::sort(ids.begin(), ids.end());
    return ids;
  };
  const auto split_entry = [&](const SegmentSet& s, const TokenizedDataset& ds) {
    int labels[2] = {0, 0};
    for (const Segment& seg : s.segments) ++labels[seg.label];
    return json{{"placements", placements_of(s)},
                {"sequences", ds.sequences.size()},
                {"labels", {{"normal", labels[0]}, {"afib", labels[1]}}}};
  };
  out.manifest["V"] = levels;
  out.manifest["M"] = set.segment_length;
  out.manifest["stratified"] = stratify;
  out.manifest["splits"] = {{"train", split_entry(split.train, out.train)},
                            {"val", split_entry(split.val, out.val)},
                            {"test", split_entry(split.test, out.test)}};
  return out;
}

void save_split(const std::string& out_dir, const SplitDatasets& split, int levels) {
  save_dataset((fs::path(out_dir) / "train.tok").string(), split.train);
  save_dataset((fs::path(out_dir) / "val.tok").string(), split.val);
  save_dataset((fs::path(out_dir) / "test.tok").string(), split.test);
  save_vocabulary_json((fs::path(out_dir) / "vocab.json").string(), build_vocabulary(levels));
  write_text_file((fs::path(out_dir) / "manifest.json").string(), split.manifest.dump(2) + "\n");
}

struct TrainOutputs {
  TrainResult result;
};

TrainOutputs train_to_dir(const std::string& out_dir, const TokenizedDataset& train_data,
                          const ModelConfig& model_config, const TrainConfig& train_config,
                          const Vocabulary& vocab) {
  TrainOutputs out{run_training(train_data, model_config, train_config, vocab)};
  save_checkpoint((fs::path(out_dir) / "checkpoint.bin").string(), out.result.state);
  save_history_csv((fs::path(out_dir) / "history.csv").string(), out.result.history);
  json meta;
  meta["l_mlm_reduction"] = "mean";
  meta["masked_positions_per_sequence"] = out.result.masked_positions_per_sequence;
  meta["diverged"] = out.result.diverged;
  meta["epochs_completed"] = out.result.history.size();
  write_text_file((fs::path(out_dir) / "run_meta.json").string(), meta.dump(2) + "\n");
  return out;
}

// ---------------------------------------------------------------------------
// Subcommand payloads
// ---------------------------------------------------------------------------

int cmd_synth(int n_per_class, int m, std::uint64_t seed, const std::string& out_dir) {
  ensure_dir(out_dir);
  const SegmentSet set = synthesize_dataset(n_per_class, m, derive_seed(seed, "data"));
  save_segments((fs::path(out_dir) / "segments.bin").string(), set);
  write_resolved_config(out_dir, "synth", json{{"n", n_per_class}, {"m", m}, {"seed", seed}});
  return 0;
}

int cmd_ingest(const std::vector<std::string>& wfdb_specs, const std::vector<std::string>& csv_specs,
               int m, int sample_rate, const std::string& out_dir) {
  if (wfdb_specs.empty() && csv_specs.empty())
    throw UsageError("ingest: provide at least one --wfdb or --csv record");
  ensure_dir(out_dir);

  SegmentSet merged;
  merged.segment_length = m;
  json records = json::array();
  int next_placement = 0;

  const auto ingest_one = [&](RecordingTensor rec, int label, const std::string& source) {
    rec.labels.assign(rec.placements.size(), label);
    const NormalizedRecording norm = zscore_normalize(rec);
    SegmentSet set = segment(norm, m);
    for (Segment& seg : set.segments) {
      seg.placement_id += next_placement;
      merged.segments.push_back(std::move(seg));
    }
    records.push_back({{"source", source},
                       {"label", label},
                       {"placement_id", next_placement},
                       {"electrodes", rec.placements[0].cols()},
                       {"time_steps", rec.placements[0].rows()}});
    next_placement += static_cast<int>(rec.placements.size());
  };

  for (const std::string& spec : wfdb_specs) {
    const auto parts = split_commas(spec);
    if (parts.size() != 3)
      throw UsageError("--wfdb expects 'header.hea,signal.dat,label', got '" + spec + "'");
    const int label = std::stoi(parts[2]);
    ingest_one(parse_wfdb(read_text_file(parts[0]), read_binary_file(parts[1])), label, parts[0]);
  }
  for (const std::string& spec : csv_specs) {
    const auto parts = split_commas(spec);
    if (parts.size() != 2) throw UsageError("--csv expects 'file.csv,label', got '" + spec + "'");
    const int label = std::stoi(parts[1]);
    ingest_one(parse_csv(read_text_file(parts[0]), sample_rate), label, parts[0]);
  }

  save_segments((fs::path(out_dir) / "segments.bin").string(), merged);
  json manifest;
  manifest["segment_length"] = m;
  manifest["records"] = records;
  manifest["n_segments"] = merged.segments.size();
  write_text_file((fs::path(out_dir) / "manifest.json").string(), manifest.dump(2) + "\n");
  write_resolved_config(out_dir, "ingest",
                        json{{"m", m}, {"sample_rate", sample_rate}, {"wfdb", wfdb_specs}, {"csv", csv_specs}});
  return 0;
}

int cmd_tokenize(const std::string& segments_path, int levels, const std::string& split_spec,
                 bool stratify, std::uint64_t seed, const std::string& out_dir) {
  ensure_dir(out_dir);
  const SegmentSet set = load_segments(segments_path);
  SplitDatasets split =
      split_and_tokenize(set, levels, parse_ratios(split_spec), derive_seed(seed, "split"), stratify);
  // Carry the source-record listing forward so the output manifest is the one
  // document describing records, labels, and splits.
  const fs::path sibling = fs::path(segments_path).parent_path() / "manifest.json";
  if (fs::exists(sibling)) {
    try {
      const json upstream = json::parse(read_text_file(sibling.string()));
      if (upstream.contains("records")) split.manifest["records"] = upstream["records"];
    } catch (const json::exception&) {
      // an unreadable upstream manifest is not fatal to tokenization
    }
  }
  save_split(out_dir, split, levels);
  write_resolved_config(out_dir, "tokenize",
                        json{{"segments", segments_path},
                             {"v", levels},
                             {"split", split_spec},
                             {"stratify", stratify},
                             {"seed", seed}});
  return 0;
}

int cmd_train(const std::string& data_path, const ModelFlags& model_flags,
              const TrainFlags& train_flags, std::uint64_t seed, const std::string& out_dir) {
  ensure_dir(out_dir);
  const TokenizedDataset data = load_dataset(data_path);
  const Vocabulary vocab = build_vocabulary(data.levels);
  const ModelConfig model_config = model_flags.to_config(vocab.size(), seed);
  const TrainConfig train_config = train_flags.to_config(seed);

  const TrainOutputs out = train_to_dir(out_dir, data, model_config, train_config, vocab);
  json params;
  params["data"] = data_path;
  params["seed"] = seed;
  params["model"] = model_flags.to_json();
  params["train"] = train_flags.to_json();
  write_resolved_config(out_dir, "train", params);
  if (out.result.diverged) throw NumericError("training diverged; last good checkpoint kept");
  return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& data_path, std::uint64_t seed,
             double mask_rate, int batch, bool details, const std::string& out_dir) {
  ensure_dir(out_dir);
  const ModelState<float> state = load_checkpoint<float>(checkpoint_path);
  const TokenizedDataset data = load_dataset(data_path);
  const Vocabulary vocab = build_vocabulary(data.levels);

  EvalOptions options;
  options.mask_rate = mask_rate;
  options.seed = derive_seed(seed, "evalmask-root");
  options.batch_size = batch;
  if (details) {
    options.per_sequence_csv = (fs::path(out_dir) / "per_sequence.csv").string();
    options.per_position_csv = (fs::path(out_dir) / "per_position.csv").string();
  }
  const EvalReport report = evaluate(state, data, vocab, options);
  write_text_file((fs::path(out_dir) / "report.json").string(), report.to_json_string() + "\n");
  write_resolved_config(out_dir, "eval",
                        json{{"checkpoint", checkpoint_path},
                             {"data", data_path},
                             {"seed", seed},
                             {"mask_rate", mask_rate},
                             {"batch", batch},
                             {"details", details}});
  return 0;
}

OverlaySeries overlay_to_series(const AttributionOverlay& overlay) {
  OverlaySeries series;
  series.amplitude = overlay.amplitude;
  series.attention.assign(overlay.attention.data(), overlay.attention.data() + overlay.attention.size());
  series.attribution.assign(overlay.attribution.data(),
                            overlay.attribution.data() + overlay.attribution.size());
  return series;
}

int cmd_attribute(const std::string& checkpoint_path, const std::string& data_path, int index,
                  int steps, const std::string& regime, std::uint64_t seed,
                  const std::string& out_dir) {
  ensure_dir(out_dir);
  const ModelState<float> state = load_checkpoint<float>(checkpoint_path);
  const TokenizedDataset data = load_dataset(data_path);
  const Vocabulary vocab = build_vocabulary(data.levels);
  if (index < 0 || index >= static_cast<int>(data.sequences.size()))
    throw DataError("attribute: sequence index out of range");
  if (regime != "ta" && regime != "ta_ts")
    throw UsageError("attribute: --regime must be 'ta' or 'ta_ts'");

  const TokenSequence& clean = data.sequences[static_cast<std::size_t>(index)];
  const double mask_rate = regime == "ta" ? 0.0 : 0.75;
  const std::uint64_t mask_seed = eval_mask_seed(derive_seed(seed, "evalmask-root"), index);
  const TokenSequence masked = apply_mask(clean, mask_rate, mask_seed);

  const AttentionPattern pattern =
      pattern_for_sequence(state.config, masked.length(), masked.afib_position, state.config.seed);
  ForwardTrace<float> trace;
  forward<float>(state, masked.ids, pattern, nullptr, &trace);
  const VectorXd attention = attention_summary(trace);
  const AttributionReport attribution =
      integrated_gradients(state, masked, vocab, IgTarget::afib(), steps);

  AttributionOverlay overlay;
  overlay.sequence_index = index;
  overlay.regime = regime == "ta" ? "ta_masked" : "ta_ts_masked";
  overlay.attention = attention;
  overlay.attribution = attribution.per_token_scores;
  const std::vector<int> levels = signal_levels(clean, vocab);
  const VectorXd amplitudes = detokenize_levels(levels, clean.s_min, clean.s_max, vocab.levels());
  overlay.amplitude.assign(static_cast<std::size_t>(masked.length()),
                           std::numeric_limits<double>::quiet_NaN());
  for (int off = 0; off < clean.signal_len; ++off)
    overlay.amplitude[static_cast<std::size_t>(1 + off)] = amplitudes[off];

  const OverlaySeries series = overlay_to_series(overlay);
  save_overlay_csv((fs::path(out_dir) / "overlay.csv").string(), series);
  save_overlay_svg((fs::path(out_dir) / "overlay.svg").string(), series,
                   "sequence " + std::to_string(index) + " (" + overlay.regime + ")");

  json report;
  report["sequence_index"] = index;
  report["regime"] = overlay.regime;
  report["steps"] = attribution.steps;
  report["target"] = attribution.target_description;
  report["baseline"] = attribution.baseline_description;
  report["f_input"] = attribution.f_input;
  report["f_baseline"] = attribution.f_baseline;
  report["completeness_residual"] = attribution.completeness_residual;
  report["score_sum"] = attribution.per_token_scores.sum();
  write_text_file((fs::path(out_dir) / "attribution.json").string(), report.dump(2) + "\n");
  write_resolved_config(out_dir, "attribute",
                        json{{"checkpoint", checkpoint_path},
                             {"data", data_path},
                             {"index", index},
                             {"steps", steps},
                             {"regime", regime},
                             {"seed", seed}});
  return 0;
}

int cmd_counterfactual(const std::string& plain_path, const std::string& cf_path,
                       const std::string& data_path, const std::string& kind, int window,
                       int segment_length, int overlay_samples, int ig_steps, std::uint64_t seed,
                       const std::string& out_dir) {
  ensure_dir(out_dir);
  const ModelState<float> plain = load_checkpoint<float>(plain_path);
  const ModelState<float> with_cf = load_checkpoint<float>(cf_path);
  const TokenizedDataset data = load_dataset(data_path);
  const Vocabulary vocab = build_vocabulary(data.levels);

  CounterfactualSpec spec;
  spec.kind = counterfactual_kind_from_string(kind);
  spec.window = window;
  spec.segment_length = segment_length;
  spec.seed = derive_seed(seed, "counterfactual");

  StudyOptions options;
  options.eval.seed = derive_seed(seed, "evalmask-root");
  options.overlay_samples = overlay_samples;
  options.ig_steps = ig_steps;

  const StudyReport study = counterfactual_study(plain, with_cf, data, vocab, spec, options);
  write_text_file((fs::path(out_dir) / "study.json").string(), study.to_json_string() + "\n");
  for (const AttributionOverlay& overlay : study.overlays) {
    const std::string stem = "overlay_" + overlay.model + "_seq" +
                             std::to_string(overlay.sequence_index) + "_" + overlay.regime;
    const OverlaySeries series = overlay_to_series(overlay);
    save_overlay_csv((fs::path(out_dir) / (stem + ".csv")).string(), series);
    save_overlay_svg((fs::path(out_dir) / (stem + ".svg")).string(), series, stem);
  }
  write_resolved_config(out_dir, "counterfactual",
                        json{{"plain", plain_path},
                             {"cf", cf_path},
                             {"data", data_path},
                             {"kind", kind},
                             {"window", window},
                             {"segment_length", segment_length},
                             {"overlay_samples", overlay_samples},
                             {"ig_steps", ig_steps},
                             {"seed", seed}});
  return 0;
}

struct AblatePoint {
  std::string name;
  int levels;
  int m;
  double alpha1, alpha2;
};

int cmd_ablate(const std::string& grid, int n_per_class, int epochs, std::uint64_t seed,
               const std::string& out_dir) {
  std::vector<AblatePoint> points;
  int default_n = 0, default_epochs = 0;
  if (grid == "v") {
    for (int v : {50, 100, 150, 200, 250})
      points.push_back({"v_" + std::to_string(v), v, 200, 1.0, 1.0});
    default_n = 150;
    default_epochs = 2;
  } else if (grid == "m") {
    for (int m : {1000, 2000, 3000, 4000})
      points.push_back({"m_" + std::to_string(m), 50, m, 1.0, 1.0});
    default_n = 64;
    default_epochs = 1;
  } else if (grid == "alpha") {
    points.push_back({"alpha_1_0", 50, 200, 1.0, 0.0});
    points.push_back({"alpha_0_1", 50, 200, 0.0, 1.0});
    points.push_back({"alpha_1_1", 50, 200, 1.0, 1.0});
    default_n = 150;
    default_epochs = 2;
  } else {
    throw UsageError("ablate: --grid must be one of v, m, alpha");
  }
  if (n_per_class <= 0) n_per_class = default_n;
  if (epochs <= 0) epochs = default_epochs;
  ensure_dir(out_dir);

  std::ofstream summary((fs::path(out_dir) / "summary.csv").string(), std::ios::trunc);
  if (!summary) throw DataError("cannot open ablate summary for writing");
  summary << "point,v,m,alpha1,alpha2,accuracy,mse,mae\n";
  summary.precision(17);

  for (const AblatePoint& point : points) {
    const std::string point_dir = (fs::path(out_dir) / point.name).string();
    ensure_dir(point_dir);

    const SegmentSet set = synthesize_dataset(n_per_class, point.m, derive_seed(seed, "data"));
    const SplitDatasets split = split_and_tokenize(set, point.levels, {0.8, 0.1, 0.1},
                                                   derive_seed(seed, "split"), /*stratify=*/true);
    save_split(point_dir, split, point.levels);

    const Vocabulary vocab = build_vocabulary(point.levels);
    ModelFlags model_flags;  // desk-scale defaults
    const ModelConfig model_config = model_flags.to_config(vocab.size(), seed);
    TrainFlags train_flags;
    train_flags.epochs = epochs;
    train_flags.alpha1 = point.alpha1;
    train_flags.alpha2 = point.alpha2;
    const TrainConfig train_config = train_flags.to_config(seed);

    train_to_dir(point_dir, split.train, model_config, train_config, vocab);
    const ModelState<float> state =
        load_checkpoint<float>((fs::path(point_dir) / "checkpoint.bin").string());

    EvalOptions eval_options;
    eval_options.seed = derive_seed(seed, "evalmask-root");
    const EvalReport report = evaluate(state, split.test, vocab, eval_options);
    write_text_file((fs::path(point_dir) / "report.json").string(), report.to_json_string() + "\n");

    summary << point.name << "," << point.levels << "," << point.m << "," << point.alpha1 << ","
            << point.alpha2 << "," << (report.classification.accuracy ? *report.classification.accuracy : -1.0)
            << "," << report.mse << "," << report.mae << "\n";

    json params;
    params["grid"] = grid;
    params["point"] = point.name;
    params["v"] = point.levels;
    params["m"] = point.m;
    params["alpha1"] = point.alpha1;
    params["alpha2"] = point.alpha2;
    params["n"] = n_per_class;
    params["epochs"] = epochs;
    params["seed"] = seed;
    write_resolved_config(point_dir, "ablate", params);
  }
  write_resolved_config(out_dir, "ablate",
                        json{{"grid", grid}, {"n", n_per_class}, {"epochs", epochs}, {"seed", seed}});
  return 0;
}

int cmd_plot(const std::string& csv_path, const std::string& out_path, const std::string& title) {
  const OverlaySeries series = load_overlay_csv(csv_path);
  if (!fs::path(out_path).parent_path().empty())
    ensure_dir(fs::path(out_path).parent_path().string());
  save_overlay_svg(out_path, series, title.empty() ? fs::path(csv_path).stem().string() : title);
  json params{{"csv", csv_path}, {"out", out_path}, {"title", title}};
  params["tool_version"] = version_string();
  params["command"] = "plot";
  fs::path config_path = out_path;
  config_path.replace_extension(".config.json");
  write_text_file(config_path.string(), params.dump(2) + "\n");
  return 0;
}

// Turns `--config file.json` into leading option tokens so explicit CLI flags
// (parsed with a take-last policy) override the file values.
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::vector<std::string> out;
  std::string config_path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw UsageError("--config expects a file path");
      config_path = args[++i];
      continue;
    }
    out.push_back(args[i]);
  }
  if (config_path.empty()) return out;
  if (out.empty()) throw UsageError("--config must follow a subcommand");

  json doc;
  try {
    doc = json::parse(read_text_file(config_path));
  } catch (const json::exception& e) {
    throw DataError("config file '" + config_path + "' is not valid JSON: " + std::string(e.what()));
  }
  if (!doc.is_object()) throw DataError("config file must hold one JSON object");

  std::vector<std::string> expanded;
  expanded.push_back(out[0]);  // subcommand first
  const auto push_value = [&expanded](const std::string& key, const json& value) {
    expanded.push_back("--" + key);
    if (value.is_string())
      expanded.push_back(value.get<std::string>());
    else
      expanded.push_back(value.dump());
  };
  for (const auto& [key, value] : doc.items()) {
    if (value.is_boolean()) {
      if (value.get<bool>()) expanded.push_back("--" + key);
    } else if (value.is_array()) {
      for (const auto& element : value) push_value(key, element);
    } else {
      push_value(key, value);
    }
  }
  expanded.insert(expanded.end(), out.begin() + 1, out.end());
  return expanded;
}

}  // namespace

int run_command(const std::vector<std::string>& args) {
  try {
    const std::vector<std::string> argv = expand_config(args);

    CLI::App app{"intracardiac electrogram token pipeline"};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a labeled synthetic segment set");
    int synth_n = 100, synth_m = 200;
    std::uint64_t synth_seed = 7;
    std::string synth_out = "synth_out";
    synth->add_option("--n", synth_n, "segments per class");
    synth->add_option("--m", synth_m, "segment length in samples");
    synth->add_option("--seed", synth_seed, "root seed");
    synth->add_option("--out", synth_out, "output directory");

    // ingest
    auto* ingest = app.add_subcommand("ingest", "parse recordings into normalized segments");
    std::vector<std::string> ingest_wfdb, ingest_csv;
    int ingest_m = 1000, ingest_rate = 1000;
    std::string ingest_out = "ingest_out";
    ingest->add_option("--wfdb", ingest_wfdb, "record as 'header.hea,signal.dat,label'")
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    ingest->add_option("--csv", ingest_csv, "record as 'file.csv,label'")
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    ingest->add_option("--m", ingest_m, "segment length in samples");
    ingest->add_option("--sample-rate", ingest_rate, "sample rate for CSV records");
    ingest->add_option("--out", ingest_out, "output directory");

    // tokenize
    auto* tokenize = app.add_subcommand("tokenize", "split by placement and tokenize segments");
    std::string tok_segments, tok_split = "0.8,0.1,0.1", tok_out = "tokenize_out";
    int tok_v = 250;
    bool tok_stratify = false;
    std::uint64_t tok_seed = 7;
    tokenize->add_option("--segments", tok_segments, "segment container")->required();
    tokenize->add_option("--v", tok_v, "quantization levels");
    tokenize->add_option("--split", tok_split, "train,val,test fractions");
    tokenize->add_flag("--stratify", tok_stratify, "stratify the placement split by class");
    tokenize->add_option("--seed", tok_seed, "root seed");
    tokenize->add_option("--out", tok_out, "output directory");

    // train
    auto* train = app.add_subcommand("train", "train the masked model");
    std::string train_data, train_out = "train_out";
    std::uint64_t train_seed = 7;
    ModelFlags train_model;
    TrainFlags train_flags;
    train->add_option("--data", train_data, "tokenized training dataset")->required();
    train->add_option("--seed", train_seed, "root seed");
    train->add_option("--out", train_out, "output directory");
    train_model.add_options(train);
    train_flags.add_options(train);

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string eval_ckpt, eval_data, eval_out = "eval_out";
    std::uint64_t eval_seed = 7;
    double eval_mask = 0.75;
    int eval_batch = 1;
    bool eval_details = false;
    eval_cmd->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
    eval_cmd->add_option("--data", eval_data, "tokenized dataset")->required();
    eval_cmd->add_option("--seed", eval_seed, "root seed");
    eval_cmd->add_option("--mask-rate", eval_mask, "signal masking rate");
    eval_cmd->add_option("--batch", eval_batch, "evaluation batch size");
    eval_cmd->add_flag("--details", eval_details, "write per-sequence and per-position CSVs");
    eval_cmd->add_option("--out", eval_out, "output directory");

    // attribute
    auto* attribute = app.add_subcommand("attribute", "attention and attribution overlays");
    std::string attr_ckpt, attr_data, attr_regime = "ta_ts", attr_out = "attribute_out";
    int attr_index = 0, attr_steps = 64;
    std::uint64_t attr_seed = 7;
    attribute->add_option("--checkpoint", attr_ckpt, "model checkpoint")->required();
    attribute->add_option("--data", attr_data, "tokenized dataset")->required();
    attribute->add_option("--index", attr_index, "sequence index");
    attribute->add_option("--steps", attr_steps, "path-integral steps");
    attribute->add_option("--regime", attr_regime, "masking regime: ta or ta_ts");
    attribute->add_option("--seed", attr_seed, "root seed");
    attribute->add_option("--out", attr_out, "output directory");

    // counterfactual
    auto* cfc = app.add_subcommand("counterfactual", "two-checkpoint counterfactual study");
    std::string cf_plain, cf_ckpt, cf_data, cf_kind = "substitution", cf_out = "counterfactual_out";
    int cf_window = 5, cf_segment = 250, cf_samples = 2, cf_steps = 32;
    std::uint64_t cf_seed = 7;
    cfc->add_option("--plain", cf_plain, "checkpoint trained without counterfactuals")->required();
    cfc->add_option("--cf", cf_ckpt, "checkpoint trained with counterfactuals")->required();
    cfc->add_option("--data", cf_data, "tokenized dataset")->required();
    cfc->add_option("--kind", cf_kind, "substitution|addition|label_flip|none");
    cfc->add_option("--window", cf_window, "moving-average window");
    cfc->add_option("--segment-length", cf_segment, "augmentation run length");
    cfc->add_option("--overlay-samples", cf_samples, "sequences to overlay");
    cfc->add_option("--ig-steps", cf_steps, "path-integral steps for overlays");
    cfc->add_option("--seed", cf_seed, "root seed");
    cfc->add_option("--out", cf_out, "output directory");

    // ablate
    auto* ablate = app.add_subcommand("ablate", "sweep V / M / loss-mixture grids");
    std::string abl_grid, abl_out = "ablate_out";
    int abl_n = 0, abl_epochs = 0;
    std::uint64_t abl_seed = 7;
    ablate->add_option("--grid", abl_grid, "grid to sweep: v, m, or alpha")->required();
    ablate->add_option("--n", abl_n, "segments per class (0 = grid default)");
    ablate->add_option("--epochs", abl_epochs, "training epochs (0 = grid default)");
    ablate->add_option("--seed", abl_seed, "root seed");
    ablate->add_option("--out", abl_out, "output directory");

    // plot
    auto* plot = app.add_subcommand("plot", "render an overlay CSV as SVG");
    std::string plot_csv, plot_out = "overlay.svg", plot_title;
    plot->add_option("--csv", plot_csv, "overlay CSV")->required();
    plot->add_option("--out", plot_out, "output SVG path");
    plot->add_option("--title", plot_title, "plot title");

    try {
      std::vector<const char*> cargs;
      cargs.push_back("egm");
      for (const std::string& a : argv) cargs.push_back(a.c_str());
      app.parse(static_cast<int>(cargs.size()), cargs.data());
    } catch (const CLI::CallForHelp& e) {
      std::cout << app.help();
      return 0;
    } catch (const CLI::CallForAllHelp& e) {
      std::cout << app.help("", CLI::AppFormatMode::All);
      return 0;
    } catch (const CLI::ParseError& e) {
      throw UsageError(e.what());
    }

    if (synth->parsed()) return cmd_synth(synth_n, synth_m, synth_seed, synth_out);
    if (ingest->parsed()) return cmd_ingest(ingest_wfdb, ingest_csv, ingest_m, ingest_rate, ingest_out);
    if (tokenize->parsed())
      return cmd_tokenize(tok_segments, tok_v, tok_split, tok_stratify, tok_seed, tok_out);
    if (train->parsed()) return cmd_train(train_data, train_model, train_flags, train_seed, train_out);
    if (eval_cmd->parsed())
      return cmd_eval(eval_ckpt, eval_data, eval_seed, eval_mask, eval_batch, eval_details, eval_out);
    if (attribute->parsed())
      return cmd_attribute(attr_ckpt, attr_data, attr_index, attr_steps, attr_regime, attr_seed, attr_out);
    if (cfc->parsed())
      return cmd_counterfactual(cf_plain, cf_ckpt, cf_data, cf_kind, cf_window, cf_segment,
                                cf_samples, cf_steps, cf_seed, cf_out);
    if (ablate->parsed()) return cmd_ablate(abl_grid, abl_n, abl_epochs, abl_seed, abl_out);
    if (plot->parsed()) return cmd_plot(plot_csv, plot_out, plot_title);
    throw UsageError("no subcommand given");
  } catch (const UsageError& e) {
    std::cerr << "egm-error: kind=usage message=\"" << e.what() << "\"\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "egm-error: kind=numeric message=\"" << e.what() << "\"\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "egm-error: kind=data message=\"" << e.what() << "\"\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "egm-error: kind=data message=\"" << e.what() << "\"\n";
    return 2;
  }
}

}  // namespace egm
