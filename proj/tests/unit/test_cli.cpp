#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "egm/cli.hpp"
#include "egm/signal_io.hpp"
#include "egm/tokenizer.hpp"

using namespace egm;
namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const std::string& name) {
  const fs::path dir = fs::path("/tmp/egm_cli_tests") / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

std::string slurp(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

nlohmann::json slurp_json(const fs::path& path) { return nlohmann::json::parse(slurp(path)); }

int run(std::initializer_list<std::string> args) { return run_command(std::vector<std::string>(args)); }

}  // namespace

TEST_CASE("synth is byte-reproducible") {
  const std::string d1 = fresh_dir("synth_a");
  const std::string d2 = fresh_dir("synth_b");
  CHECK(run({"synth", "--n", "100", "--m", "200", "--seed", "7", "--out", d1}) == 0);
  CHECK(run({"synth", "--n", "100", "--m", "200", "--seed", "7", "--out", d2}) == 0);
  CHECK(slurp(fs::path(d1) / "segments.bin") == slurp(fs::path(d2) / "segments.bin"));
  const auto cfg = slurp_json(fs::path(d1) / "resolved_config.json");
  CHECK(cfg["tool_version"] == version_string());
  CHECK(cfg["command"] == "synth");
  CHECK(load_segments((fs::path(d1) / "segments.bin").string()).segments.size() == 200);
}

TEST_CASE("unknown subcommands exit 1 without artifacts") {
  const std::string dir = fresh_dir("unknown");
  CHECK(run({"frobnicate", "--out", dir + "/x"}) == 1);
  CHECK_FALSE(fs::exists(fs::path(dir) / "x"));
  CHECK(run({}) == 1);
}

TEST_CASE("the full pipeline runs end to end") {
  const std::string root = fresh_dir("pipeline");
  const std::string s = root + "/s", t = root + "/t", m = root + "/m", e = root + "/e";
  const std::string a = root + "/a", p = root + "/p";

  REQUIRE(run({"synth", "--n", "24", "--m", "48", "--seed", "11", "--out", s}) == 0);
  REQUIRE(run({"tokenize", "--segments", s + "/segments.bin", "--v", "12", "--stratify",
               "--seed", "11", "--out", t}) == 0);
  const auto manifest = slurp_json(fs::path(t) / "manifest.json");
  CHECK(manifest["V"] == 12);
  CHECK(manifest["M"] == 48);

  REQUIRE(run({"train", "--data", t + "/train.tok", "--layers", "1", "--d-model", "16",
               "--heads", "2", "--ffn", "32", "--max-seq", "64", "--window", "9", "--epochs", "1",
               "--seed", "11", "--out", m}) == 0);
  CHECK(fs::exists(fs::path(m) / "checkpoint.bin"));
  CHECK(fs::exists(fs::path(m) / "history.csv"));
  const auto meta = slurp_json(fs::path(m) / "run_meta.json");
  CHECK(meta["diverged"] == false);
  CHECK(meta["l_mlm_reduction"] == "mean");
  CHECK(meta["masked_positions_per_sequence"] == 36);

  REQUIRE(run({"eval", "--checkpoint", m + "/checkpoint.bin", "--data", t + "/test.tok", "--seed",
               "11", "--details", "--out", e}) == 0);
  const auto report = slurp_json(fs::path(e) / "report.json");
  CHECK(report.contains("accuracy"));
  CHECK(report.contains("mse"));
  CHECK(fs::exists(fs::path(e) / "per_sequence.csv"));

  REQUIRE(run({"attribute", "--checkpoint", m + "/checkpoint.bin", "--data", t + "/test.tok",
               "--index", "0", "--steps", "8", "--regime", "ta", "--seed", "11", "--out", a}) == 0);
  const auto attribution = slurp_json(fs::path(a) / "attribution.json");
  CHECK(attribution["steps"] == 8);
  CHECK(attribution.contains("completeness_residual"));
  CHECK(fs::exists(fs::path(a) / "overlay.csv"));
  CHECK(fs::exists(fs::path(a) / "overlay.svg"));

  REQUIRE(run({"plot", "--csv", a + "/overlay.csv", "--out", p + "/replot.svg"}) == 0);
  const std::string svg = slurp(fs::path(p) / "replot.svg");
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("polyline") != std::string::npos);

  // counterfactual study against itself (plain == cf checkpoint)
  const std::string c = root + "/c";
  REQUIRE(run({"counterfactual", "--plain", m + "/checkpoint.bin", "--cf", m + "/checkpoint.bin",
               "--data", t + "/test.tok", "--kind", "substitution", "--overlay-samples", "1",
               "--ig-steps", "2", "--seed", "11", "--out", c}) == 0);
  const auto study = slurp_json(fs::path(c) / "study.json");
  CHECK(study["grid"].size() == 4);
}

TEST_CASE("config files feed flags and explicit flags win") {
  const std::string root = fresh_dir("config");
  const std::string cfg_path = root + "/config.json";
  {
    std::ofstream os(cfg_path);
    os << R"({"n": 10, "m": 32, "seed": 3, "out": ")" << root << R"(/from_file"})";
  }
  REQUIRE(run({"synth", "--config", cfg_path}) == 0);
  CHECK(load_segments(root + "/from_file/segments.bin").segments.size() == 20);

  REQUIRE(run({"synth", "--config", cfg_path, "--n", "15", "--out", root + "/override"}) == 0);
  CHECK(load_segments(root + "/override/segments.bin").segments.size() == 30);
  const auto resolved = slurp_json(fs::path(root) / "override" / "resolved_config.json");
  CHECK(resolved["n"] == 15);
}

TEST_CASE("config arrays expand into repeated options") {
  const std::string root = fresh_dir("config_array");
  {
    MatrixXd wave(32, 1);
    for (Eigen::Index i = 0; i < 32; ++i) wave(i, 0) = std::sin(0.4 * static_cast<double>(i));
    const WfdbRecord rec = write_wfdb("arr", wave, 1000, 200.0, 0.0);
    std::ofstream h(root + "/arr.hea");
    h << rec.header_text;
    std::ofstream d(root + "/arr.dat", std::ios::binary);
    d.write(reinterpret_cast<const char*>(rec.signal_bytes.data()),
            static_cast<std::streamsize>(rec.signal_bytes.size()));
  }
  const std::string cfg_path = root + "/ingest.json";
  {
    std::ofstream os(cfg_path);
    os << R"({"wfdb": [")" << root << "/arr.hea," << root << R"(/arr.dat,0", ")" << root
       << "/arr.hea," << root << R"(/arr.dat,1"], "m": 8, "out": ")" << root << R"(/ing"})";
  }
  REQUIRE(run({"ingest", "--config", cfg_path}) == 0);
  const auto manifest = slurp_json(fs::path(root) / "ing" / "manifest.json");
  CHECK(manifest["records"].size() == 2);
}

TEST_CASE("missing inputs exit with the data code") {
  const std::string root = fresh_dir("errors");
  CHECK(run({"eval", "--checkpoint", root + "/nope.bin", "--data", root + "/nope.tok", "--out",
             root + "/e"}) == 2);
  CHECK(run({"tokenize", "--segments", root + "/nope.bin", "--out", root + "/t"}) == 2);
  CHECK(run({"ablate", "--grid", "bogus", "--out", root + "/ab"}) == 1);
}

TEST_CASE("wfdb and csv records ingest into one segment set") {
  const std::string root = fresh_dir("ingest");
  // Two fixture records via the library writer.
  {
    MatrixXd wave(64, 2);
    for (Eigen::Index i = 0; i < 64; ++i) {
      wave(i, 0) = std::sin(0.3 * static_cast<double>(i));
      wave(i, 1) = std::cos(0.2 * static_cast<double>(i));
    }
    const WfdbRecord rec = write_wfdb("fix", wave, 1000, 200.0, 0.0);
    std::ofstream h(root + "/fix.hea");
    h << rec.header_text;
    std::ofstream d(root + "/fix.dat", std::ios::binary);
    d.write(reinterpret_cast<const char*>(rec.signal_bytes.data()),
            static_cast<std::streamsize>(rec.signal_bytes.size()));
  }
  {
    std::ofstream c(root + "/fix.csv");
    c << "e1,e2\n";
    for (int i = 0; i < 48; ++i) c << 0.1 * i << "," << std::sin(0.5 * i) << "\n";
  }

  REQUIRE(run({"ingest", "--wfdb", root + "/fix.hea," + root + "/fix.dat,1", "--csv",
               root + "/fix.csv,0", "--m", "16", "--out", root + "/ing"}) == 0);
  const SegmentSet set = load_segments(root + "/ing/segments.bin");
  // 64/16 = 4 segments x 2 electrodes + 48/16 = 3 segments x 2 electrodes.
  CHECK(set.segments.size() == 8 + 6);
  const auto manifest = slurp_json(fs::path(root) / "ing" / "manifest.json");
  CHECK(manifest["records"].size() == 2);
  CHECK(manifest["records"][0]["label"] == 1);
}
