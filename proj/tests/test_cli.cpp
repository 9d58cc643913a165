#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "advseg/config.hpp"
#include "support.hpp"

using namespace advseg;
using namespace testing_support;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int status = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

CliRun advseg_cli(const std::string& args, const fs::path& scratch) {
  const fs::path out = scratch / "stdout.txt", err = scratch / "stderr.txt";
  const std::string cmd =
      std::string("\"") + ADVSEG_CLI + "\" " + args + " >\"" + out.string() + "\" 2>\"" + err.string() + "\"";
  const int raw = std::system(cmd.c_str());
  CliRun r;
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(std::move(cells));
  }
  return rows;
}

// One small synthetic dataset shared by the whole suite.
class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli");
    write_text(root() / "synth.json",
               R"({"extent": 24, "radius_min": 2.0, "radius_max": 4.0, "source_cases": 3, "target_cases": 3,
                   "source_heldout": 1, "target_heldout": 1})");
    const CliRun r = advseg_cli("gen-data --config " + (root() / "synth.json").string() + " --seed 7 --out " +
                                 (root() / "data").string(),
                             root());
    ASSERT_EQ(r.status, 0) << r.err;
    write_text(root() / "train.json", R"({
      "mode": "uda", "seed": 2,
      "segmenter": {"pathway_fms": [2,2,2,2,3,3,3,3], "hidden_fms": [4,4]},
      "discriminator": {"fms": [3,3,3,3]},
      "schedule": {"epochs": 3, "batches_per_epoch": 1, "seg_batch": 2, "adv_batch": 2},
      "val_every": 0,
      "data": {"source": "data/source_train.json", "target": "data/target_train.json"}
    })");
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static const fs::path& root() { return dir_->path(); }
  static fs::path data(const std::string& name) { return root() / "data" / name; }
  static std::string train_args(const fs::path& out) {
    return "train --config " + (root() / "train.json").string() + " --out " + out.string();
  }

  inline static TempDir* dir_ = nullptr;
};

}  // namespace

TEST_F(CliTest, GenDataPrintsManifestAndIsSeedDeterministic) {
  const fs::path a = root() / "gen_a", b = root() / "gen_b";
  const std::string cfg = " --config " + (root() / "synth.json").string() + " --seed 7 --out ";
  const CliRun ra = advseg_cli("gen-data" + cfg + a.string(), root());
  ASSERT_EQ(ra.status, 0) << ra.err;
  EXPECT_NE(ra.out.find("manifest.json"), std::string::npos);
  EXPECT_TRUE(fs::exists(a / "manifest.json"));
  ASSERT_EQ(advseg_cli("gen-data" + cfg + b.string(), root()).status, 0);
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (e.is_regular_file()) EXPECT_EQ(slurp(e.path()), slurp(b / fs::relative(e.path(), a)));
  }
  EXPECT_EQ(slurp(a / "cases" / "S_000.json"), slurp(data("cases/S_000.json")));
}

TEST_F(CliTest, GenDataUnwritableDirectoryNamesThePath) {
  const fs::path blocker = root() / "blocker";
  write_text(blocker, "file, not a directory");
  const CliRun r = advseg_cli("gen-data --out " + (blocker / "sub").string(), root());
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.err.find(blocker.string()), std::string::npos) << r.err;
}

TEST_F(CliTest, ExitCodes) {
  EXPECT_EQ(advseg_cli("", root()).status, 2);
  EXPECT_EQ(advseg_cli("frobnicate", root()).status, 2);
  EXPECT_EQ(advseg_cli("train --config " + (root() / "missing.json").string(), root()).status, 2);
  EXPECT_EQ(advseg_cli(train_args(root() / "bad_mode") + " --mode sideways", root()).status, 2);
  EXPECT_EQ(advseg_cli(train_args(root() / "bad_taps") + " --taps L11", root()).status, 2);
  EXPECT_EQ(advseg_cli("gen-data --help", root()).status, 0);

  // Runtime failure: a case file that does not parse.
  const fs::path broken = root() / "broken";
  fs::create_directories(broken);
  write_text(broken / "x.json", "{not json");
  write_text(broken / "manifest.json", R"([{"case_id": "S_000", "domain": "S", "image": "x.json", "labels": "x.json"}])");
  write_text(broken / "train.json", R"({"mode": "source-only", "data": {"source": "manifest.json"}})");
  const CliRun r = advseg_cli("train --config " + (broken / "train.json").string() + " --out " +
                               (root() / "broken_out").string(),
                           root());
  EXPECT_EQ(r.status, 3) << r.err;
}

TEST_F(CliTest, TrainValidatesBeforeCompute) {
  write_text(root() / "no_target.json", R"({"mode": "uda", "data": {"source": "data/source_train.json",
                                             "val_target": "nowhere.json"}})");
  const fs::path out = root() / "no_target_out";
  const CliRun r = advseg_cli("train --config " + (root() / "no_target.json").string() + " --out " + out.string(), root());
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.err.find("target"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("nowhere.json"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(out / "metrics.csv"));
}

TEST_F(CliTest, SourceOnlyEmitsNoDiscriminator) {
  const fs::path so = root() / "so", uda = root() / "uda";
  ASSERT_EQ(advseg_cli(train_args(so) + " --mode source-only", root()).status, 0);
  ASSERT_EQ(advseg_cli(train_args(uda), root()).status, 0);
  EXPECT_TRUE(fs::exists(so / "segmenter"));
  EXPECT_FALSE(fs::exists(so / "discriminator"));
  EXPECT_TRUE(fs::exists(uda / "discriminator"));
}

TEST_F(CliTest, TapsFlagRestrictsToDeepestLayer) {
  const fs::path out = root() / "l10";
  ASSERT_EQ(advseg_cli(train_args(out) + " --taps L10", root()).status, 0);
  const Json run = read_json_file(out / "run.json");
  EXPECT_EQ(run.at("command"), "train");
  EXPECT_EQ(parse_taps(run.at("config").at("taps").get<std::string>()), parse_taps("L10"));
  EXPECT_EQ(format_taps(parse_taps("L10")), "L10");
}

TEST_F(CliTest, AlphaReachesMaxAtRampEnd) {
  const fs::path out = root() / "ramp";
  const CliRun r = advseg_cli(train_args(out) + " --alpha-max 0.05 --epochs 36", root());
  ASSERT_EQ(r.status, 0) << r.err;
  const auto rows = read_csv(out / "metrics.csv");
  ASSERT_EQ(rows.size(), 37u);
  ASSERT_EQ(rows[0][3], "alpha");
  for (std::size_t e = 1; e <= 36; ++e) {
    const double alpha = std::stod(rows[e][3]);
    if (e <= 10) EXPECT_EQ(alpha, 0.0) << e;
    if (e < 35) EXPECT_LT(alpha, 0.05) << e;
    if (e >= 35) EXPECT_EQ(alpha, 0.05) << e;
  }
}

TEST_F(CliTest, RunJsonReplayReproducesMetricsExactly) {
  const fs::path first = root() / "replay_a", second = root() / "replay_b";
  ASSERT_EQ(advseg_cli(train_args(first) + " --seed 5", root()).status, 0);
  const CliRun r = advseg_cli("train --config " + (first / "run.json").string() + " --out " + second.string(), root());
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(slurp(first / "metrics.csv"), slurp(second / "metrics.csv"));
  EXPECT_NE(slurp(first / "metrics.csv"), "");

  const fs::path other = root() / "replay_c";
  ASSERT_EQ(advseg_cli(train_args(other) + " --seed 6", root()).status, 0);
  EXPECT_NE(slurp(first / "metrics.csv"), slurp(other / "metrics.csv"));
}

TEST_F(CliTest, EvalWritesCaseAndSummaryRows) {
  const fs::path model = root() / "eval_model", out = root() / "eval_out";
  ASSERT_EQ(advseg_cli(train_args(model) + " --mode source-only", root()).status, 0);
  const CliRun r = advseg_cli("eval --checkpoint " + (model / "segmenter").string() + " --manifest " +
                               data("target_test.json").string() + " --out " + out.string(),
                           root());
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_NE(r.out.find("DSC"), std::string::npos);
  const auto rows = read_csv(out / "metrics.csv");
  ASSERT_GE(rows.size(), 2u);
  EXPECT_EQ(rows[1][0], "T_002");

  write_text(root() / "empty.json", "[]");
  EXPECT_NE(advseg_cli("eval --checkpoint " + (model / "segmenter").string() + " --manifest " +
                           (root() / "empty.json").string() + " --out " + (root() / "eval_empty").string(),
                       root())
                .status,
            0);
  EXPECT_NE(advseg_cli("eval --checkpoint " + (root() / "nope").string() + " --manifest " +
                           data("target_test.json").string() + " --out " + (root() / "eval_nope").string(),
                       root())
                .status,
            0);
}

TEST_F(CliTest, ProbeUntrainedIsNearChanceAndRejectsZeroSamples) {
  const fs::path model = root() / "probe_model";
  ASSERT_EQ(advseg_cli(train_args(model) + " --epochs 1", root()).status, 0);
  write_text(root() / "probe.json", "{\"segmenter\": \"" + (model / "segmenter").string() +
                                        "\", \"source\": \"data/source_heldout.json\","
                                        " \"target\": \"data/target_test.json\", \"n_samples\": 200,"
                                        " \"fresh\": {\"source\": \"data/source_train.json\","
                                        " \"target\": \"data/target_train.json\", \"steps\": 0}}");
  const CliRun r = advseg_cli("probe --config " + (root() / "probe.json").string(), root());
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_NEAR(std::stod(r.out), 0.5, 3.0 / std::sqrt(200.0));
  EXPECT_EQ(advseg_cli("probe --config " + (root() / "probe.json").string() + " --n-samples 0", root()).status, 2);
}
