#include "cgdetr/train.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "cgdetr_cli_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::ofstream(dir_ / "spec.json")
        << json{{"n_pairs", 12}, {"n_eval", 4}, {"L_v", 8}, {"d_feat", 8}, {"n_concepts", 10}};
    cgdetr::RunConfig cfg = cgdetr::synthetic_preset();
    cfg.model.feature_dim = 8;
    cfg.model.hidden = 8;
    cfg.model.n_heads = 2;
    cfg.model.ffn_dim = 16;
    cfg.train.batch_size = 4;
    cfg.train.eval_every = 1;
    cfg.train.checkpoint_every = 1;
    std::ofstream(dir_ / "cfg.json") << json(cfg).dump(2);
    ASSERT_EQ(run("gen --spec " + path("spec.json") + " --out " + path("ds")), 0);
  }

  static std::string path(const std::string& name) { return (dir_ / name).string(); }

  static int run(const std::string& args) {
    const std::string cmd = std::string(CGDETR_CLI) + " " + args + " > " +
                            (dir_ / "last.log").string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  static std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  static inline fs::path dir_;
};

}  // namespace

TEST_F(Cli, GenIsReproducible) {
  EXPECT_EQ(run("gen --spec " + path("spec.json")), 2);
  ASSERT_EQ(run("gen --spec " + path("spec.json") + " --out " + path("ds2")), 0);
  const std::string second = slurp(dir_ / "last.log");
  ASSERT_EQ(run("gen --spec " + path("spec.json") + " --out " + path("ds3")), 0);
  const std::string third = slurp(dir_ / "last.log");
  auto fingerprint = [](const std::string& log) { return log.substr(log.find("fingerprint ")); };
  EXPECT_EQ(fingerprint(second), fingerprint(third));
}

TEST_F(Cli, TrainEvalRoundTrip) {
  ASSERT_EQ(run("train --data " + path("ds") + " --config " + path("cfg.json") +
                " --epochs 0 --out " + path("run0")),
            0);
  ASSERT_EQ(run("train --data " + path("ds") + " --config " + path("cfg.json") +
                " --epochs 1 --seed 3 --out " + path("run1")),
            0);
  EXPECT_TRUE(fs::exists(dir_ / "run1" / "last.ckpt"));
  EXPECT_TRUE(fs::exists(dir_ / "run1" / "reports" / "epoch_0001.json"));
  const json manifest = json::parse(slurp(dir_ / "run1" / "manifest.json"));
  EXPECT_EQ(manifest.at("epochs_completed"), 1);
  EXPECT_EQ(manifest.at("seed"), 3);

  ASSERT_EQ(run("eval --ckpt " + path("run1/last.ckpt") + " --data " + path("ds") + " --out " +
                path("report.json")),
            0);
  const json report = json::parse(slurp(dir_ / "report.json"));
  EXPECT_TRUE(report.contains("r1") && report.contains("map") && report.contains("hd_map"));
  ASSERT_EQ(run("eval --ckpt " + path("run1/last.ckpt") + " --data " + path("ds") + " --out " +
                path("report2.json") + " --analysis " + path("align.csv")),
            0);
  EXPECT_EQ(slurp(dir_ / "align.csv").substr(0, 32), "bin_low,bin_high,count,mean_map\n");
}

TEST_F(Cli, ConfigErrorsExitTwo) {
  json cfg = json::parse(slurp(dir_ / "cfg.json"));
  cfg.at("model").erase("hidden");
  std::ofstream(dir_ / "bad.json") << cfg.dump();
  EXPECT_EQ(run("train --data " + path("ds") + " --config " + path("bad.json") + " --out " +
                path("bad_run")),
            2);
  // The synthetic preset expects 64-dim features; the dataset has 8.
  EXPECT_EQ(run("train --data " + path("ds") + " --epochs 1 --out " + path("mismatch")), 2);
  EXPECT_EQ(run("ablate --data " + path("ds") + " --rows a,z --out " + path("ab_bad")), 2);
  EXPECT_EQ(run("frobnicate"), 2);
}

TEST_F(Cli, AblateWritesTable) {
  ASSERT_EQ(run("ablate --data " + path("ds") + " --config " + path("cfg.json") +
                " --rows a,g --seeds 1 --epochs 1 --out " + path("ab")),
            0);
  const std::string table = slurp(dir_ / "ab" / "table.md");
  int rows = 0;
  std::istringstream lines(table);
  for (std::string line; std::getline(lines, line);) {
    rows += line.rfind("| a", 0) == 0 || line.rfind("| g", 0) == 0;
  }
  EXPECT_EQ(rows, 2);
  const json runs = json::parse(slurp(dir_ / "ab" / "runs.json"));
  EXPECT_EQ(runs.at("runs").size(), 2u);
}
