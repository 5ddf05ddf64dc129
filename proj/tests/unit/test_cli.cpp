#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "mvpcbm/cli.hpp"

namespace {

using namespace mvpcbm;
namespace fs = std::filesystem;
using nlohmann::json;

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string read_all(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("mvpcbm_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  std::string synth(const std::string& name, std::vector<std::string> extra = {}) {
    std::vector<std::string> args{"synth", "--out", path(name), "--set", "n_samples=40", "--set", "embed_dim=8"};
    args.insert(args.end(), extra.begin(), extra.end());
    const auto r = run(args);
    EXPECT_EQ(r.code, 0) << r.err;
    return path(name);
  }

  fs::path dir_;
};

TEST_F(Cli, SynthIsDeterministic) {
  const auto a = synth("a.mvpb", {"--seed", "7"});
  const auto b = synth("b.mvpb", {"--seed", "7"});
  EXPECT_EQ(read_all(a), read_all(b));
}

TEST_F(Cli, SynthMoreAttributesThanLayers) {
  const auto r = run({"synth", "--out", path("x.mvpb"), "--set", "n_layers=2", "--set", "n_attributes=4",
                      "--set", "n_concepts=2", "--set", "planted_layer=[0,1,1,0]"});
  EXPECT_EQ(r.code, 0) << r.err;
}

TEST_F(Cli, SynthTooFewPatchesExitsTwo) {
  const auto r = run({"synth", "--out", path("x.mvpb"), "--set", "n_patches=2", "--set", "n_attributes=3"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("TooFewPatches"), std::string::npos) << r.err;
}

TEST_F(Cli, UnknownKeyExitsTwo) {
  EXPECT_EQ(run({"synth", "--out", path("x.mvpb"), "--set", "n_sample=4"}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
}

TEST_F(Cli, ConfigFileSectionsAndOverrides) {
  {
    std::ofstream f(path("cfg.json"));
    f << R"({"synth": {"n_samples": 10, "embed_dim": 4}, "train": {"epochs": 1}})";
  }
  auto r = run({"synth", "--out", path("x.mvpb"), "--config", path("cfg.json"), "--set", "n_samples=12"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(r.out)["n_samples"], 12);
  r = run({"train", "--bundle", path("x.mvpb"), "--config", path("cfg.json"), "--checkpoint", path("c.json"),
           "--report", path("r.jsonl")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(r.out)["epochs"], 1);
}

TEST_F(Cli, TrainEvalExplainExport) {
  const auto bundle = synth("b.mvpb");
  auto r = run({"train", "--bundle", bundle, "--set", "epochs=3", "--checkpoint", path("c.json"), "--report",
                path("r.jsonl"), "--threads", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream report(path("r.jsonl"));
  std::string line;
  std::size_t lines = 0;
  while (std::getline(report, line)) {
    EXPECT_EQ(json::parse(line)["mode"], "full");
    ++lines;
  }
  EXPECT_EQ(lines, 3u);

  r = run({"eval", "--bundle", bundle, "--checkpoint", path("c.json")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto metrics = json::parse(r.out);
  EXPECT_TRUE(metrics.contains("acc") && metrics.contains("bmac") && metrics.contains("per_class_recall"));

  r = run({"explain", "--bundle", bundle, "--checkpoint", path("c.json"), "--sample", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(r.out)["top_concepts"].size(), 5u);

  r = run({"explain", "--bundle", bundle, "--checkpoint", path("c.json"), "--sample", "40"});
  EXPECT_EQ(r.code, 2);

  r = run({"export-viz", "--bundle", bundle, "--checkpoint", path("c.json"), "--out-dir", path("viz")});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"preference_profile.csv", "activation_dense.csv", "activation_sparse.csv",
                        "explanations.jsonl"}) {
    EXPECT_TRUE(fs::exists(dir_ / "viz" / f)) << f;
  }
}

TEST_F(Cli, BaselineModeMarkedInReport) {
  const auto bundle = synth("b.mvpb");
  const auto r = run({"train", "--bundle", bundle, "--set", "epochs=1", "--mode", "baseline_last_layer",
                      "--checkpoint", path("c.json"), "--report", path("r.jsonl")});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream report(path("r.jsonl"));
  std::string line;
  std::getline(report, line);
  EXPECT_EQ(json::parse(line)["mode"], "baseline_last_layer");
}

TEST_F(Cli, FingerprintMismatchExitsTwo) {
  const auto a = synth("a.mvpb");
  const auto b = synth("b.mvpb", {"--set", "n_concepts=4"});
  ASSERT_EQ(run({"train", "--bundle", a, "--set", "epochs=1", "--checkpoint", path("c.json"), "--report",
                 path("r.jsonl")})
                .code,
            0);
  EXPECT_EQ(run({"eval", "--bundle", b, "--checkpoint", path("c.json")}).code, 2);
}

TEST_F(Cli, NonFiniteLossExitsThree) {
  const auto bundle = synth("b.mvpb");
  const auto r = run({"train", "--bundle", bundle, "--set", "epochs=20", "--set", "learning_rate=1e300",
                      "--checkpoint", path("c.json"), "--report", path("r.jsonl")});
  EXPECT_EQ(r.code, 3) << r.err;
}

TEST_F(Cli, GradcheckPassesAndNegativeControlFails) {
  auto r = run({"gradcheck"});
  ASSERT_EQ(r.code, 0) << r.out;
  const auto report = json::parse(r.out);
  EXPECT_TRUE(report["passed"]);
  EXPECT_EQ(report["parameters"].size(), 9u);
  for (const auto& e : report["parameters"]) EXPECT_TRUE(e.contains("max_error"));
  r = run({"gradcheck", "--inject-fault"});
  EXPECT_EQ(r.code, 1);
}

TEST_F(Cli, ThreadsFallBackToEnvironment) {
  ::setenv("MVPCBM_THREADS", "3", 1);
  EXPECT_EQ(cli::resolve_thread_flag(std::nullopt), 3u);
  EXPECT_EQ(cli::resolve_thread_flag(5), 5u);
  ::unsetenv("MVPCBM_THREADS");
  EXPECT_EQ(cli::resolve_thread_flag(std::nullopt), 0u);
}

TEST_F(Cli, OverrideParsing) {
  EXPECT_EQ(cli::parse_override("lambda2=0").second, 0);
  EXPECT_EQ(cli::parse_override("mode=baseline_last_layer").second, "baseline_last_layer");
  EXPECT_EQ(cli::parse_override("planted_layer=[1,2]").second, json::array({1, 2}));
}

}  // namespace
