#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "json.hpp"
#include "sedkit/io/config.hpp"
#include "sedkit/io/hash.hpp"

#ifndef SEDKIT_CLI_PATH
#error "SEDKIT_CLI_PATH must point at the sedkit executable"
#endif

namespace sedkit {
namespace {

namespace fs = std::filesystem;

struct RunResult {
  int code = -1;
  std::string output;  // stdout and stderr interleaved
};

RunResult run(const std::string& args) {
  const std::string cmd = std::string(SEDKIT_CLI_PATH) + " " + args + " 2>&1";
  RunResult r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe)) r.output += buf.data();
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::map<std::string, std::string> tree_hashes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = file_sha256_hex(e.path());
  return out;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "sedkit_cli_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    ASSERT_EQ(run("gen-synthetic --out " + (dir_ / "world").string() + " --sentences-per-cluster 200").code, 0);
    ASSERT_EQ(run("pretrain --corpus " + (dir_ / "world" / "corpus.txt").string() +
                  " --count 300 --steps 5 --hidden 16 --ffn 32 --out " + (dir_ / "base.ckpt").string())
                  .code,
              0);
  }
  static fs::path dir_;
  static std::string path(const std::string& rel) { return (dir_ / rel).string(); }
};
fs::path Cli::dir_;

TEST_F(Cli, GenSyntheticIsByteIdentical) {
  ASSERT_EQ(run("gen-synthetic --seed 7 --sentences-per-cluster 200 --out " + path("again")).code, 0);
  EXPECT_EQ(tree_hashes(dir_ / "world"), tree_hashes(dir_ / "again"));
  ASSERT_EQ(run("gen-synthetic --seed 8 --sentences-per-cluster 200 --out " + path("other")).code, 0);
  EXPECT_NE(tree_hashes(dir_ / "world"), tree_hashes(dir_ / "other"));
}

TEST_F(Cli, EvaluateWritesReportWithoutTouchingInputs) {
  const auto before = tree_hashes(dir_ / "world");
  const auto base_hash = file_sha256_hex(path("base.ckpt"));
  const auto r = run("evaluate --model " + path("base.ckpt") + " --tasks " + path("world/sts/test") +
                     " --pool 2 --out " + path("report.csv"));
  ASSERT_EQ(r.code, 0) << r.output;
  std::ifstream in(path("report.csv"));
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "task,pearson_x100,spearman_x100");
  const auto meta = nlohmann::json::parse(std::ifstream(path("report.csv.meta.json")));
  EXPECT_EQ(meta["pooling_k"], 2);
  EXPECT_EQ(tree_hashes(dir_ / "world"), before);
  EXPECT_EQ(file_sha256_hex(path("base.ckpt")), base_hash);
}

TEST_F(Cli, TrainSedArchitectureMismatchExitsOneNamingBoth) {
  ASSERT_EQ(run("pretrain --corpus " + path("world/corpus.txt") + " --count 100 --steps 1 --hidden 8 --ffn 16 --out " +
                path("narrow.ckpt"))
                .code,
            0);
  const auto r = run("train-sed --teachers " + path("base.ckpt") + " --student-init " + path("narrow.ckpt") +
                     " --corpus " + path("world/corpus.txt") + " --count 50 --out " + path("x.ckpt"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("L=2 D=8"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("L=2 D=16"), std::string::npos) << r.output;
  EXPECT_FALSE(fs::exists(path("x.ckpt")));
}

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("no-such-command").code, 2);
  EXPECT_EQ(run("evaluate --tasks " + path("world/sts/test")).code, 2);
  EXPECT_EQ(run("evaluate --model a --tasks b --no-such-flag").code, 2);
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, DataErrorsExitOne) {
  EXPECT_EQ(run("evaluate --model " + path("missing.ckpt") + " --tasks " + path("world/sts/test")).code, 1);
  EXPECT_EQ(run("evaluate --model " + path("base.ckpt") + " --tasks " + path("nowhere")).code, 1);
  {
    std::ofstream bad(path("bad.cfg"));
    bad << "[ct]\nlearnin_rate = 3\n";
  }
  const auto r = run("--config " + path("bad.cfg") + " evaluate --model " + path("base.ckpt") + " --tasks " +
                     path("world/sts/test"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("learnin_rate"), std::string::npos) << r.output;
}

TEST_F(Cli, RunPipelineManifestEchoesConfig) {
  {
    std::ofstream cfg(path("run.cfg"));
    cfg << "[run]\nstages = pretrain, ct\nseed = 3\n[data]\ncorpus = " << path("world/corpus.txt")
        << "\nsts_dir = " << path("world/sts/test") << "\ncorpus_size = 200\n[arch]\nhidden = 16\nffn = 32\n"
        << "[pretrain]\nsteps = 3\n[ct]\nsteps = 3\n";
  }
  const auto r = run("run-pipeline --config " + path("run.cfg") + " --out-dir " + path("pipe"));
  ASSERT_EQ(r.code, 0) << r.output;
  const auto manifest = nlohmann::json::parse(std::ifstream(path("pipe/manifest.json")));
  EXPECT_EQ(manifest["status"], "complete");
  const auto echoed = RunConfig::parse(manifest["config"].get<std::string>());
  EXPECT_EQ(echoed.seed, 3u);
  EXPECT_EQ(echoed.arch.hidden, 16u);
  EXPECT_EQ(echoed.to_text(), manifest["config"].get<std::string>());
  EXPECT_EQ(manifest["outputs"]["member-0.ckpt"], file_sha256_hex(path("pipe/member-0.ckpt")));
}

}  // namespace
}  // namespace sedkit
