#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string first_line(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  return line;
}

class Cli : public ::testing::Test {
 protected:
  static fs::path dir;

  // Runs the CLI with stdout/stderr captured into files; returns the exit code.
  static int run(const std::string& args, std::string* out = nullptr) {
    const auto so = dir / "stdout.txt", se = dir / "stderr.txt";
    const std::string cmd = std::string(DYNEVAL_CLI) + " " + args + " > " + so.string() +
                            " 2> " + se.string();
    const int status = std::system(cmd.c_str());
    if (out) *out = read_file(so) + read_file(se);
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  static std::string p(const std::string& name) { return (dir / name).string(); }

  static void TearDownTestSuite() { fs::remove_all(dir); }

  static void SetUpTestSuite() {
    dir = fs::path(::testing::TempDir()) / ("dyneval_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    ASSERT_EQ(run("gen-corpus --language english --chars 40000 --seed 3 --out " + p("a.txt")), 0);
    ASSERT_EQ(run("train --corpus " + p("a.txt") +
                  " --vocab char --embed 8 --hidden 16 --batch 4 --bptt 20 --lr 5 --clip 1"
                  " --out " + p("m.ck")),
              0);
  }
};

fs::path Cli::dir;

}  // namespace

TEST_F(Cli, GenCorpusIsDeterministicAndSized) {
  ASSERT_EQ(run("gen-corpus --language romance --chars 5000 --seed 9 --out " + p("r1.txt")), 0);
  ASSERT_EQ(run("gen-corpus --language romance --chars 5000 --seed 9 --out " + p("r2.txt")), 0);
  EXPECT_EQ(read_file(p("r1.txt")).size(), 5000u);
  EXPECT_EQ(read_file(p("r1.txt")), read_file(p("r2.txt")));
}

TEST_F(Cli, TrainWritesLogAndManifest) {
  EXPECT_EQ(first_line(p("m.ck.train_log.csv")), "epoch,mean_loss_nats");
  const auto m = nlohmann::json::parse(read_file(p("m.ck.manifest.json")));
  EXPECT_EQ(m.at("command"), "train");
  for (const char* key : {"args", "flags", "seed", "checkpoint_hash", "corpus_hash", "timestamp"}) {
    EXPECT_TRUE(m.contains(key)) << key;
  }
}

TEST_F(Cli, EvalReportsCsvAndSummary) {
  std::string out;
  ASSERT_EQ(run("eval --checkpoint " + p("m.ck") + " --corpus " + p("a.txt") + " --out " +
                    p("static.csv"),
                &out),
            0)
      << out;
  EXPECT_EQ(first_line(p("static.csv")), "segment_index,start_token,loss_nats,mean_bits_per_token");
  EXPECT_NE(out.find("bits_per_token="), std::string::npos);
  EXPECT_NE(out.find("perplexity="), std::string::npos);
}

TEST_F(Cli, DynevalRequiresLearningRate) {
  std::string out;
  EXPECT_EQ(run("dyneval --checkpoint " + p("m.ck") + " --corpus " + p("a.txt") + " --out " +
                    p("x.csv"),
                &out),
            2);
  EXPECT_NE(out.find("--lr"), std::string::npos) << out;
  EXPECT_EQ(run("dyneval --checkpoint " + p("m.ck") + " --corpus " + p("a.txt") +
                " --rule rms-prior --lr 0.001 --out " + p("x.csv")),
            2);  // decay missing
}

TEST_F(Cli, ValidationFailuresExitTwo) {
  EXPECT_EQ(run("eval --checkpoint " + p("missing.ck") + " --corpus " + p("a.txt") + " --out " +
                p("x.csv")),
            2);
  EXPECT_EQ(run("eval --bogus-flag"), 2);
  EXPECT_EQ(run("dyneval --checkpoint " + p("m.ck") + " --corpus " + p("a.txt") +
                " --rule nonsense --lr 0.1 --decay 0 --out " + p("x.csv")),
            2);
  std::ofstream(p("garbage.ck")) << "not a checkpoint";
  EXPECT_EQ(run("eval --checkpoint " + p("garbage.ck") + " --corpus " + p("a.txt") + " --out " +
                p("x.csv")),
            2);
}

TEST_F(Cli, DivergenceExitsThree) {
  std::string out;
  EXPECT_EQ(run("dyneval --checkpoint " + p("m.ck") + " --corpus " + p("a.txt") +
                    " --rule sgd-prior --lr 1e30 --decay 0 --out " + p("div.csv"),
                &out),
            3)
      << out;
  EXPECT_NE(out.find("segment"), std::string::npos);
}

TEST_F(Cli, DynevalReplayIsByteIdentical) {
  ASSERT_EQ(run("dyneval --checkpoint " + p("m.ck") + " --corpus " + p("a.txt") +
                " --rule rms-rms-prior --lr 0.002 --decay 0.01 --out " + p("dyn.csv")),
            0);
  const auto first = read_file(p("dyn.csv"));
  EXPECT_EQ(first_line(p("dyn.csv")), "segment_index,start_token,loss_nats,mean_bits_per_token");
  const auto m = nlohmann::json::parse(read_file(p("dyn.csv.manifest.json")));
  EXPECT_EQ(m.at("command"), "dyneval");
  EXPECT_EQ(m.at("flags").at("--rule"), "rms-rms-prior");
  fs::remove(p("dyn.csv"));
  ASSERT_EQ(run("replay --manifest " + p("dyn.csv.manifest.json")), 0);
  EXPECT_EQ(read_file(p("dyn.csv")), first);
}

TEST_F(Cli, SparseAndCacheAndTune) {
  std::string out;
  ASSERT_EQ(run("dyneval --checkpoint " + p("m.ck") + " --corpus " + p("a.txt") +
                    " --sparse --adapt-units 4 --rule rms-rms-prior --lr 0.002 --decay 0.01"
                    " --ms-limit 5000 --out " + p("sparse.csv"),
                &out),
            0)
      << out;
  EXPECT_NE(out.find("adapted_parameters=16"), std::string::npos) << out;
  ASSERT_EQ(run("cache-eval --checkpoint " + p("m.ck") + " --corpus " + p("a.txt") +
                " --omega 1 --interp 0.1 --capacity 500 --out " + p("cache.csv")),
            0);
  EXPECT_EQ(first_line(p("cache.csv")), "segment_index,start_token,loss_nats,mean_bits_per_token");
  ASSERT_EQ(run("tune --checkpoint " + p("m.ck") + " --corpus " + p("a.txt") +
                    " --rule sgd-prior --lrs 0,0.1,1e30 --decays 0,0.01 --out " + p("tune.csv"),
                &out),
            0)
      << out;
  const auto table = read_file(p("tune.csv"));
  EXPECT_EQ(first_line(p("tune.csv")), "eta,lambda,epsilon,bptt,valid_loss_nats");
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 7);
  EXPECT_NE(table.find(",inf"), std::string::npos);
}

TEST_F(Cli, SampleAndTimescale) {
  ASSERT_EQ(run("gen-corpus --language romance --chars 3000 --seed 4 --out " + p("cond.txt")), 0);
  ASSERT_EQ(run("sample --checkpoint " + p("m.ck") + " --condition " + p("cond.txt") +
                " --length 300 --rule sgd-prior --lr 0.1 --decay 0.01 --out " + p("sample.txt")),
            0);
  EXPECT_EQ(read_file(p("sample.txt")).size(), 300u);
  std::string out;
  ASSERT_EQ(run("timescale --checkpoint " + p("m.ck") + " --corpus " + p("a.txt") +
                    " --seq-len 1000 --window 100 --rule sgd-prior --lr 0.1 --decay 0.01 --out " +
                    p("ts.csv"),
                &out),
            0)
      << out;
  const auto ts = read_file(p("ts.csv"));
  EXPECT_EQ(first_line(p("ts.csv")), "window_start,static_bpc,dynamic_bpc,advantage_bpc");
  EXPECT_EQ(std::count(ts.begin(), ts.end(), '\n'), 11);
  EXPECT_EQ(run("timescale --checkpoint " + p("m.ck") + " --corpus " + p("a.txt") +
                " --seq-len 1000 --window 300 --rule sgd-prior --lr 0.1 --decay 0.01 --out " +
                p("ts2.csv")),
            2);
}
