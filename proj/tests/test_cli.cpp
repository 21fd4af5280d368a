#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "vqvae/checkpoint.h"
#include "vqvae/cli.h"
#include "vqvae/dataset.h"

namespace vqvae {
namespace {

namespace fs = std::filesystem;

constexpr char kTinyConfig[] =
    "hidden = 8\nres_blocks = 1\nembedding_dim = 4\nnum_codes = 8\n"
    "batch_size = 4\nsteps = 4\nseed = 5\n"
    "prior_layers = 2\nprior_hidden = 8\nprior_embed_dim = 4\n";

std::string ReadFile(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("vqvae_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::vector<uint8_t> bytes(8 * 28 * 28);
    for (size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<uint8_t>((i * 7 + i / 28 * 3) % 256);
    WriteIdx(dir_ / "data.idx", 8, 28, 28, bytes);
    WriteConfig("run.cfg", kTinyConfig);
  }
  void TearDown() override { fs::remove_all(dir_); }

  void WriteConfig(const std::string& name, const std::string& text) {
    std::ofstream(dir_ / name) << text;
  }
  std::string P(const std::string& name) const { return (dir_ / name).string(); }

  int Run(const std::vector<std::string>& args) {
    out_.str("");
    err_.str("");
    return RunCli(args, out_, err_);
  }

  int TrainVqVae(const std::string& out, const std::string& config = "run.cfg") {
    return Run({"train-vqvae", "--config", P(config), "--data", P("data.idx"), "--out", P(out)});
  }
  int TrainPrior(const std::string& vqvae_dir, const std::string& out) {
    return Run({"train-prior", "--vqvae", P(vqvae_dir + "/vqvae.ckpt"), "--config", P("run.cfg"),
                "--data", P("data.idx"), "--out", P(out)});
  }

  fs::path dir_;
  std::ostringstream out_, err_;
};

TEST_F(CliTest, MissingFlagIsAUsageError) {
  EXPECT_EQ(Run({"train-vqvae", "--data", P("data.idx"), "--out", P("r")}), kExitConfig);
  EXPECT_NE(err_.str().find("--config"), std::string::npos);
  EXPECT_EQ(Run({"no-such-command"}), kExitConfig);
  EXPECT_EQ(Run({}), kExitConfig);
}

TEST_F(CliTest, BinaryReportsUsageOnStderr) {
  const std::string cmd = std::string(VQVAE_CLI_PATH) + " eval > " + P("stdout.txt") + " 2> " + P("stderr.txt");
  const int status = std::system(cmd.c_str());
  ASSERT_NE(status, -1);
  EXPECT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), kExitConfig);
  EXPECT_NE(ReadFile(dir_ / "stderr.txt").find("--vqvae"), std::string::npos);
}

TEST_F(CliTest, ConfigAndDataErrorsHaveDistinctCodes) {
  WriteConfig("bad.cfg", "hidden = lots\n");
  EXPECT_EQ(TrainVqVae("r", "bad.cfg"), kExitConfig);
  WriteConfig("unknown.cfg", "colour = blue\n");
  EXPECT_EQ(TrainVqVae("r", "unknown.cfg"), kExitConfig);
  EXPECT_NE(err_.str().find("colour"), std::string::npos);

  std::ofstream(dir_ / "junk.idx") << "not an idx file";
  EXPECT_EQ(Run({"train-vqvae", "--config", P("run.cfg"), "--data", P("junk.idx"), "--out", P("r")}),
            kExitData);
  EXPECT_EQ(Run({"eval", "--vqvae", P("missing.ckpt"), "--data", P("data.idx")}), kExitData);
}

TEST_F(CliTest, DivergenceExitsWithNanCodeAndDiagnosticCheckpoint) {
  WriteConfig("hot.cfg", "hidden = 8\nres_blocks = 1\nembedding_dim = 4\nnum_codes = 8\n"
                         "batch_size = 4\nsteps = 50\nseed = 5\nlr = 1e30\n");
  EXPECT_EQ(TrainVqVae("hot", "hot.cfg"), kExitNan);
  EXPECT_TRUE(fs::exists(dir_ / "hot" / "nan_abort.ckpt"));
  EXPECT_NO_THROW(VqVaeRunFromCheckpoint(LoadCheckpoint(dir_ / "hot" / "nan_abort.ckpt")));
}

TEST_F(CliTest, TrainingWritesMetricsAndIsDeterministic) {
  ASSERT_EQ(TrainVqVae("a"), kExitOk) << err_.str();
  ASSERT_EQ(TrainVqVae("b"), kExitOk) << err_.str();
  EXPECT_EQ(ReadFile(dir_ / "a" / "vqvae.ckpt"), ReadFile(dir_ / "b" / "vqvae.ckpt"));

  std::istringstream lines(ReadFile(dir_ / "a" / "metrics.jsonl"));
  std::string line;
  int64_t count = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* key : {"step", "recon_nll", "codebook_loss", "commit_loss", "perplexity"}) {
      EXPECT_TRUE(j.contains(key)) << key;
    }
    EXPECT_EQ(j["step"].get<int64_t>(), ++count);
  }
  EXPECT_EQ(count, 4);
}

TEST_F(CliTest, ResumeMatchesUninterruptedRun) {
  ASSERT_EQ(TrainVqVae("full"), kExitOk) << err_.str();
  // Same model; the run is resumed from its step-2 checkpoint.
  WriteConfig("half.cfg", "hidden = 8\nres_blocks = 1\nembedding_dim = 4\nnum_codes = 8\n"
                          "batch_size = 4\nsteps = 4\nseed = 5\ncheckpoint_interval = 2\n");
  ASSERT_EQ(TrainVqVae("part", "half.cfg"), kExitOk) << err_.str();
  ASSERT_TRUE(fs::exists(dir_ / "part" / "vqvae-step2.ckpt"));

  fs::create_directories(dir_ / "resumed");
  {
    // The first two metric lines of the interrupted run.
    std::istringstream lines(ReadFile(dir_ / "part" / "metrics.jsonl"));
    std::ofstream head(dir_ / "resumed" / "metrics.jsonl");
    std::string line;
    for (int i = 0; i < 2 && std::getline(lines, line); ++i) head << line << "\n";
  }
  ASSERT_EQ(Run({"train-vqvae", "--config", P("run.cfg"), "--data", P("data.idx"), "--out",
                 P("resumed"), "--resume", P("part/vqvae-step2.ckpt")}),
            kExitOk)
      << err_.str();

  auto strip_wall = [](const std::string& text) {
    std::istringstream in(text);
    std::string line, out;
    while (std::getline(in, line)) {
      auto j = nlohmann::json::parse(line);
      j.erase("wall_ms");
      out += j.dump() + "\n";
    }
    return out;
  };
  EXPECT_EQ(strip_wall(ReadFile(dir_ / "resumed" / "metrics.jsonl")),
            strip_wall(ReadFile(dir_ / "full" / "metrics.jsonl")));
  EXPECT_EQ(ReadFile(dir_ / "resumed" / "vqvae.ckpt"), ReadFile(dir_ / "full" / "vqvae.ckpt"));
}

TEST_F(CliTest, ResumeRejectsADifferentModel) {
  ASSERT_EQ(TrainVqVae("a"), kExitOk);
  WriteConfig("wide.cfg", "hidden = 16\nres_blocks = 1\nembedding_dim = 4\nnum_codes = 8\nsteps = 6\n");
  EXPECT_EQ(Run({"train-vqvae", "--config", P("wide.cfg"), "--data", P("data.idx"), "--out", P("b"),
                 "--resume", P("a/vqvae.ckpt")}),
            kExitConfig);
}

TEST_F(CliTest, EndToEndCommands) {
  ASSERT_EQ(TrainVqVae("v"), kExitOk) << err_.str();
  ASSERT_EQ(TrainPrior("v", "p"), kExitOk) << err_.str();
  EXPECT_TRUE(fs::exists(dir_ / "p" / "prior.ckpt"));
  EXPECT_TRUE(fs::exists(dir_ / "p" / "prior_metrics.jsonl"));

  ASSERT_EQ(Run({"eval", "--vqvae", P("v/vqvae.ckpt"), "--prior", P("p/prior.ckpt"), "--data", P("data.idx")}),
            kExitOk);
  const auto report = nlohmann::json::parse(out_.str());
  for (const char* key : {"recon_mse", "bits_per_dim", "perplexity", "n_images"}) {
    EXPECT_TRUE(report.contains(key)) << key;
  }
  EXPECT_EQ(report["n_images"].get<int64_t>(), 8);

  ASSERT_EQ(Run({"codebook-stats", "--vqvae", P("v/vqvae.ckpt"), "--data", P("data.idx")}), kExitOk);
  const auto stats = nlohmann::json::parse(out_.str());
  EXPECT_EQ(stats["histogram"].size(), 8u);
  int64_t total = 0;
  for (const auto& c : stats["histogram"]) total += c.get<int64_t>();
  EXPECT_EQ(total, 8 * 49);

  ASSERT_EQ(Run({"reconstruct", "--vqvae", P("v/vqvae.ckpt"), "--in", P("data.idx"), "--out", P("rec")}),
            kExitOk);
  const Dataset pair = LoadPpm(dir_ / "rec" / "recon_0000.pgm");
  EXPECT_EQ(pair.images.shape, (Shape{1, 1, 28, 56}));
}

TEST_F(CliTest, PriorMustMatchTheVqVaeGrid) {
  ASSERT_EQ(TrainVqVae("v"), kExitOk);
  WriteConfig("run.cfg", std::string(kTinyConfig) + "prior_num_codes = 9\n");
  EXPECT_EQ(TrainPrior("v", "p"), kExitConfig);
}

TEST_F(CliTest, SamplingWithAFixedSeedIsByteIdentical) {
  ASSERT_EQ(TrainVqVae("v"), kExitOk);
  ASSERT_EQ(TrainPrior("v", "p"), kExitOk);
  auto sample = [&](const std::string& out, const std::string& seed) {
    return Run({"sample", "--vqvae", P("v/vqvae.ckpt"), "--prior", P("p/prior.ckpt"), "--n", "3",
                "--seed", seed, "--out", P(out)});
  };
  ASSERT_EQ(sample("s1", "9"), kExitOk) << err_.str();
  ASSERT_EQ(sample("s2", "9"), kExitOk);
  for (int i = 0; i < 3; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "sample_%04d.pgm", i);
    ASSERT_TRUE(fs::exists(dir_ / "s1" / name));
    EXPECT_EQ(ReadFile(dir_ / "s1" / name), ReadFile(dir_ / "s2" / name));
  }
  EXPECT_FALSE(fs::exists(dir_ / "s1" / "sample_0003.pgm"));
}

}  // namespace
}  // namespace vqvae
