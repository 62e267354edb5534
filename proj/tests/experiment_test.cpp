//
// Copyright 2026 The vflafe Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

#include "vflafe/experiment.h"

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace vflafe {
namespace {

namespace fs = std::filesystem;

ExperimentConfig Parse(const std::string& text) {
  std::istringstream in(text);
  return ParseConfig(in);
}

std::string Slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> Lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string line;
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

class ScratchDir {
 public:
  explicit ScratchDir(const std::string& name)
      : path_(fs::temp_directory_path() / ("vflafe_" + name)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~ScratchDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

// ---------------------------------------------------------------------------
// Config parsing

TEST(ConfigTest, ParsesDottedKeysCommentsAndLists) {
  const ExperimentConfig c = Parse(
      "# comment\n"
      "seed = 7\n"
      "train.learning_rate = 0.25   # trailing\n"
      "model.extractor_hidden = 64, 32\n"
      "adaptive.rescale = off\n"
      "adaptive.sensitivity = diameter\n"
      "privacy.mode = none\n"
      "data.categorical = a,b\n"
      "\n");
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.training.learning_rate, 0.25);
  EXPECT_EQ(c.model.extractor_hidden, (std::vector<std::size_t>{64, 32}));
  EXPECT_FALSE(c.adaptive.rescale);
  EXPECT_EQ(c.adaptive.sensitivity, SensitivityMode::kExactDiameter);
  EXPECT_EQ(c.mode, ProtectionMode::kUnprotected);
  EXPECT_EQ(c.data.categorical, (std::vector<std::string>{"a", "b"}));
}

TEST(ConfigTest, UnknownKeyIsNamed) {
  try {
    Parse("train.epochs = 3\ntrain.epoch = 4\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("'train.epoch'"), std::string::npos) << e.what();
  }
}

TEST(ConfigTest, MalformedValuesAreRejected) {
  EXPECT_THROW(Parse("train.epochs = three\n"), ConfigError);
  EXPECT_THROW(Parse("train.epochs = -1\n"), ConfigError);
  EXPECT_THROW(Parse("train.learning_rate = 0.1x\n"), ConfigError);
  EXPECT_THROW(Parse("adaptive.rescale = maybe\n"), ConfigError);
  EXPECT_THROW(Parse("privacy.mode = strong\n"), ConfigError);
  EXPECT_THROW(Parse("just a line\n"), ConfigError);
}

TEST(ConfigTest, SerializationRoundTrips) {
  ExperimentConfig c = Parse(
      "seed = 11\ntrain.learning_rate = 0.123456789012345\nmodel.head_hidden = 8\n"
      "privacy.epsilon = 0.3\nadaptive.distribution_loss = histogram\nattack.mi_features = "
      "embedding\ndata.source = csv\ndata.path = x.csv\n");
  const std::string text = SerializeConfig(c);
  const ExperimentConfig back = Parse(text);
  EXPECT_EQ(SerializeConfig(back), text);
  EXPECT_EQ(back.training.learning_rate, 0.123456789012345);
  EXPECT_EQ(back.adaptive.distribution_loss, DistributionLossKind::kHistogramKl);
  EXPECT_EQ(back.attack.membership.features, MembershipFeatures::kEmbedding);
  // Every line is key = value, sorted by key.
  std::string previous;
  for (const std::string& line : Lines(text)) {
    const auto eq = line.find(" = ");
    ASSERT_NE(eq, std::string::npos) << line;
    EXPECT_LT(previous, line.substr(0, eq));
    previous = line.substr(0, eq);
  }
}

TEST(ConfigTest, ValidationRejectsBadCombinations) {
  ExperimentConfig c;
  c.training.batch_size = 1;
  EXPECT_THROW(ValidateConfig(c), ConfigError);
  c = ExperimentConfig{};
  c.data.source = DataSource::kCsv;
  EXPECT_THROW(ValidateConfig(c), ConfigError);
  c = ExperimentConfig{};
  c.attack.shadows = 1;
  EXPECT_THROW(ValidateConfig(c), ConfigError);
  c = ExperimentConfig{};
  c.epsilon = 2.0;
  EXPECT_THROW(MakePrivacy(c), ConfigError);
  c.allow_large_epsilon = true;
  EXPECT_NO_THROW(MakePrivacy(c));
}

TEST(ConfigTest, ClassesDefaultToTheDataset) {
  ExperimentConfig c;
  EXPECT_EQ(MakeFederationConfig(c, 7).pipeline.adaptive.classes, 7u);
  c.adaptive.classes = 3;
  EXPECT_EQ(MakeFederationConfig(c, 7).pipeline.adaptive.classes, 3u);
}

// ---------------------------------------------------------------------------
// Data sources

TEST(ExperimentDataTest, CsvSource) {
  ScratchDir dir("csv_source");
  {
    std::ofstream out(dir.path() / "t.csv");
    out << "a,b,color,label\n";
    for (int i = 0; i < 40; ++i)
      out << i << "," << (i * 7) % 11 << "," << (i % 3 == 0 ? "red" : "blue") << ","
          << (i % 2 ? "yes" : "no") << "\n";
  }
  ExperimentConfig c = Parse("data.source = csv\ndata.categorical = color\ndata.test_fraction = 0.25\n");
  c.data.path = (dir.path() / "t.csv").string();
  const VerticalSplit s = LoadSplit(c);
  EXPECT_EQ(s.train.rows(), 30u);
  EXPECT_EQ(s.test.rows(), 10u);
  EXPECT_EQ(s.train.num_classes, 2u);
  EXPECT_EQ(s.train.party_features[0].cols() + s.train.party_features[1].cols(), 4u);
  c.data.label_column = "target";
  EXPECT_THROW(LoadSplit(c), ConfigError);
}

TEST(ExperimentDataTest, IdxSourceWithImageHalves) {
  ScratchDir dir("idx_source");
  const std::size_t n = 10;
  auto u32 = [](std::ofstream& o, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) o.put(static_cast<char>((v >> s) & 0xff));
  };
  {
    std::ofstream img(dir.path() / "img", std::ios::binary);
    u32(img, kIdxImageMagic);
    u32(img, n);
    u32(img, 4);
    u32(img, 4);
    for (std::size_t i = 0; i < n * 16; ++i) img.put(static_cast<char>(i % 256));
    std::ofstream lab(dir.path() / "lab", std::ios::binary);
    u32(lab, kIdxLabelMagic);
    u32(lab, n);
    for (std::size_t i = 0; i < n; ++i) lab.put(static_cast<char>(i % 3));
  }
  ExperimentConfig c = Parse("data.source = idx\ndata.partition = image_halves\ndata.test_fraction = 0.2\n");
  c.data.path = (dir.path() / "img").string();
  c.data.labels_path = (dir.path() / "lab").string();
  const VerticalSplit s = LoadSplit(c);
  EXPECT_EQ(s.train.rows(), 8u);
  EXPECT_EQ(s.test.rows(), 2u);
  EXPECT_EQ(s.train.party_features[0].cols(), 8u);
  EXPECT_EQ(s.train.party_features[1].cols(), 8u);
  c.data.parties = 3;
  EXPECT_THROW(LoadSplit(c), ConfigError);
}

// ---------------------------------------------------------------------------
// Run directories

TEST(RunDirectoryTest, RefusesToOverwriteUnlessForced) {
  ScratchDir dir("overwrite");
  const fs::path run = dir.path() / "run";
  PrepareRunDirectory(run, false);
  std::ofstream(run / "x") << "1";
  EXPECT_THROW(PrepareRunDirectory(run, false), ConfigError);
  PrepareRunDirectory(run, true);
  EXPECT_TRUE(fs::is_empty(run));
}

TEST(RunDirectoryTest, OutputRootFromEnvironment) {
  ExperimentConfig c;
  c.seed = 4;
  ::setenv("VFLAFE_OUT_ROOT", "/tmp/vflafe_root", 1);
  EXPECT_EQ(ResolveOutputDirectory(c, "train"), fs::path("/tmp/vflafe_root/train-seed4"));
  ::unsetenv("VFLAFE_OUT_ROOT");
  EXPECT_EQ(ResolveOutputDirectory(c, "train"), fs::path("runs/train-seed4"));
  c.out = "elsewhere";
  EXPECT_EQ(ResolveOutputDirectory(c, "train"), fs::path("elsewhere"));
}

ExperimentConfig Small() {
  return Parse(
      "data.per_class = 60\ndata.dim = 8\ntrain.epochs = 2\ntrain.batch_size = 16\n"
      "privacy.clip = 4\nmodel.embedding_dim = 6\nmodel.extractor_hidden = 8\n");
}

TEST(RunDirectoryTest, TrainWritesEveryArtifact) {
  ScratchDir dir("train_artifacts");
  const ExperimentConfig c = Small();
  const TrainOutcome r = TrainIntoDirectory(c, LoadSplit(c), dir.path());
  for (const char* f : {"config.resolved", "epochs.csv", "summary.json", "events.jsonl",
                        "checkpoints/head.ckpt", "checkpoints/extractor_0.ckpt",
                        "checkpoints/extractor_1.ckpt"})
    EXPECT_TRUE(fs::exists(dir.path() / f)) << f;
  EXPECT_EQ(Slurp(dir.path() / "config.resolved"), SerializeConfig(c));
  const std::vector<std::string> csv = Lines(Slurp(dir.path() / "epochs.csv"));
  ASSERT_EQ(csv.size(), 3u);
  EXPECT_EQ(csv[0], "epoch,train_acc,test_acc,loss,mean_delta,purity,kl_loss,cl_loss");
  EXPECT_EQ(Lines(Slurp(dir.path() / "events.jsonl")).size(), r.history.rounds);
  const nlohmann::json s = nlohmann::json::parse(Slurp(dir.path() / "summary.json"));
  EXPECT_EQ(s["privacy"]["sigma"].get<double>(), r.federation.pipeline.privacy.sigma);
  EXPECT_EQ(s["privacy"]["delta_prime_per_round"].get<double>(),
            r.federation.pipeline.privacy.delta_prime);
  EXPECT_EQ(s["privacy"]["rounds"].get<std::uint64_t>(), r.history.rounds);
  EXPECT_TRUE(s["final"].contains("test_accuracy"));

  const VflModel loaded = LoadRunModel(dir.path());
  EXPECT_EQ(SerializeNet(loaded.head), SerializeNet(r.model.head));
  EXPECT_EQ(loaded.extractors.size(), 2u);
  EXPECT_EQ(loaded.pipeline.privacy.sigma, r.model.pipeline.privacy.sigma);
}

TEST(RunDirectoryTest, MissingCheckpointIsAConfigError) {
  ScratchDir dir("missing_ckpt");
  EXPECT_THROW(LoadRunModel(dir.path()), ConfigError);
}

// ---------------------------------------------------------------------------
// Ablation, attacks and timing

TEST(AblationTest, FourVariantsAndSingleSeedStdIsZero) {
  ExperimentConfig c = Small();
  c.ablate_seeds = 1;
  const std::vector<AblationRow> rows = RunAblation(c);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].variant.name, "vanilla");
  EXPECT_EQ(rows[3].variant.name, "VFL-AFE");
  for (const AblationRow& r : rows) EXPECT_EQ(r.stddev(), 0.0);
  const std::vector<std::string> csv = Lines(AblationCsv(rows));
  ASSERT_EQ(csv.size(), 5u);
  EXPECT_NE(csv[1].find(",0.000000,"), std::string::npos) << csv[1];
}

TEST(AblationTest, SeedsAdvanceFromTheRunSeed) {
  ExperimentConfig c = Small();
  c.seed = 5;
  c.ablate_seeds = 3;
  const std::vector<AblationRow> rows = RunAblation(c);
  EXPECT_EQ(rows[2].seeds, (std::vector<std::uint64_t>{5, 6, 7}));
  EXPECT_EQ(Lines(AblationRunsCsv(rows)).size(), 1u + 4u * 3u);
}

TEST(AttackSuiteTest, ThreeByTwoGrid) {
  ExperimentConfig c = Small();
  c.attack.per_side = 20;
  c.attack.inversion_rows = 40;
  c.attack.decoder.epochs = 5;
  c.attack.membership.epochs = 5;
  const std::vector<VictimAttackResult> r = RunAttackSuite(c);
  ASSERT_EQ(r.size(), 3u);
  EXPECT_EQ(r[0].victim, "unprotected");
  EXPECT_EQ(r[1].victim, "vanilla");
  EXPECT_EQ(r[2].victim, "vfl-afe");
  const std::vector<std::string> csv = Lines(AttackCsv(r));
  ASSERT_EQ(csv.size(), 4u);
  EXPECT_EQ(csv[0], "victim,inversion_mse,membership_accuracy");
  for (std::size_t i = 1; i < 4; ++i)
    EXPECT_EQ(std::count(csv[i].begin(), csv[i].end(), ','), 2) << csv[i];
}

TEST(TimingTest, SharesSumToOneHundred) {
  ExperimentConfig c = Small();
  c.timing_rounds = 5;
  const StageTimes t = RunTiming(c);
  double sum = 0.0;
  for (std::size_t s = 0; s < 4; ++s) sum += t.share(static_cast<Stage>(s));
  EXPECT_NEAR(sum, 100.0, 0.1);
  EXPECT_GT(t.seconds[static_cast<std::size_t>(Stage::kRescale)], 0.0);
}

TEST(TimingTest, DisabledStagesHaveZeroShare) {
  ExperimentConfig c = Small();
  c.timing_rounds = 5;
  c.mode = ProtectionMode::kUnprotected;
  c.adaptive.rescale = false;
  c.adaptive.dist_adjust = false;
  const StageTimes t = RunTiming(c);
  EXPECT_EQ(t.share(Stage::kNoise), 0.0);
  EXPECT_EQ(t.share(Stage::kRescale), 0.0);
  EXPECT_EQ(t.share(Stage::kDistAdjust), 0.0);
  EXPECT_NEAR(t.share(Stage::kBaseline), 100.0, 1e-9);
}

// ---------------------------------------------------------------------------
// Command-line tool

struct CliResult {
  int exit_code = -1;
  std::string output;
};

CliResult RunCli(const std::string& args, const fs::path& cwd) {
  const fs::path log = cwd / "cli_output.txt";
  const std::string cmd = "cd '" + cwd.string() + "' && '" + std::string(VFLAFE_CLI_PATH) + "' " +
                          args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.output = Slurp(log);
  return r;
}

class CliTest : public ::testing::Test {
 protected:
  CliTest() : dir_("cli") {
    std::ofstream(dir_.path() / "small.conf") << SerializeConfig(Small());
  }
  const fs::path& dir() const { return dir_.path(); }

 private:
  ScratchDir dir_;
};

TEST_F(CliTest, TrainTwiceGivesIdenticalCsv) {
  ASSERT_EQ(RunCli("train --config small.conf --seed 1 --out a", dir()).exit_code, 0);
  ASSERT_EQ(RunCli("train --config small.conf --seed 1 --out b", dir()).exit_code, 0);
  EXPECT_EQ(Slurp(dir() / "a/epochs.csv"), Slurp(dir() / "b/epochs.csv"));
  EXPECT_EQ(Slurp(dir() / "a/events.jsonl"), Slurp(dir() / "b/events.jsonl"));
  ASSERT_EQ(RunCli("train --config small.conf --seed 2 --out c", dir()).exit_code, 0);
  EXPECT_NE(Slurp(dir() / "a/epochs.csv"), Slurp(dir() / "c/epochs.csv"));
}

TEST_F(CliTest, ExitCodes) {
  std::ofstream(dir() / "bad.conf") << "train.epochs = 2\nmystery.knob = 1\n";
  const CliResult unknown = RunCli("train --config bad.conf --out x", dir());
  EXPECT_EQ(unknown.exit_code, 2);
  EXPECT_NE(unknown.output.find("mystery.knob"), std::string::npos) << unknown.output;
  EXPECT_EQ(RunCli("train --config missing.conf", dir()).exit_code, 2);
  EXPECT_EQ(RunCli("frobnicate", dir()).exit_code, 2);
  EXPECT_EQ(RunCli("", dir()).exit_code, 2);
  EXPECT_EQ(RunCli("train --config small.conf --seed abc", dir()).exit_code, 2);
  EXPECT_EQ(RunCli("--help", dir()).exit_code, 0);
}

TEST_F(CliTest, RefusesToOverwriteWithoutForce) {
  ASSERT_EQ(RunCli("train --config small.conf --out run", dir()).exit_code, 0);
  const CliResult again = RunCli("train --config small.conf --out run", dir());
  EXPECT_EQ(again.exit_code, 2);
  EXPECT_NE(again.output.find("--force"), std::string::npos);
  EXPECT_EQ(RunCli("train --config small.conf --out run --force", dir()).exit_code, 0);
}

TEST_F(CliTest, TogglesReachTheSummary) {
  ASSERT_EQ(RunCli("train --config small.conf --out off --toggle-rescale false --toggle-distadj off",
                   dir())
                .exit_code,
            0);
  const nlohmann::json s = nlohmann::json::parse(Slurp(dir() / "off/summary.json"));
  EXPECT_FALSE(s["toggles"]["rescale"].get<bool>());
  EXPECT_FALSE(s["toggles"]["dist_adjust"].get<bool>());
  EXPECT_NE(Slurp(dir() / "off/config.resolved").find("adaptive.rescale = false"),
            std::string::npos);
}

TEST_F(CliTest, OutputRootEnvironmentVariable) {
  const std::string root = (dir() / "root").string();
  ASSERT_EQ(RunCli("train --config small.conf --seed 3", dir()).exit_code, 0);
  EXPECT_TRUE(fs::exists(dir() / "runs/train-seed3/epochs.csv"));
  ::setenv("VFLAFE_OUT_ROOT", root.c_str(), 1);
  const int code = RunCli("train --config small.conf --seed 3", dir()).exit_code;
  ::unsetenv("VFLAFE_OUT_ROOT");
  ASSERT_EQ(code, 0);
  EXPECT_TRUE(fs::exists(dir() / "root/train-seed3/epochs.csv"));
}

TEST_F(CliTest, AblateAttackAndTiming) {
  ASSERT_EQ(RunCli("ablate --config small.conf --out ab --set ablate.seeds=1", dir()).exit_code, 0);
  EXPECT_EQ(Lines(Slurp(dir() / "ab/ablation.csv")).size(), 5u);

  const std::string attack_flags =
      "--set attack.per_side=20 --set attack.inversion_rows=40 --set attack.decoder_epochs=5 "
      "--set attack.mi_epochs=5";
  ASSERT_EQ(RunCli("attack --config small.conf --out at " + attack_flags, dir()).exit_code, 0);
  EXPECT_EQ(Lines(Slurp(dir() / "at/attack.csv")).size(), 4u);
  const nlohmann::json s = nlohmann::json::parse(Slurp(dir() / "at/summary.json"));
  EXPECT_EQ(s["reports"].size(), 6u);

  // Reusing the trained victims reproduces the grid.
  ASSERT_EQ(
      RunCli("attack --config small.conf --out at2 --victims at/victims " + attack_flags, dir())
          .exit_code,
      0);
  EXPECT_EQ(Slurp(dir() / "at/attack.csv"), Slurp(dir() / "at2/attack.csv"));

  fs::remove(dir() / "at/victims/vanilla/checkpoints/extractor_0.ckpt");
  EXPECT_EQ(RunCli("attack --config small.conf --out at3 --victims at/victims " + attack_flags,
                   dir())
                .exit_code,
            2);

  {
    std::fstream f(dir() / "at/victims/vfl-afe/checkpoints/head.ckpt",
                   std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(30);
    f.put('\x7f');
  }
  fs::create_directories(dir() / "bad");
  fs::copy(dir() / "at/victims/vfl-afe", dir() / "bad/unprotected", fs::copy_options::recursive);
  const CliResult corrupt =
      RunCli("attack --config small.conf --out at4 --victims bad " + attack_flags, dir());
  EXPECT_EQ(corrupt.exit_code, 1);
  EXPECT_NE(corrupt.output.find("checksum"), std::string::npos) << corrupt.output;

  ASSERT_EQ(RunCli("timing --config small.conf --out tm --set timing.rounds=5", dir()).exit_code, 0);
  const std::vector<std::string> timing = Lines(Slurp(dir() / "tm/timing.csv"));
  ASSERT_EQ(timing.size(), 5u);
  double sum = 0.0;
  for (std::size_t i = 1; i < timing.size(); ++i)
    sum += std::stod(timing[i].substr(timing[i].rfind(',') + 1));
  EXPECT_NEAR(sum, 100.0, 0.1);
}

}  // namespace
}  // namespace vflafe
