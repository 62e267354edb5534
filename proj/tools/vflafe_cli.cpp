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

// vflafe_cli: train | ablate | attack | timing.
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.

#include <chrono>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "vflafe/experiment.h"

namespace {

namespace fs = std::filesystem;
using vflafe::ConfigError;
using vflafe::ExperimentConfig;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  std::optional<bool> rescale;
  std::optional<bool> dist_adjust;
  std::vector<std::string> overrides;
};

void AddCommonFlags(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "run seed (overrides the config)");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_flag("--force", f.force, "overwrite an existing output directory");
  cmd->add_option("--toggle-rescale", f.rescale, "adaptive rescaling on/off");
  cmd->add_option("--toggle-distadj", f.dist_adjust, "distance adjustment on/off");
  cmd->add_option("--set", f.overrides, "extra key=value override (repeatable)");
}

ExperimentConfig Resolve(const CommonFlags& f) {
  ExperimentConfig c = f.config.empty() ? ExperimentConfig{} : vflafe::LoadConfig(f.config);
  for (const std::string& kv : f.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    vflafe::SetConfigValue(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (f.seed) c.seed = *f.seed;
  if (f.rescale) c.adaptive.rescale = *f.rescale;
  if (f.dist_adjust) c.adaptive.dist_adjust = *f.dist_adjust;
  if (!f.out.empty()) c.out = f.out;
  vflafe::ValidateConfig(c);
  return c;
}

void Write(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

int CmdTrain(const CommonFlags& flags) {
  ExperimentConfig c = Resolve(flags);
  const fs::path dir = vflafe::ResolveOutputDirectory(c, "train");
  c.out = dir.string();
  vflafe::PrepareRunDirectory(dir, flags.force);
  const vflafe::VerticalSplit data = vflafe::LoadSplit(c);
  const vflafe::TrainOutcome r = vflafe::TrainIntoDirectory(c, data, dir);
  if (!r.history.epochs.empty()) {
    const vflafe::EpochRecord& last = r.history.epochs.back();
    std::cout << "train: " << r.history.epochs.size() << " epochs, test accuracy "
              << last.test_accuracy << ", sigma " << r.federation.pipeline.privacy.sigma
              << ", run directory " << dir.string() << "\n";
  }
  return 0;
}

int CmdAblate(const CommonFlags& flags) {
  ExperimentConfig c = Resolve(flags);
  const fs::path dir = vflafe::ResolveOutputDirectory(c, "ablate");
  c.out = dir.string();
  vflafe::PrepareRunDirectory(dir, flags.force);
  const auto start = std::chrono::steady_clock::now();
  Write(dir / "config.resolved", vflafe::SerializeConfig(c));
  const std::vector<vflafe::AblationRow> rows = vflafe::RunAblation(c);
  Write(dir / "ablation.csv", vflafe::AblationCsv(rows));
  Write(dir / "ablation_runs.csv", vflafe::AblationRunsCsv(rows));
  nlohmann::json summary;
  summary["command"] = "ablate";
  summary["seeds"] = c.ablate_seeds;
  for (const vflafe::AblationRow& r : rows)
    summary["variants"][r.variant.name] = {{"mean_test_accuracy", r.mean()},
                                           {"std_test_accuracy", r.stddev()},
                                           {"median_test_accuracy", r.median()}};
  summary["privacy"] =
      vflafe::internal::PrivacyJson(vflafe::MakeFederationConfig(c, c.data.classes), 0);
  summary["runtime_seconds"] = vflafe::internal::Seconds(start);
  Write(dir / "summary.json", summary.dump(2) + "\n");
  std::cout << vflafe::AblationCsv(rows);
  return 0;
}

int CmdAttack(const CommonFlags& flags, const std::string& victims_dir) {
  ExperimentConfig c = Resolve(flags);
  const fs::path dir = vflafe::ResolveOutputDirectory(c, "attack");
  c.out = dir.string();
  vflafe::PrepareRunDirectory(dir, flags.force);
  const auto start = std::chrono::steady_clock::now();
  Write(dir / "config.resolved", vflafe::SerializeConfig(c));
  const vflafe::AttackData data = vflafe::LoadAttackData(c);
  const fs::path victims = victims_dir.empty() ? dir / "victims" : fs::path(victims_dir);
  std::vector<vflafe::VictimAttackResult> results;
  for (const vflafe::VictimSpec& v : vflafe::Victims()) {
    ExperimentConfig vc = vflafe::VictimConfig(c, v);
    const fs::path vdir = victims / v.tag;
    if (victims_dir.empty()) {
      vc.out = vdir.string();
      vflafe::PrepareRunDirectory(vdir, false);
      vflafe::TrainIntoDirectory(vc, data.victim, vdir);
    }
    const vflafe::VflModel model = vflafe::LoadRunModel(vdir);
    results.push_back(vflafe::AttackTrainedVictim(vc, v.tag, model, data));
  }
  Write(dir / "attack.csv", vflafe::AttackCsv(results));
  nlohmann::json summary;
  summary["command"] = "attack";
  summary["seed"] = c.seed;
  for (const vflafe::VictimAttackResult& r : results) {
    summary["reports"].push_back(vflafe::internal::ReportJson(r.inversion));
    summary["reports"].push_back(vflafe::internal::ReportJson(r.membership));
  }
  summary["runtime_seconds"] = vflafe::internal::Seconds(start);
  Write(dir / "summary.json", summary.dump(2) + "\n");
  std::cout << vflafe::AttackCsv(results);
  return 0;
}

int CmdTiming(const CommonFlags& flags) {
  ExperimentConfig c = Resolve(flags);
  const fs::path dir = vflafe::ResolveOutputDirectory(c, "timing");
  c.out = dir.string();
  vflafe::PrepareRunDirectory(dir, flags.force);
  Write(dir / "config.resolved", vflafe::SerializeConfig(c));
  const vflafe::StageTimes t = vflafe::RunTiming(c);
  Write(dir / "timing.csv", vflafe::TimingCsv(t));
  nlohmann::json summary;
  summary["command"] = "timing";
  summary["rounds"] = c.timing_rounds;
  summary["batch_size"] = c.training.batch_size;
  summary["embedding_dim"] = c.model.embedding_dim;
  summary["total_seconds"] = t.total();
  Write(dir / "summary.json", summary.dump(2) + "\n");
  std::cout << vflafe::TimingCsv(t);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Split-feature federated training with noised, rescaled embeddings"};
  app.require_subcommand(1);
  CommonFlags train_flags, ablate_flags, attack_flags, timing_flags;
  std::string victims_dir;
  CLI::App* train = app.add_subcommand("train", "train one federation and write a run directory");
  CLI::App* ablate = app.add_subcommand("ablate", "four-variant ablation grid over seeds");
  CLI::App* attack = app.add_subcommand("attack", "inversion and membership attacks on three victims");
  CLI::App* timing = app.add_subcommand("timing", "wall-time share of each pipeline stage");
  AddCommonFlags(train, train_flags);
  AddCommonFlags(ablate, ablate_flags);
  AddCommonFlags(attack, attack_flags);
  AddCommonFlags(timing, timing_flags);
  attack->add_option("--victims", victims_dir,
                     "directory with unprotected/, vanilla/ and vfl-afe/ run directories");
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  vflafe::SetWarningSink([](const std::string& m) { std::cerr << "warning: " << m << "\n"; });
  try {
    if (*train) return CmdTrain(train_flags);
    if (*ablate) return CmdAblate(ablate_flags);
    if (*attack) return CmdAttack(attack_flags, victims_dir);
    if (*timing) return CmdTiming(timing_flags);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
