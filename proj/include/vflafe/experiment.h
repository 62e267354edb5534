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

// Config-driven experiment runner behind the command-line tool: training
// runs, the four-row ablation grid, the attack suite and stage timing.

#ifndef VFLAFE_EXPERIMENT_H_
#define VFLAFE_EXPERIMENT_H_

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "vflafe/adaptive.h"
#include "vflafe/attacks.h"
#include "vflafe/data.h"
#include "vflafe/dp_mechanism.h"
#include "vflafe/neural.h"
#include "vflafe/protocol.h"

namespace vflafe {

// Invalid configuration or usage; the command-line tool exits with 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DataSource { kSynthetic, kCsv, kIdx };
enum class PartitionKind { kEven, kImageHalves };

struct DataConfig {
  DataSource source = DataSource::kSynthetic;
  std::string path;         // CSV file, or IDX images
  std::string labels_path;  // IDX labels
  std::string label_column = "label";
  std::vector<std::string> categorical;  // CSV columns to one-hot encode
  PartitionKind partition = PartitionKind::kEven;
  std::size_t parties = 2;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;  // 0: use the run seed
  // Synthetic blobs.
  std::size_t classes = 4;
  std::size_t per_class = 250;
  std::size_t dim = 20;
  double spread = 1.0;
  double separation = 1.0;
};

struct AttackConfig {
  std::size_t per_side = 50;  // victim members (= non-members) and per shadow
  std::size_t shadows = 4;
  std::size_t inversion_rows = 1000;
  DecoderConfig decoder;
  MembershipConfig membership;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string out;
  DataConfig data;
  ModelShape model;
  TrainingConfig training;
  bool eval_with_noise = true;
  ProtectionMode mode = ProtectionMode::kDifferentialPrivacy;
  double epsilon = 0.5;
  double delta = 1e-2;
  double clip = 8.0;
  double p1 = 1.0;
  double p2 = 0.9987;
  bool allow_large_epsilon = false;
  AdaptiveConfig adaptive;
  std::size_t ablate_seeds = 5;
  AttackConfig attack;
  std::size_t timing_rounds = 50;

  ExperimentConfig() { adaptive.classes = 0; }
};

namespace internal {

inline std::string FormatDouble(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string FormatMetric(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string Lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

inline double ParseDouble(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
  return out;
}

inline std::uint64_t ParseUnsigned(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long out = 0;
  try {
    if (!v.empty() && v[0] != '-') out = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) {
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v +
                      "'");
  }
  return out;
}

inline bool ParseBool(const std::string& key, const std::string& v) {
  const std::string s = Lower(v);
  if (s == "true" || s == "on" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "off" || s == "0" || s == "no") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + v + "'");
}

inline std::vector<std::string> SplitList(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = Trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename E>
struct EnumNames {
  std::vector<std::pair<E, std::string>> names;

  std::string Name(E e) const {
    for (const auto& [v, n] : names)
      if (v == e) return n;
    return "?";
  }
  E Parse(const std::string& key, const std::string& v) const {
    for (const auto& [e, n] : names)
      if (n == Lower(v)) return e;
    std::string allowed;
    for (const auto& [e, n] : names) allowed += (allowed.empty() ? "" : "|") + n;
    throw ConfigError("config key '" + key + "': expected " + allowed + ", got '" + v + "'");
  }
};

struct Field {
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

using FieldMap = std::map<std::string, Field>;

inline void BindDouble(FieldMap& m, const std::string& key, double& ref) {
  m[key] = {[&ref, key](const std::string& v) { ref = ParseDouble(key, v); },
            [&ref] { return FormatDouble(ref); }};
}

template <typename T>
void BindUnsigned(FieldMap& m, const std::string& key, T& ref) {
  m[key] = {[&ref, key](const std::string& v) { ref = static_cast<T>(ParseUnsigned(key, v)); },
            [&ref] { return std::to_string(ref); }};
}

inline void BindBool(FieldMap& m, const std::string& key, bool& ref) {
  m[key] = {[&ref, key](const std::string& v) { ref = ParseBool(key, v); },
            [&ref] { return std::string(ref ? "true" : "false"); }};
}

inline void BindString(FieldMap& m, const std::string& key, std::string& ref) {
  m[key] = {[&ref](const std::string& v) { ref = v; }, [&ref] { return ref; }};
}

inline void BindSizeList(FieldMap& m, const std::string& key, std::vector<std::size_t>& ref) {
  m[key] = {[&ref, key](const std::string& v) {
              ref.clear();
              for (const std::string& item : SplitList(v))
                ref.push_back(static_cast<std::size_t>(ParseUnsigned(key, item)));
            },
            [&ref] {
              std::string s;
              for (std::size_t x : ref) s += (s.empty() ? "" : ",") + std::to_string(x);
              return s;
            }};
}

inline void BindStringList(FieldMap& m, const std::string& key, std::vector<std::string>& ref) {
  m[key] = {[&ref](const std::string& v) { ref = SplitList(v); },
            [&ref] {
              std::string s;
              for (const std::string& x : ref) s += (s.empty() ? "" : ",") + x;
              return s;
            }};
}

template <typename E>
void BindEnum(FieldMap& m, const std::string& key, E& ref, EnumNames<E> names) {
  m[key] = {[&ref, key, names](const std::string& v) { ref = names.Parse(key, v); },
            [&ref, names] { return names.Name(ref); }};
}

inline const EnumNames<Activation>& ActivationNames() {
  static const EnumNames<Activation> n{{{Activation::kIdentity, "identity"},
                                        {Activation::kRelu, "relu"},
                                        {Activation::kTanh, "tanh"}}};
  return n;
}

// Every configurable field, keyed by its dotted name.
inline FieldMap Fields(ExperimentConfig& c) {
  FieldMap m;
  BindUnsigned(m, "seed", c.seed);
  BindString(m, "out", c.out);

  BindEnum(m, "data.source", c.data.source,
           EnumNames<DataSource>{{{DataSource::kSynthetic, "synthetic"},
                                  {DataSource::kCsv, "csv"},
                                  {DataSource::kIdx, "idx"}}});
  BindString(m, "data.path", c.data.path);
  BindString(m, "data.labels_path", c.data.labels_path);
  BindString(m, "data.label_column", c.data.label_column);
  BindStringList(m, "data.categorical", c.data.categorical);
  BindEnum(m, "data.partition", c.data.partition,
           EnumNames<PartitionKind>{{{PartitionKind::kEven, "even"},
                                     {PartitionKind::kImageHalves, "image_halves"}}});
  BindUnsigned(m, "data.parties", c.data.parties);
  BindDouble(m, "data.test_fraction", c.data.test_fraction);
  BindUnsigned(m, "data.seed", c.data.seed);
  BindUnsigned(m, "data.classes", c.data.classes);
  BindUnsigned(m, "data.per_class", c.data.per_class);
  BindUnsigned(m, "data.dim", c.data.dim);
  BindDouble(m, "data.spread", c.data.spread);
  BindDouble(m, "data.separation", c.data.separation);

  BindUnsigned(m, "model.embedding_dim", c.model.embedding_dim);
  BindSizeList(m, "model.extractor_hidden", c.model.extractor_hidden);
  BindSizeList(m, "model.head_hidden", c.model.head_hidden);
  BindEnum(m, "model.hidden_activation", c.model.hidden_activation, ActivationNames());
  BindEnum(m, "model.embedding_activation", c.model.embedding_activation, ActivationNames());

  BindDouble(m, "train.learning_rate", c.training.learning_rate);
  BindDouble(m, "train.weight_decay", c.training.weight_decay);
  BindUnsigned(m, "train.batch_size", c.training.batch_size);
  BindUnsigned(m, "train.epochs", c.training.epochs);
  BindDouble(m, "train.alpha", c.training.alpha);
  BindDouble(m, "train.beta", c.training.beta);
  BindBool(m, "train.eval_with_noise", c.eval_with_noise);

  BindEnum(m, "privacy.mode", c.mode,
           EnumNames<ProtectionMode>{{{ProtectionMode::kDifferentialPrivacy, "dp"},
                                      {ProtectionMode::kUnprotected, "none"}}});
  BindDouble(m, "privacy.epsilon", c.epsilon);
  BindDouble(m, "privacy.delta", c.delta);
  BindDouble(m, "privacy.clip", c.clip);
  BindDouble(m, "privacy.p1", c.p1);
  BindDouble(m, "privacy.p2", c.p2);
  BindBool(m, "privacy.allow_large_epsilon", c.allow_large_epsilon);

  BindBool(m, "adaptive.rescale", c.adaptive.rescale);
  BindBool(m, "adaptive.dist_adjust", c.adaptive.dist_adjust);
  BindEnum(m, "adaptive.sensitivity", c.adaptive.sensitivity,
           EnumNames<SensitivityMode>{{{SensitivityMode::kQuantile, "quantile"},
                                       {SensitivityMode::kExactDiameter, "diameter"}}});
  BindEnum(m, "adaptive.distribution_loss", c.adaptive.distribution_loss,
           EnumNames<DistributionLossKind>{{{DistributionLossKind::kMomentSurrogate, "moments"},
                                            {DistributionLossKind::kHistogramKl, "histogram"}}});
  BindDouble(m, "adaptive.filter_threshold", c.adaptive.filter_threshold);
  BindUnsigned(m, "adaptive.classes", c.adaptive.classes);
  BindBool(m, "adaptive.differentiate_scale", c.adaptive.differentiate_scale);
  BindBool(m, "adaptive.cluster_directions", c.adaptive.cluster_directions);
  BindDouble(m, "adaptive.fcm_fuzzifier", c.adaptive.fcm.fuzzifier);
  BindUnsigned(m, "adaptive.fcm_max_iter", c.adaptive.fcm.max_iter);
  BindDouble(m, "adaptive.fcm_tolerance", c.adaptive.fcm.tolerance);

  BindUnsigned(m, "ablate.seeds", c.ablate_seeds);

  BindUnsigned(m, "attack.per_side", c.attack.per_side);
  BindUnsigned(m, "attack.shadows", c.attack.shadows);
  BindUnsigned(m, "attack.inversion_rows", c.attack.inversion_rows);
  BindUnsigned(m, "attack.decoder_epochs", c.attack.decoder.epochs);
  BindDouble(m, "attack.decoder_learning_rate", c.attack.decoder.learning_rate);
  BindUnsigned(m, "attack.decoder_trials", c.attack.decoder.trials);
  BindUnsigned(m, "attack.mi_hidden", c.attack.membership.hidden);
  BindUnsigned(m, "attack.mi_epochs", c.attack.membership.epochs);
  BindDouble(m, "attack.mi_learning_rate", c.attack.membership.learning_rate);
  BindEnum(m, "attack.mi_features", c.attack.membership.features,
           EnumNames<MembershipFeatures>{{{MembershipFeatures::kPrediction, "prediction"},
                                          {MembershipFeatures::kEmbedding, "embedding"}}});

  BindUnsigned(m, "timing.rounds", c.timing_rounds);
  return m;
}

}  // namespace internal

// Sets one dotted key; unknown keys and malformed values raise ConfigError.
inline void SetConfigValue(ExperimentConfig& config, const std::string& key,
                           const std::string& value) {
  internal::FieldMap fields = internal::Fields(config);
  const auto it = fields.find(key);
  if (it == fields.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(value);
}

// `key = value` lines; `#` starts a comment.
inline ExperimentConfig ParseConfig(std::istream& in, ExperimentConfig config = {}) {
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = internal::Trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(number) + ": expected 'key = value'");
    }
    SetConfigValue(config, internal::Trim(line.substr(0, eq)), internal::Trim(line.substr(eq + 1)));
  }
  return config;
}

inline ExperimentConfig LoadConfig(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return ParseConfig(in);
}

// Every key with its resolved value, sorted by key; parses back to an equal
// configuration.
inline std::string SerializeConfig(const ExperimentConfig& config) {
  ExperimentConfig copy = config;
  std::string out;
  for (const auto& [key, field] : internal::Fields(copy)) out += key + " = " + field.get() + "\n";
  return out;
}

inline void ValidateConfig(const ExperimentConfig& c) {
  try {
    c.training.Validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (c.data.parties == 0) throw ConfigError("config key 'data.parties' must be >= 1");
  if (c.model.embedding_dim == 0) throw ConfigError("config key 'model.embedding_dim' must be >= 1");
  if (!(c.data.test_fraction >= 0.0 && c.data.test_fraction < 1.0)) {
    throw ConfigError("config key 'data.test_fraction' must be in [0, 1)");
  }
  if (c.data.source != DataSource::kSynthetic && c.data.path.empty()) {
    throw ConfigError("config key 'data.path' is required for CSV and IDX data");
  }
  if (c.data.source == DataSource::kIdx && c.data.labels_path.empty()) {
    throw ConfigError("config key 'data.labels_path' is required for IDX data");
  }
  if (c.ablate_seeds == 0) throw ConfigError("config key 'ablate.seeds' must be >= 1");
  if (c.attack.shadows < 2) throw ConfigError("config key 'attack.shadows' must be >= 2");
}

inline PrivacyParams MakePrivacy(const ExperimentConfig& c) {
  try {
    return PrivacyParams::Create(c.epsilon, c.delta, c.clip, c.p1, c.p2, c.allow_large_epsilon);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

inline FederationConfig MakeFederationConfig(const ExperimentConfig& c, std::size_t classes) {
  FederationConfig f;
  f.training = c.training;
  f.training.seed = c.seed;
  f.shape = c.model;
  f.eval_with_noise = c.eval_with_noise;
  f.pipeline.mode = c.mode;
  f.pipeline.privacy = MakePrivacy(c);
  f.pipeline.adaptive = c.adaptive;
  if (f.pipeline.adaptive.classes == 0) f.pipeline.adaptive.classes = classes;
  return f;
}

// ---------------------------------------------------------------------------
// Data

inline std::uint64_t DataSeed(const ExperimentConfig& c) {
  return c.data.seed != 0 ? c.data.seed : c.seed;
}

// The whole table, rows tagged train/test.
inline Table LoadTable(const ExperimentConfig& c) {
  switch (c.data.source) {
    case DataSource::kSynthetic: {
      SyntheticSpec spec;
      spec.classes = c.data.classes;
      spec.per_class = c.data.per_class;
      spec.dim = c.data.dim;
      spec.spread = c.data.spread;
      spec.separation = c.data.separation;
      spec.parties = c.data.parties;
      spec.test_fraction = c.data.test_fraction;
      spec.seed = DataSeed(c);
      try {
        return MakeSyntheticTable(spec);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
    }
    case DataSource::kCsv: {
      std::ifstream probe(c.data.path);
      if (!probe) throw DataError("cannot open CSV file " + c.data.path);
      const CsvDocument doc = ParseCsv(probe);
      CsvSchema schema;
      bool has_label = false;
      for (const std::string& name : doc.header) {
        ColumnKind kind = ColumnKind::kNumeric;
        if (name == c.data.label_column) {
          kind = ColumnKind::kLabel;
          has_label = true;
        } else if (std::find(c.data.categorical.begin(), c.data.categorical.end(), name) !=
                   c.data.categorical.end()) {
          kind = ColumnKind::kCategorical;
        }
        schema.columns.push_back({name, kind});
      }
      if (!has_label) {
        throw ConfigError("label column '" + c.data.label_column + "' not found in " + c.data.path);
      }
      return EncodeCsv(doc, schema, c.data.test_fraction, DataSeed(c));
    }
    case DataSource::kIdx: {
      Table t = LoadIdx(c.data.path, c.data.labels_path);
      Rng rng(DataSeed(c), 0x73706c74);
      const auto test = SampleAlignedBatch(
          t.rows(), static_cast<std::size_t>(c.data.test_fraction * static_cast<double>(t.rows())),
          rng);
      for (std::size_t r : test) t.is_train[r] = false;
      return t;
    }
  }
  throw ConfigError("unknown data source");
}

inline PartitionPlan MakePlan(const ExperimentConfig& c, const Table& t) {
  if (c.data.partition == PartitionKind::kImageHalves) {
    if (t.image_rows == 0) throw ConfigError("image_halves partition needs image data");
    if (c.data.parties != 2) throw ConfigError("image_halves partition needs exactly 2 parties");
    const std::array<ImageHalf, 2> halves = {ImageHalf::kLeft, ImageHalf::kRight};
    return PartitionPlan::FromImageHalves(t.image_rows, t.image_cols, halves);
  }
  if (t.features.cols() < c.data.parties) {
    throw ConfigError("more parties than feature columns");
  }
  return PartitionPlan::Even(t.features.cols(), c.data.parties);
}

inline VerticalSplit LoadSplit(const ExperimentConfig& c) {
  const Table t = LoadTable(c);
  return PartitionTrainTest(t, MakePlan(c, t));
}

// ---------------------------------------------------------------------------
// Run directories

namespace internal {

inline void WriteFile(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

inline std::string ReadFile(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline double Seconds(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - since).count();
}

inline nlohmann::json PrivacyJson(const FederationConfig& f, std::uint64_t rounds) {
  const PrivacyParams& p = f.pipeline.privacy;
  nlohmann::json j;
  j["mode"] = f.pipeline.dp() ? "dp" : "none";
  j["epsilon_per_round"] = p.epsilon;
  j["delta"] = p.delta;
  j["delta_prime_per_round"] = p.delta_prime;
  j["sigma"] = p.sigma;
  j["noise_stddev"] = p.noise_stddev();
  j["clip_threshold"] = p.clip_threshold;
  j["p1"] = p.p1;
  j["p2"] = p.p2;
  j["rounds"] = rounds;
  j["composition"] = "none (per-round guarantee)";
  return j;
}

inline nlohmann::json ReportJson(const AttackReport& r) {
  nlohmann::json j;
  j["attack"] = AttackKindName(r.kind);
  j["victim"] = r.victim;
  if (std::isfinite(r.metric)) {
    j["metric"] = r.metric;
  } else {
    j["metric"] = nullptr;
  }
  j["standard_error"] = r.standard_error;
  j["trials"] = r.trials;
  j["failed_trials"] = r.failed_trials;
  j["evaluated"] = r.evaluated;
  j["seed"] = r.seed;
  return j;
}

}  // namespace internal

// Creates `dir`; an existing non-empty directory is an error unless `force`,
// in which case its contents are removed.
inline void PrepareRunDirectory(const std::filesystem::path& dir, bool force) {
  namespace fs = std::filesystem;
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) {
      throw ConfigError("run directory " + dir.string() +
                        " already exists; pass --force to overwrite");
    }
    for (const auto& entry : fs::directory_iterator(dir)) fs::remove_all(entry.path());
  }
  fs::create_directories(dir);
}

// --out, then the config's `out`, then $VFLAFE_OUT_ROOT/<command>-seed<seed>,
// then runs/<command>-seed<seed>.
inline std::filesystem::path ResolveOutputDirectory(const ExperimentConfig& c,
                                                    const std::string& command) {
  if (!c.out.empty()) return c.out;
  const char* root = std::getenv("VFLAFE_OUT_ROOT");
  const std::filesystem::path base = root != nullptr && *root != '\0' ? root : "runs";
  return base / (command + "-seed" + std::to_string(c.seed));
}

inline std::string EpochsCsv(const TrainingHistory& h) {
  std::string out = "epoch,train_acc,test_acc,loss,mean_delta,purity,kl_loss,cl_loss\n";
  for (const EpochRecord& e : h.epochs) {
    out += std::to_string(e.epoch) + "," + internal::FormatMetric(e.train_accuracy) + "," +
           internal::FormatMetric(e.test_accuracy) + "," + internal::FormatMetric(e.loss) + "," +
           internal::FormatMetric(e.mean_delta) + "," +
           (e.purity ? internal::FormatMetric(*e.purity) : "") + "," +
           internal::FormatMetric(e.kl_loss) + "," + internal::FormatMetric(e.cl_loss) + "\n";
  }
  return out;
}

struct TrainOutcome {
  FederationConfig federation;
  TrainingHistory history;
  VflModel model;
};

// Trains on `data` and writes a complete run directory into `dir` (which must
// already be prepared).
inline TrainOutcome TrainIntoDirectory(const ExperimentConfig& c, const VerticalSplit& data,
                                       const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const auto start = std::chrono::steady_clock::now();
  internal::WriteFile(dir / "config.resolved", SerializeConfig(c));
  TrainOutcome out;
  out.federation = MakeFederationConfig(c, data.train.num_classes);
  std::ofstream events(dir / "events.jsonl", std::ios::binary | std::ios::trunc);
  Federation fed(out.federation, data.train, c.seed);
  fed.set_event_log(&events);
  out.history = Train(fed, data);
  out.model = fed.Snapshot();
  internal::WriteFile(dir / "epochs.csv", EpochsCsv(out.history));
  fs::create_directories(dir / "checkpoints");
  for (std::size_t p = 0; p < out.model.extractors.size(); ++p)
    SaveCheckpoint(out.model.extractors[p],
                   dir / "checkpoints" / ("extractor_" + std::to_string(p) + ".ckpt"));
  SaveCheckpoint(out.model.head, dir / "checkpoints" / "head.ckpt");

  nlohmann::json summary;
  summary["command"] = "train";
  summary["seed"] = c.seed;
  summary["epochs"] = out.history.epochs.size();
  if (!out.history.epochs.empty()) {
    const EpochRecord& last = out.history.epochs.back();
    summary["final"] = {{"train_accuracy", last.train_accuracy},
                        {"test_accuracy", last.test_accuracy},
                        {"loss", last.loss},
                        {"mean_delta", last.mean_delta}};
    if (last.purity) summary["final"]["purity"] = *last.purity;
  }
  summary["privacy"] = internal::PrivacyJson(out.federation, out.history.rounds);
  summary["toggles"] = {{"rescale", out.federation.pipeline.rescale()},
                        {"dist_adjust", out.federation.pipeline.dist_adjust()}};
  summary["runtime_seconds"] = internal::Seconds(start);
  internal::WriteFile(dir / "summary.json", summary.dump(2) + "\n");
  return out;
}

// Rebuilds a trained model from a run directory.
inline VflModel LoadRunModel(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const fs::path config = dir / "config.resolved";
  const fs::path head = dir / "checkpoints" / "head.ckpt";
  if (!fs::exists(config)) throw ConfigError("missing " + config.string());
  if (!fs::exists(head)) throw ConfigError("missing checkpoint " + head.string());
  const ExperimentConfig c = LoadConfig(config);
  VflModel model;
  for (std::size_t p = 0;; ++p) {
    const fs::path ext = dir / "checkpoints" / ("extractor_" + std::to_string(p) + ".ckpt");
    if (!fs::exists(ext)) break;
    model.extractors.push_back(LoadCheckpoint(ext));
  }
  if (model.extractors.empty()) {
    throw ConfigError("missing checkpoint " + (dir / "checkpoints" / "extractor_0.ckpt").string());
  }
  model.head = LoadCheckpoint(head);
  model.pipeline = MakeFederationConfig(c, model.head.output_dim()).pipeline;
  model.batch_size = c.training.batch_size;
  return model;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationVariant {
  std::string name;
  bool rescale = false;
  bool dist_adjust = false;
};

inline const std::array<AblationVariant, 4>& AblationVariants() {
  static const std::array<AblationVariant, 4> v = {{{"vanilla", false, false},
                                                    {"vanilla+R", true, false},
                                                    {"vanilla+D", false, true},
                                                    {"VFL-AFE", true, true}}};
  return v;
}

struct AblationRow {
  AblationVariant variant;
  std::vector<std::uint64_t> seeds;
  std::vector<double> test_accuracy;
  std::vector<double> train_accuracy;

  double mean() const { return MeanAndSampleStddev(test_accuracy).mean; }
  double stddev() const { return MeanAndSampleStddev(test_accuracy).stddev; }
  double median() const {
    std::vector<double> v = test_accuracy;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  }
};

// Final test accuracy of every variant on seeds seed .. seed + S - 1; the
// data seed follows the run seed unless data.seed is set.
inline std::vector<AblationRow> RunAblation(const ExperimentConfig& c) {
  std::vector<AblationRow> rows;
  for (const AblationVariant& v : AblationVariants()) rows.push_back({v, {}, {}, {}});
  for (std::size_t s = 0; s < c.ablate_seeds; ++s) {
    ExperimentConfig cell = c;
    cell.seed = c.seed + s;
    const VerticalSplit data = LoadSplit(cell);
    for (AblationRow& row : rows) {
      cell.adaptive.rescale = row.variant.rescale;
      cell.adaptive.dist_adjust = row.variant.dist_adjust;
      Federation fed(MakeFederationConfig(cell, data.train.num_classes), data.train, cell.seed);
      const TrainingHistory h = Train(fed, data);
      row.seeds.push_back(cell.seed);
      row.test_accuracy.push_back(h.epochs.empty() ? 0.0 : h.epochs.back().test_accuracy);
      row.train_accuracy.push_back(h.epochs.empty() ? 0.0 : h.epochs.back().train_accuracy);
    }
  }
  return rows;
}

inline std::string AblationCsv(const std::vector<AblationRow>& rows) {
  std::string out = "variant,rescale,dist_adjust,seeds,mean_test_acc,std_test_acc,median_test_acc\n";
  for (const AblationRow& r : rows) {
    out += r.variant.name + "," + (r.variant.rescale ? "on" : "off") + "," +
           (r.variant.dist_adjust ? "on" : "off") + "," + std::to_string(r.seeds.size()) + "," +
           internal::FormatMetric(r.mean()) + "," + internal::FormatMetric(r.stddev()) + "," +
           internal::FormatMetric(r.median()) + "\n";
  }
  return out;
}

inline std::string AblationRunsCsv(const std::vector<AblationRow>& rows) {
  std::string out = "variant,seed,train_acc,test_acc\n";
  for (const AblationRow& r : rows)
    for (std::size_t i = 0; i < r.seeds.size(); ++i)
      out += r.variant.name + "," + std::to_string(r.seeds[i]) + "," +
             internal::FormatMetric(r.train_accuracy[i]) + "," +
             internal::FormatMetric(r.test_accuracy[i]) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Attacks

struct VictimSpec {
  std::string tag;
  ProtectionMode mode;
  bool adaptive;
};

inline const std::array<VictimSpec, 3>& Victims() {
  static const std::array<VictimSpec, 3> v = {{{"unprotected", ProtectionMode::kUnprotected, false},
                                               {"vanilla", ProtectionMode::kDifferentialPrivacy, false},
                                               {"vfl-afe", ProtectionMode::kDifferentialPrivacy, true}}};
  return v;
}

inline ExperimentConfig VictimConfig(const ExperimentConfig& c, const VictimSpec& v) {
  ExperimentConfig out = c;
  out.mode = v.mode;
  out.adaptive.rescale = v.adaptive;
  out.adaptive.dist_adjust = v.adaptive;
  return out;
}

// Disjoint victim, shadow and inversion rows for the run seed.
inline AttackData LoadAttackData(const ExperimentConfig& c) {
  const Table t = LoadTable(c);
  Rng rng(c.seed, 0x61747461636b);
  try {
    return SplitAttackData(t, MakePlan(c, t), c.attack.per_side, c.attack.shadows,
                           c.attack.inversion_rows, rng);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

struct VictimAttackResult {
  std::string victim;
  AttackReport inversion;
  AttackReport membership;
};

// Both attacks against one trained victim. Shadows are trained with the
// victim's own configuration; inversion targets party 0.
inline VictimAttackResult AttackTrainedVictim(const ExperimentConfig& victim_config,
                                              const std::string& tag, const VflModel& model,
                                              const AttackData& data) {
  VictimAttackResult r;
  r.victim = tag;
  auto shared = std::make_shared<const VflModel>(model);
  const FederationConfig fc =
      MakeFederationConfig(victim_config, data.victim.train.num_classes);
  const std::uint64_t seed = victim_config.seed;
  const EmbeddingOracle oracle =
      ReleasedEmbeddingOracle(model.extractors.at(0), model.pipeline, model.batch_size);
  r.inversion = InversionAttack(model.extractors[0], oracle, data.inversion.party_features[0],
                                data.victim.train.party_features[0], victim_config.attack.decoder,
                                seed, tag);
  const MembershipFeatures kind = victim_config.attack.membership.features;
  const std::vector<ShadowModel> shadows = TrainShadowModels(fc, data.shadows, seed, kind);
  const OutputOracle output = kind == MembershipFeatures::kPrediction
                                  ? PredictionOracle(shared, fc.eval_with_noise)
                                  : ReleasedEmbeddingsOracle(shared);
  r.membership = MembershipInference(output, data.victim.train, data.victim.test, shadows,
                                     victim_config.attack.membership, seed, tag);
  return r;
}

// Trains the three victims in memory and attacks each.
inline std::vector<VictimAttackResult> RunAttackSuite(const ExperimentConfig& c) {
  const AttackData data = LoadAttackData(c);
  std::vector<VictimAttackResult> out;
  for (const VictimSpec& v : Victims()) {
    const ExperimentConfig vc = VictimConfig(c, v);
    Federation fed(MakeFederationConfig(vc, data.victim.train.num_classes), data.victim.train,
                   vc.seed);
    Train(fed, data.victim);
    out.push_back(AttackTrainedVictim(vc, v.tag, fed.Snapshot(), data));
  }
  return out;
}

inline std::string AttackCsv(const std::vector<VictimAttackResult>& results) {
  std::string out = "victim,inversion_mse,membership_accuracy\n";
  for (const VictimAttackResult& r : results)
    out += r.victim + "," + internal::FormatMetric(r.inversion.metric) + "," +
           internal::FormatMetric(r.membership.metric) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Timing

// Wall time per stage over `timing.rounds` training rounds (no evaluation).
inline StageTimes RunTiming(const ExperimentConfig& c) {
  const VerticalSplit data = LoadSplit(c);
  Federation fed(MakeFederationConfig(c, data.train.num_classes), data.train, c.seed);
  if (data.train.rows() < c.training.batch_size) {
    throw ConfigError("timing: fewer training rows than the batch size");
  }
  Rng rng = Rng(c.seed).Split(300);
  for (std::size_t r = 0; r < c.timing_rounds; ++r)
    fed.RunRound(SampleAlignedBatch(data.train.rows(), c.training.batch_size, rng));
  return fed.timings();
}

inline std::string TimingCsv(const StageTimes& t) {
  std::string out = "stage,seconds,share_percent\n";
  for (std::size_t s = 0; s < 4; ++s) {
    out += std::string(StageName(static_cast<Stage>(s))) + "," +
           internal::FormatMetric(t.seconds[s]) + "," +
           internal::FormatMetric(t.share(static_cast<Stage>(s))) + "\n";
  }
  return out;
}

}  // namespace vflafe

#endif  // VFLAFE_EXPERIMENT_H_
