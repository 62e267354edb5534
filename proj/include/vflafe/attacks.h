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

// Adversarial evaluation: a feature-inversion decoder trained on released
// embeddings and shadow-model membership inference on final predictions.
// The attacker only ever queries released artifacts.

#ifndef VFLAFE_ATTACKS_H_
#define VFLAFE_ATTACKS_H_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vflafe/data.h"
#include "vflafe/log.h"
#include "vflafe/neural.h"
#include "vflafe/numerics.h"
#include "vflafe/protocol.h"

namespace vflafe {

enum class AttackKind { kInversion, kMembership };

inline const char* AttackKindName(AttackKind k) {
  return k == AttackKind::kInversion ? "inversion" : "membership";
}

struct AttackReport {
  AttackKind kind = AttackKind::kInversion;
  std::string victim;
  // Inversion: mean squared reconstruction error per feature, averaged over
  // successful trials. Membership: attack accuracy on a balanced set.
  double metric = std::numeric_limits<double>::quiet_NaN();
  double standard_error = 0.0;
  std::size_t trials = 0;
  std::size_t failed_trials = 0;
  std::size_t evaluated = 0;  // held-out rows (inversion) or balanced set size
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Feature inversion

struct DecoderConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  double weight_decay = 0.0;
  std::size_t trials = 1;
};

// Released embeddings for raw features, as the attacker observes them.
using EmbeddingOracle = std::function<Matrix(const Matrix& features, Rng& rng)>;

inline EmbeddingOracle ReleasedEmbeddingOracle(DenseNet extractor, PipelineConfig pipeline,
                                               std::size_t batch_size) {
  auto net = std::make_shared<const DenseNet>(std::move(extractor));
  return [net, pipeline, batch_size](const Matrix& features, Rng& rng) {
    return ReleaseEmbeddings(*net, pipeline, features, batch_size, rng);
  };
}

// Reversed extractor widths: embedding -> hidden (reversed) -> features, ReLU
// between layers and a linear output.
inline DenseNet MirrorDecoder(const DenseNet& extractor, Rng& rng) {
  std::vector<std::size_t> dims;
  for (auto it = extractor.layers().rbegin(); it != extractor.layers().rend(); ++it)
    dims.push_back(it->out_dim());
  dims.push_back(extractor.input_dim());
  std::vector<Activation> acts(dims.size() - 1, Activation::kRelu);
  acts.back() = Activation::kIdentity;
  return DenseNet::Create(dims, acts, rng);
}

namespace internal {

struct Standardizer {
  std::vector<double> mean, inv_std;

  static Standardizer Fit(const Matrix& m) {
    Standardizer s;
    s.mean.assign(m.cols(), 0.0);
    s.inv_std.assign(m.cols(), 1.0);
    for (std::size_t j = 0; j < m.cols(); ++j) {
      double sum = 0.0, sq = 0.0;
      for (std::size_t i = 0; i < m.rows(); ++i) sum += m(i, j);
      s.mean[j] = sum / static_cast<double>(m.rows());
      for (std::size_t i = 0; i < m.rows(); ++i) sq += (m(i, j) - s.mean[j]) * (m(i, j) - s.mean[j]);
      const double sd = std::sqrt(sq / static_cast<double>(m.rows()));
      if (sd > 0.0) s.inv_std[j] = 1.0 / sd;
    }
    return s;
  }

  Matrix Apply(const Matrix& m) const {
    Matrix out = m;
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) = (out(i, j) - mean[j]) * inv_std[j];
    return out;
  }
};

// Minibatch SGD on `loss_fn(net output, batch rows)`; returns false as soon as
// the loss becomes non-finite.
inline bool FitNet(DenseNet& net, const Matrix& x, std::size_t epochs, std::size_t batch_size,
                   const TrainingConfig& sgd, Rng& rng,
                   const std::function<LossAndGradient(const Matrix&, std::span<const std::size_t>)>&
                       loss_fn) {
  const std::size_t n = x.rows();
  const std::size_t batch = std::min(std::max<std::size_t>(batch_size, 1), n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t e = 0; e < epochs; ++e) {
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.UniformInt(i)]);
    for (std::size_t b = 0; b + batch <= n; b += batch) {
      const std::span<const std::size_t> rows(order.data() + b, batch);
      const LossAndGradient lg = loss_fn(net.Forward(SelectRows(x, rows)), rows);
      if (!std::isfinite(lg.loss)) return false;
      SgdStep(net, net.Backward(lg.gradient).params, sgd);
    }
  }
  return true;
}

}  // namespace internal

// Trains a mirror decoder on (released embedding, raw feature) pairs from the
// attacker's own data and reports reconstruction MSE on the victim's
// held-out rows. Diverged trials are excluded and counted.
inline AttackReport InversionAttack(const DenseNet& extractor, const EmbeddingOracle& oracle,
                                    const Matrix& attacker_features, const Matrix& victim_features,
                                    const DecoderConfig& config, std::uint64_t seed,
                                    std::string victim_tag) {
  if (attacker_features.rows() == 0) {
    throw std::invalid_argument("InversionAttack: no training pairs");
  }
  if (victim_features.rows() == 0) {
    throw std::invalid_argument("InversionAttack: no victim rows to reconstruct");
  }
  if (attacker_features.cols() != extractor.input_dim() ||
      victim_features.cols() != extractor.input_dim()) {
    throw std::invalid_argument("InversionAttack: feature width does not match the extractor");
  }
  if (config.trials == 0) throw std::invalid_argument("InversionAttack: trials must be >= 1");
  AttackReport report;
  report.kind = AttackKind::kInversion;
  report.victim = std::move(victim_tag);
  report.trials = config.trials;
  report.seed = seed;
  report.evaluated = victim_features.rows();
  TrainingConfig sgd;
  sgd.learning_rate = config.learning_rate;
  sgd.weight_decay = config.weight_decay;
  std::vector<double> results;
  for (std::size_t trial = 0; trial < config.trials; ++trial) {
    const Rng root = Rng(seed).Split(trial);
    Rng query_rng = root.Split(1), init_rng = root.Split(2), batch_rng = root.Split(3);
    const Matrix released = oracle(attacker_features, query_rng);
    const internal::Standardizer scale = internal::Standardizer::Fit(released);
    const Matrix inputs = scale.Apply(released);
    DenseNet decoder = MirrorDecoder(extractor, init_rng);
    const bool ok = internal::FitNet(
        decoder, inputs, config.epochs, config.batch_size, sgd, batch_rng,
        [&](const Matrix& out, std::span<const std::size_t> rows) {
          return MeanSquaredError(out, SelectRows(attacker_features, rows));
        });
    double mse = std::numeric_limits<double>::quiet_NaN();
    if (ok) {
      const Matrix target_emb = scale.Apply(oracle(victim_features, query_rng));
      mse = MeanSquaredError(decoder.Predict(target_emb), victim_features).loss;
    }
    if (!std::isfinite(mse)) {
      ++report.failed_trials;
      continue;
    }
    results.push_back(mse);
  }
  if (results.empty()) {
    LogWarning("inversion attack on '" + report.victim + "': every trial diverged");
    return report;
  }
  const SampleMoments m = MeanAndSampleStddev(results);
  report.metric = m.mean;
  report.standard_error =
      results.size() > 1 ? m.stddev / std::sqrt(static_cast<double>(results.size())) : 0.0;
  return report;
}

// ---------------------------------------------------------------------------
// Membership inference

// Per-row model outputs for aligned party features: class probabilities, or
// released embeddings for the embedding-level variant.
using OutputOracle = std::function<Matrix(const VerticalDataset&, Rng&)>;

enum class MembershipFeatures { kPrediction, kEmbedding };

inline OutputOracle PredictionOracle(std::shared_ptr<const VflModel> model, bool with_noise) {
  return [model, with_noise](const VerticalDataset& d, Rng& rng) {
    return model->PredictProbabilities(d.party_features, rng, with_noise);
  };
}

inline OutputOracle ReleasedEmbeddingsOracle(std::shared_ptr<const VflModel> model) {
  return [model](const VerticalDataset& d, Rng& rng) {
    std::vector<Matrix> parts;
    for (std::size_t p = 0; p < model->extractors.size(); ++p) {
      Rng party_rng = rng.Split(p);
      parts.push_back(ReleaseEmbeddings(model->extractors[p], model->pipeline, d.party_features[p],
                                        model->batch_size, party_rng));
    }
    rng.NextU64();
    return HorizontalConcat(parts);
  };
}

// A model the attacker trained itself, with known members and non-members.
struct ShadowModel {
  OutputOracle output;
  VerticalDataset members;
  VerticalDataset nonmembers;
};

struct MembershipConfig {
  std::size_t hidden = 16;
  std::size_t epochs = 150;
  std::size_t batch_size = 32;
  double learning_rate = 0.1;
  MembershipFeatures features = MembershipFeatures::kPrediction;
};

// Attack-model input for one row. Predictions: probabilities sorted in
// descending order followed by the probability of the true label.
// Embeddings: the released vector followed by a one-hot label.
inline Matrix MembershipFeatureRows(const Matrix& outputs, std::span<const int> labels,
                                    std::size_t classes, MembershipFeatures kind) {
  if (outputs.rows() != labels.size()) {
    throw std::invalid_argument("MembershipFeatureRows: label count mismatch");
  }
  const std::size_t width = kind == MembershipFeatures::kPrediction ? outputs.cols() + 1
                                                                    : outputs.cols() + classes;
  Matrix out(outputs.rows(), width);
  for (std::size_t i = 0; i < outputs.rows(); ++i) {
    auto src = outputs.row(i);
    auto dst = out.row(i);
    const auto y = static_cast<std::size_t>(labels[i]);
    std::copy(src.begin(), src.end(), dst.begin());
    if (kind == MembershipFeatures::kPrediction) {
      std::sort(dst.begin(), dst.begin() + static_cast<std::ptrdiff_t>(src.size()),
                std::greater<>());
      dst[src.size()] = y < src.size() ? src[y] : 0.0;
    } else if (y < classes) {
      dst[src.size() + y] = 1.0;
    }
  }
  return out;
}

namespace internal {

// Equal numbers of members and non-members, drawn without replacement.
inline std::pair<VerticalDataset, VerticalDataset> Balanced(const VerticalDataset& members,
                                                            const VerticalDataset& nonmembers,
                                                            Rng& rng) {
  const std::size_t m = std::min(members.rows(), nonmembers.rows());
  const auto a = SampleAlignedBatch(members.rows(), m, rng);
  const auto b = SampleAlignedBatch(nonmembers.rows(), m, rng);
  return {members.Subset(a), nonmembers.Subset(b)};
}

struct LabeledRows {
  Matrix x;
  std::vector<int> member;
};

inline LabeledRows AttackRows(const OutputOracle& output, const VerticalDataset& members,
                              const VerticalDataset& nonmembers, std::size_t classes,
                              MembershipFeatures kind, Rng& rng) {
  auto [in, out] = Balanced(members, nonmembers, rng);
  const Matrix fin = MembershipFeatureRows(output(in, rng), in.labels, classes, kind);
  const Matrix fout = MembershipFeatureRows(output(out, rng), out.labels, classes, kind);
  LabeledRows rows;
  rows.x = Matrix(fin.rows() + fout.rows(), fin.cols());
  for (std::size_t i = 0; i < fin.rows(); ++i) {
    std::copy(fin.row(i).begin(), fin.row(i).end(), rows.x.row(i).begin());
    rows.member.push_back(1);
  }
  for (std::size_t i = 0; i < fout.rows(); ++i) {
    std::copy(fout.row(i).begin(), fout.row(i).end(), rows.x.row(fin.rows() + i).begin());
    rows.member.push_back(0);
  }
  return rows;
}

}  // namespace internal

// Shadow-model membership inference: shadow outputs on their own members and
// non-members train a single-hidden-layer attack classifier, which is scored
// on the victim's balanced member/non-member set.
inline AttackReport MembershipInference(const OutputOracle& victim,
                                        const VerticalDataset& victim_members,
                                        const VerticalDataset& victim_nonmembers,
                                        std::span<const ShadowModel> shadows,
                                        const MembershipConfig& config, std::uint64_t seed,
                                        std::string victim_tag) {
  if (shadows.size() < 2) {
    throw std::invalid_argument("MembershipInference: need at least 2 shadow models, got " +
                                std::to_string(shadows.size()));
  }
  if (victim_members.rows() == 0 || victim_nonmembers.rows() == 0) {
    throw std::invalid_argument("MembershipInference: empty victim member or non-member set");
  }
  const std::size_t classes = victim_members.num_classes;
  const Rng root(seed);
  Rng sample_rng = root.Split(1), init_rng = root.Split(2), batch_rng = root.Split(3);

  internal::LabeledRows train;
  for (const ShadowModel& s : shadows) {
    internal::LabeledRows part = internal::AttackRows(s.output, s.members, s.nonmembers, classes,
                                                      config.features, sample_rng);
    if (train.member.empty()) {
      train = std::move(part);
      continue;
    }
    Matrix joined(train.x.rows() + part.x.rows(), train.x.cols());
    std::copy(train.x.data().begin(), train.x.data().end(), joined.data().begin());
    std::copy(part.x.data().begin(), part.x.data().end(),
              joined.data().begin() + static_cast<std::ptrdiff_t>(train.x.size()));
    train.x = std::move(joined);
    train.member.insert(train.member.end(), part.member.begin(), part.member.end());
  }
  const internal::Standardizer scale = internal::Standardizer::Fit(train.x);
  const Matrix x = scale.Apply(train.x);

  const std::array<std::size_t, 3> dims = {x.cols(), config.hidden, 2};
  const std::array<Activation, 2> acts = {Activation::kRelu, Activation::kIdentity};
  DenseNet attack = DenseNet::Create(dims, acts, init_rng);
  TrainingConfig sgd;
  sgd.learning_rate = config.learning_rate;
  sgd.weight_decay = 1e-4;
  internal::FitNet(attack, x, config.epochs, config.batch_size, sgd, batch_rng,
                   [&](const Matrix& logits, std::span<const std::size_t> rows) {
                     std::vector<int> y(rows.size());
                     for (std::size_t i = 0; i < rows.size(); ++i) y[i] = train.member[rows[i]];
                     return CrossEntropySoftmax(logits, y);
                   });

  const internal::LabeledRows eval = internal::AttackRows(
      victim, victim_members, victim_nonmembers, classes, config.features, sample_rng);
  const std::vector<int> guess = ArgmaxRows(attack.Predict(scale.Apply(eval.x)));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < guess.size(); ++i) correct += guess[i] == eval.member[i];

  AttackReport report;
  report.kind = AttackKind::kMembership;
  report.victim = std::move(victim_tag);
  report.trials = 1;
  report.seed = seed;
  report.evaluated = guess.size();
  report.metric = static_cast<double>(correct) / static_cast<double>(guess.size());
  report.standard_error =
      std::sqrt(report.metric * (1.0 - report.metric) / static_cast<double>(guess.size()));
  return report;
}

// Trains one shadow federation per split with the victim's configuration;
// each split's train rows are the shadow's members and its test rows the
// non-members.
inline std::vector<ShadowModel> TrainShadowModels(const FederationConfig& config,
                                                  std::span<const VerticalSplit> splits,
                                                  std::uint64_t seed,
                                                  MembershipFeatures kind =
                                                      MembershipFeatures::kPrediction) {
  std::vector<ShadowModel> out;
  for (std::size_t k = 0; k < splits.size(); ++k) {
    Federation fed(config, splits[k].train, Rng(seed).Split(500 + k).NextU64());
    Train(fed, splits[k]);
    auto model = std::make_shared<const VflModel>(fed.Snapshot());
    ShadowModel s;
    s.output = kind == MembershipFeatures::kPrediction
                   ? PredictionOracle(model, config.eval_with_noise)
                   : ReleasedEmbeddingsOracle(model);
    s.members = splits[k].train;
    s.nonmembers = splits[k].test;
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Data layout

// Disjoint row groups of one table: the victim's members and non-members,
// one member/non-member pair per shadow model, and the inversion attacker's
// own rows.
struct AttackData {
  VerticalSplit victim;
  std::vector<VerticalSplit> shadows;
  VerticalDataset inversion;
};

inline AttackData SplitAttackData(const Table& table, const PartitionPlan& plan,
                                  std::size_t per_side, std::size_t shadows,
                                  std::size_t inversion_rows, Rng& rng) {
  const std::size_t need = 2 * per_side * (shadows + 1) + inversion_rows;
  if (per_side == 0 || need > table.rows()) {
    throw std::invalid_argument("SplitAttackData: need " + std::to_string(need) +
                                " rows, table has " + std::to_string(table.rows()));
  }
  const std::vector<std::size_t> order = SampleAlignedBatch(table.rows(), need, rng);
  std::size_t next = 0;
  auto take = [&](std::size_t n, SplitTag tag) {
    const std::span<const std::size_t> rows(order.data() + next, n);
    next += n;
    return PartitionVertical(table, plan, rows, tag);
  };
  AttackData out;
  out.victim.train = take(per_side, SplitTag::kTrain);
  out.victim.test = take(per_side, SplitTag::kTest);
  for (std::size_t k = 0; k < shadows; ++k) {
    VerticalSplit s;
    s.train = take(per_side, SplitTag::kTrain);
    s.test = take(per_side, SplitTag::kTest);
    out.shadows.push_back(std::move(s));
  }
  out.inversion = take(inversion_rows, SplitTag::kTrain);
  return out;
}

}  // namespace vflafe

#endif  // VFLAFE_ATTACKS_H_
