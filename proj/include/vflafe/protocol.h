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

#ifndef VFLAFE_PROTOCOL_H_
#define VFLAFE_PROTOCOL_H_

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vflafe/adaptive.h"
#include "vflafe/data.h"
#include "vflafe/dp_mechanism.h"
#include "vflafe/neural.h"
#include "vflafe/numerics.h"

namespace vflafe {

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ProtectionMode { kUnprotected, kDifferentialPrivacy };
enum class SensitivityMode { kQuantile, kExactDiameter };

// Utility-recovery switches of a passive party. The distance-distribution
// loss belongs to the rescaling group and is active only with `rescale`.
struct AdaptiveConfig {
  bool rescale = true;
  bool dist_adjust = true;
  SensitivityMode sensitivity = SensitivityMode::kQuantile;
  DistributionLossKind distribution_loss = DistributionLossKind::kMomentSurrogate;
  double filter_threshold = 0.8;  // c
  FcmOptions fcm;
  std::size_t classes = 2;  // C, assumed known to passive parties
  // Backpropagate through the data-dependent scale factor instead of
  // treating it as a constant.
  bool differentiate_scale = true;
  // Cluster gradient directions (unit rows) instead of raw gradients.
  bool cluster_directions = true;
};

// Everything a passive party applies between its extractor output and the
// wire.
struct PipelineConfig {
  ProtectionMode mode = ProtectionMode::kDifferentialPrivacy;
  PrivacyParams privacy;
  AdaptiveConfig adaptive;

  bool dp() const { return mode == ProtectionMode::kDifferentialPrivacy; }
  bool rescale() const { return dp() && adaptive.rescale; }
  bool dist_adjust() const { return dp() && adaptive.dist_adjust; }
};

// ---------------------------------------------------------------------------
// Stage timing

enum class Stage : std::size_t { kBaseline = 0, kNoise = 1, kRescale = 2, kDistAdjust = 3 };

inline const char* StageName(Stage s) {
  switch (s) {
    case Stage::kBaseline: return "baseline";
    case Stage::kNoise: return "noise";
    case Stage::kRescale: return "rescale";
    case Stage::kDistAdjust: return "dist_adjust";
  }
  return "unknown";
}

struct StageTimes {
  std::array<double, 4> seconds{};

  double total() const { return seconds[0] + seconds[1] + seconds[2] + seconds[3]; }
  double share(Stage s) const {
    const double t = total();
    return t > 0.0 ? 100.0 * seconds[static_cast<std::size_t>(s)] / t : 0.0;
  }
};

class ScopedStage {
 public:
  ScopedStage(StageTimes* times, Stage stage)
      : times_(times), stage_(stage), start_(std::chrono::steady_clock::now()) {}
  ~ScopedStage() {
    if (times_ == nullptr) return;
    const auto elapsed = std::chrono::steady_clock::now() - start_;
    times_->seconds[static_cast<std::size_t>(stage_)] +=
        std::chrono::duration<double>(elapsed).count();
  }
  ScopedStage(const ScopedStage&) = delete;
  ScopedStage& operator=(const ScopedStage&) = delete;

 private:
  StageTimes* times_;
  Stage stage_;
  std::chrono::steady_clock::time_point start_;
};

// ---------------------------------------------------------------------------
// Messages

// Immutable protocol payload. Embeddings travel up only after noise; the
// gradient that comes back carries the same round and batch index.
class RoundMessage {
 public:
  enum class Kind { kEmbeddingUp, kGradientDown };

  static RoundMessage EmbeddingUp(int party_id, std::uint64_t round,
                                  std::uint64_t batch_index, Matrix noisy_embeddings) {
    return RoundMessage(Kind::kEmbeddingUp, party_id, round, batch_index,
                        std::move(noisy_embeddings));
  }
  static RoundMessage GradientDown(int party_id, std::uint64_t round,
                                   std::uint64_t batch_index, Matrix gradient) {
    return RoundMessage(Kind::kGradientDown, party_id, round, batch_index,
                        std::move(gradient));
  }

  Kind kind() const { return kind_; }
  int party_id() const { return party_id_; }
  std::uint64_t round() const { return round_; }
  std::uint64_t batch_index() const { return batch_index_; }
  const Matrix& payload() const { return *payload_; }

 private:
  RoundMessage(Kind kind, int party_id, std::uint64_t round, std::uint64_t batch_index,
               Matrix payload)
      : kind_(kind),
        party_id_(party_id),
        round_(round),
        batch_index_(batch_index),
        payload_(std::make_shared<const Matrix>(std::move(payload))) {}

  Kind kind_;
  int party_id_;
  std::uint64_t round_;
  std::uint64_t batch_index_;
  std::shared_ptr<const Matrix> payload_;
};

// In-process stand-in for a transport. Carries the same schema a socket
// would; the optional spy sees every message as it is sent.
class InProcessChannel {
 public:
  using Spy = std::function<void(const RoundMessage&)>;

  void Send(RoundMessage message) {
    if (spy_) spy_(message);
    queue_.push_back(std::move(message));
  }

  // Removes and returns the message of `kind` from `party` for `round`.
  std::optional<RoundMessage> Take(RoundMessage::Kind kind, int party, std::uint64_t round) {
    const auto it = std::find_if(queue_.begin(), queue_.end(), [&](const RoundMessage& m) {
      return m.kind() == kind && m.party_id() == party && m.round() == round;
    });
    if (it == queue_.end()) return std::nullopt;
    RoundMessage m = *it;
    queue_.erase(it);
    return m;
  }

  void set_spy(Spy spy) { spy_ = std::move(spy); }
  // Test hook: drops the next message matching the predicate.
  void set_drop_filter(std::function<bool(const RoundMessage&)> f) { drop_ = std::move(f); }
  std::size_t pending() const { return queue_.size(); }
  void Clear() { queue_.clear(); }

  void Deliver(RoundMessage message) {
    if (drop_ && drop_(message)) return;
    Send(std::move(message));
  }

 private:
  std::vector<RoundMessage> queue_;
  Spy spy_;
  std::function<bool(const RoundMessage&)> drop_;
};

// ---------------------------------------------------------------------------
// Release pipeline

// Result of pushing a batch of extractor outputs through the party pipeline.
struct PipelineOutput {
  Matrix clipped;    // post-clip (equal to raw without DP)
  Matrix scaled;     // post-rescale, pre-noise
  Matrix released;   // what leaves the party
  double scale = 1.0;
  SensitivityEstimate estimate;
};

// clip -> estimate -> rescale -> noise, each step gated by `config`.
inline PipelineOutput RunPipeline(const Matrix& raw, const PipelineConfig& config, Rng& rng,
                                  StageTimes* times = nullptr,
                                  std::vector<int>* stage_log = nullptr) {
  const double t = config.privacy.clip_threshold;
  PipelineOutput out;
  out.estimate.delta_local = 2.0 * t;
  if (config.dp()) {
    ScopedStage s(times, Stage::kNoise);
    out.clipped = ClipNorm(raw, t);
    if (stage_log) stage_log->push_back(1);
  } else {
    out.clipped = raw;
  }
  if (config.rescale() && raw.rows() >= 2) {
    ScopedStage s(times, Stage::kRescale);
    out.estimate = config.adaptive.sensitivity == SensitivityMode::kQuantile
                       ? EstimateLocalSensitivity(out.clipped, config.privacy.p2, t)
                       : ExactDiameterSensitivity(out.clipped, t);
    out.scale = RescaleFactor(out.estimate, t);
    out.scaled = out.clipped * out.scale;
    if (stage_log) stage_log->push_back(2);
  } else {
    out.scaled = out.clipped;
  }
  if (config.dp()) {
    ScopedStage s(times, Stage::kNoise);
    out.released = AddNoise(out.scaled, config.privacy, rng);
    if (stage_log) stage_log->push_back(3);
  } else {
    out.released = out.scaled;
  }
  return out;
}

namespace internal {

// Rows scaled to unit norm; zero rows stay zero.
inline Matrix UnitRows(const Matrix& m) {
  Matrix out = m;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    const double n = Norm(r);
    if (n > 0.0)
      for (double& v : r) v /= n;
  }
  return out;
}

// Row chunks of about `batch` rows, none smaller than 2 when n >= 2.
inline std::vector<std::pair<std::size_t, std::size_t>> Chunks(std::size_t n,
                                                                std::size_t batch) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  batch = std::max<std::size_t>(batch, 2);
  for (std::size_t b = 0; b < n; b += batch) out.emplace_back(b, std::min(n, b + batch));
  if (out.size() >= 2 && out.back().second - out.back().first < 2) {
    out[out.size() - 2].second = out.back().second;
    out.pop_back();
  }
  return out;
}

}  // namespace internal

// Released embeddings for every row of `features`, processed in batches the
// way the party would during a round.
inline Matrix ReleaseEmbeddings(const DenseNet& extractor, const PipelineConfig& config,
                                const Matrix& features, std::size_t batch_size, Rng& rng) {
  Matrix out(features.rows(), extractor.output_dim());
  for (const auto& [begin, end] : internal::Chunks(features.rows(), batch_size)) {
    std::vector<std::size_t> rows(end - begin);
    std::iota(rows.begin(), rows.end(), begin);
    const PipelineOutput p = RunPipeline(extractor.Predict(SelectRows(features, rows)), config, rng);
    for (std::size_t i = 0; i < rows.size(); ++i)
      std::copy(p.released.row(i).begin(), p.released.row(i).end(), out.row(begin + i).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parties

enum class PipelineStage { kClipped = 1, kRescaled = 2, kNoised = 3 };

// Per-round scratch state of a passive party.
struct PassiveBuffers {
  std::optional<std::uint64_t> round;
  Matrix raw;
  Matrix clipped;
  Matrix scaled;
  double scale = 1.0;
  SensitivityEstimate estimate;
  std::vector<int> stages;  // PipelineStage values in execution order
  std::optional<FuzzyAssignment> assignment;

  void Clear() { *this = PassiveBuffers{}; }
};

struct PassiveUpdate {
  double kl_loss = 0.0;
  double cl_loss = 0.0;
  std::optional<FuzzyAssignment> assignment;
  bool fcm_degenerate = false;
};

// Feature holder: owns its raw features, extractor, privacy parameters and
// randomness. Never sees labels.
class PassiveParty {
 public:
  PassiveParty(int id, Matrix features, DenseNet extractor, PipelineConfig pipeline,
               TrainingConfig training, Rng rng)
      : id_(id),
        features_(std::move(features)),
        extractor_(std::move(extractor)),
        pipeline_(std::move(pipeline)),
        training_(training),
        noise_rng_(rng.Split(1)),
        cluster_rng_(rng.Split(2)) {
    if (features_.cols() != extractor_.input_dim()) {
      throw std::invalid_argument("PassiveParty " + std::to_string(id) +
                                  ": extractor input does not match feature width");
    }
  }

  int id() const { return id_; }
  const DenseNet& extractor() const { return extractor_; }
  DenseNet& mutable_extractor() { return extractor_; }
  const PipelineConfig& pipeline() const { return pipeline_; }
  const PassiveBuffers& buffers() const { return buffers_; }
  std::size_t embedding_dim() const { return extractor_.output_dim(); }
  std::size_t rows() const { return features_.rows(); }

  // Forward, clip, estimate, rescale, noise; returns the upstream message.
  RoundMessage ProduceEmbeddings(std::uint64_t round, std::span<const std::size_t> indices,
                                 StageTimes* times = nullptr) {
    buffers_.Clear();
    buffers_.round = round;
    {
      ScopedStage s(times, Stage::kBaseline);
      buffers_.raw = extractor_.Forward(SelectRows(features_, indices));
    }
    PipelineOutput p = RunPipeline(buffers_.raw, pipeline_, noise_rng_, times, &buffers_.stages);
    buffers_.clipped = std::move(p.clipped);
    buffers_.scaled = std::move(p.scaled);
    buffers_.scale = p.scale;
    buffers_.estimate = p.estimate;
    return RoundMessage::EmbeddingUp(id_, round, round, std::move(p.released));
  }

  // Consumes d loss / d released embedding, adds the local auxiliary losses
  // and takes one SGD step.
  PassiveUpdate ApplyGradient(const RoundMessage& message, StageTimes* times = nullptr) {
    if (message.kind() != RoundMessage::Kind::kGradientDown || message.party_id() != id_) {
      throw ProtocolError("party " + std::to_string(id_) + " received a foreign message");
    }
    if (!buffers_.round || *buffers_.round != message.round() ||
        message.batch_index() != message.round()) {
      throw ProtocolError("party " + std::to_string(id_) + ": gradient for round " +
                          std::to_string(message.round()) + " does not match buffered batch");
    }
    const Matrix& grad = message.payload();
    if (grad.rows() != buffers_.clipped.rows() || grad.cols() != buffers_.clipped.cols()) {
      throw ProtocolError("party " + std::to_string(id_) + ": gradient shape mismatch");
    }
    PassiveUpdate update;
    Matrix at_scaled = grad;  // d loss / d (rescaled, pre-noise) embeddings
    std::optional<Matrix> at_clipped;
    if (pipeline_.dist_adjust() && grad.rows() >= pipeline_.adaptive.classes) {
      ScopedStage s(times, Stage::kDistAdjust);
      FcmResult fcm = Fcm(pipeline_.adaptive.cluster_directions ? internal::UnitRows(grad) : grad,
                          pipeline_.adaptive.classes, pipeline_.adaptive.fcm, cluster_rng_);
      ApplyConfidenceFilter(fcm.assignment, pipeline_.adaptive.filter_threshold);
      update.fcm_degenerate = fcm.degenerate;
      if (fcm.assignment.retained_count() >= 2 && training_.beta != 0.0) {
        LossAndGradient cl = ContrastiveLoss(buffers_.clipped, fcm.assignment, training_.beta);
        update.cl_loss = cl.loss;
        at_clipped = std::move(cl.gradient);
      }
      update.assignment = fcm.assignment;
      buffers_.assignment = std::move(fcm.assignment);
    }
    Matrix upstream;
    if (pipeline_.rescale() && pipeline_.adaptive.differentiate_scale) {
      ScopedStage s(times, Stage::kRescale);
      upstream = RescaleBackward(buffers_.clipped, at_scaled, buffers_.estimate,
                                 pipeline_.privacy.clip_threshold);
    } else {
      upstream = at_scaled * buffers_.scale;
    }
    if (at_clipped) upstream += *at_clipped;
    if (pipeline_.rescale() && training_.alpha != 0.0 && buffers_.clipped.rows() >= 4) {
      ScopedStage s(times, Stage::kRescale);
      LossAndGradient kl = DistributionLoss(buffers_.clipped, training_.alpha,
                                            pipeline_.adaptive.distribution_loss);
      update.kl_loss = kl.loss;
      upstream += kl.gradient;
    }
    {
      ScopedStage s(times, Stage::kBaseline);
      if (pipeline_.dp()) {
        upstream = ClipNormBackward(buffers_.raw, upstream, pipeline_.privacy.clip_threshold);
      }
      const DenseNet::Gradients g = extractor_.Backward(upstream);
      SgdStep(extractor_, g.params, training_);
    }
    return update;
  }

 private:
  int id_;
  Matrix features_;
  DenseNet extractor_;
  PipelineConfig pipeline_;
  TrainingConfig training_;
  Rng noise_rng_;
  Rng cluster_rng_;
  PassiveBuffers buffers_;
};

// Label holder: owns the head model and the label store. Never sees raw
// features.
class ActiveParty {
 public:
  ActiveParty(DenseNet head, std::vector<int> labels, TrainingConfig training)
      : head_(std::move(head)), labels_(std::move(labels)), training_(training) {}

  const DenseNet& head() const { return head_; }
  DenseNet& mutable_head() { return head_; }
  std::span<const int> labels() const { return labels_; }

  struct StepResult {
    double loss = 0.0;
    double accuracy = 0.0;
    std::vector<RoundMessage> gradients;
  };

  // Concatenates embeddings in ascending party order, optimizes the head and
  // returns per-party input gradients.
  StepResult Step(std::uint64_t round, std::vector<RoundMessage> embeddings,
                  std::span<const std::size_t> indices) {
    std::sort(embeddings.begin(), embeddings.end(),
              [](const RoundMessage& a, const RoundMessage& b) { return a.party_id() < b.party_id(); });
    std::vector<Matrix> parts;
    std::vector<std::size_t> widths;
    for (const RoundMessage& m : embeddings) {
      if (m.kind() != RoundMessage::Kind::kEmbeddingUp || m.round() != round ||
          m.batch_index() != round || m.payload().rows() != indices.size()) {
        throw ProtocolError("active party: malformed embedding message from party " +
                            std::to_string(m.party_id()) + " in round " + std::to_string(round));
      }
      parts.push_back(m.payload());
      widths.push_back(m.payload().cols());
    }
    const Matrix joined = HorizontalConcat(parts);
    if (joined.cols() != head_.input_dim()) {
      throw ProtocolError("active party: concatenated width " + std::to_string(joined.cols()) +
                          " does not match head input " + std::to_string(head_.input_dim()));
    }
    std::vector<int> y(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) y[i] = labels_.at(indices[i]);

    const Matrix logits = head_.Forward(joined);
    const LossAndGradient ce = CrossEntropySoftmax(logits, y);
    const DenseNet::Gradients g = head_.Backward(ce.gradient);
    SgdStep(head_, g.params, training_);

    StepResult result;
    result.loss = ce.loss;
    const std::vector<int> predicted = ArgmaxRows(logits);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < y.size(); ++i) correct += predicted[i] == y[i];
    result.accuracy = static_cast<double>(correct) / static_cast<double>(y.size());
    std::size_t offset = 0;
    for (std::size_t p = 0; p < embeddings.size(); ++p) {
      result.gradients.push_back(RoundMessage::GradientDown(
          embeddings[p].party_id(), round, round,
          ColumnSlice(g.input, offset, offset + widths[p])));
      offset += widths[p];
    }
    return result;
  }

 private:
  DenseNet head_;
  std::vector<int> labels_;
  TrainingConfig training_;
};

// ---------------------------------------------------------------------------
// Federation

struct ModelShape {
  std::size_t embedding_dim = 16;
  std::vector<std::size_t> extractor_hidden = {32};
  Activation hidden_activation = Activation::kRelu;
  Activation embedding_activation = Activation::kTanh;
  std::vector<std::size_t> head_hidden;
};

struct FederationConfig {
  TrainingConfig training;
  PipelineConfig pipeline;  // copied into every passive party
  ModelShape shape;
  bool eval_with_noise = true;
};

struct RoundMetrics {
  std::uint64_t round = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<double> delta;  // per-party sensitivity used for scaling
  std::vector<std::optional<double>> purity;           // over retained rows
  std::vector<std::optional<double>> purity_unfiltered;
  std::vector<double> kl_loss;
  std::vector<double> cl_loss;
  std::vector<bool> mechanism_ok;  // clip bound holds and sigma is compliant
};

// A trained model as the outside world sees it: extractors, head and the
// release pipeline.
struct VflModel {
  std::vector<DenseNet> extractors;
  DenseNet head;
  PipelineConfig pipeline;
  std::size_t batch_size = 64;

  // Class probabilities for aligned per-party features; embeddings go through
  // the release pipeline (noise included when `with_noise`).
  Matrix PredictProbabilities(std::span<const Matrix> party_features, Rng& rng,
                              bool with_noise = true) const {
    PipelineConfig cfg = pipeline;
    if (!with_noise) cfg.privacy.sigma = 0.0;
    std::vector<Matrix> parts;
    for (std::size_t p = 0; p < extractors.size(); ++p) {
      Rng party_rng = rng.Split(p);
      parts.push_back(ReleaseEmbeddings(extractors[p], cfg, party_features[p], batch_size, party_rng));
    }
    rng.NextU64();
    return Softmax(head.Predict(HorizontalConcat(parts)));
  }

  double Accuracy(const VerticalDataset& data, Rng& rng, bool with_noise = true) const {
    if (data.rows() == 0) return 0.0;
    const std::vector<int> predicted =
        ArgmaxRows(PredictProbabilities(data.party_features, rng, with_noise));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) correct += predicted[i] == data.labels[i];
    return static_cast<double>(correct) / static_cast<double>(predicted.size());
  }
};

namespace internal {

inline std::string JsonNumber(double v) {
  if (!std::isfinite(v)) return "null";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace internal

// Orchestrates one active and M-1 passive parties through the round loop.
class Federation {
 public:
  Federation(const FederationConfig& config, const VerticalDataset& train, std::uint64_t seed)
      : config_(config), seed_(seed), classes_(train.num_classes) {
    config_.training.Validate();
    if (train.parties() == 0) throw std::invalid_argument("Federation: no passive parties");
    if (classes_ < 2) throw std::invalid_argument("Federation: need at least 2 classes");
    const Rng root(seed);
    std::vector<Activation> acts;
    std::size_t head_in = 0;
    for (std::size_t p = 0; p < train.parties(); ++p) {
      std::vector<std::size_t> dims = {train.party_features[p].cols()};
      dims.insert(dims.end(), config_.shape.extractor_hidden.begin(),
                  config_.shape.extractor_hidden.end());
      dims.push_back(config_.shape.embedding_dim);
      acts.assign(dims.size() - 1, config_.shape.hidden_activation);
      acts.back() = config_.shape.embedding_activation;
      Rng init = root.Split(100 + p);
      DenseNet extractor = DenseNet::Create(dims, acts, init);
      passive_.emplace_back(static_cast<int>(p), train.party_features[p], std::move(extractor),
                            config_.pipeline, config_.training, root.Split(200 + p));
      head_in += config_.shape.embedding_dim;
    }
    std::vector<std::size_t> dims = {head_in};
    dims.insert(dims.end(), config_.shape.head_hidden.begin(), config_.shape.head_hidden.end());
    dims.push_back(classes_);
    acts.assign(dims.size() - 1, config_.shape.hidden_activation);
    acts.back() = Activation::kIdentity;
    Rng head_init = root.Split(99);
    active_.emplace(DenseNet::Create(dims, acts, head_init), train.labels, config_.training);
  }

  const FederationConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t classes() const { return classes_; }
  std::uint64_t rounds_completed() const { return round_; }
  std::size_t passive_count() const { return passive_.size(); }
  PassiveParty& passive(std::size_t i) { return passive_.at(i); }
  const PassiveParty& passive(std::size_t i) const { return passive_.at(i); }
  ActiveParty& active() { return *active_; }
  const ActiveParty& active() const { return *active_; }
  InProcessChannel& channel() { return channel_; }
  StageTimes& timings() { return timings_; }
  void set_event_log(std::ostream* log) { event_log_ = log; }

  VflModel Snapshot() const {
    VflModel model;
    for (const PassiveParty& p : passive_) model.extractors.push_back(p.extractor());
    model.head = active_->head();
    model.pipeline = config_.pipeline;
    model.batch_size = config_.training.batch_size;
    return model;
  }

  // One communication round over the aligned batch `indices`.
  RoundMetrics RunRound(std::span<const std::size_t> indices) {
    const std::uint64_t round = round_;
    RoundMetrics metrics;
    metrics.round = round;

    for (PassiveParty& party : passive_) {
      channel_.Deliver(party.ProduceEmbeddings(round, indices, &timings_));
    }
    std::vector<RoundMessage> ups;
    for (const PassiveParty& party : passive_) {
      auto m = channel_.Take(RoundMessage::Kind::kEmbeddingUp, party.id(), round);
      if (!m) {
        throw ProtocolError("missing embeddings from party " + std::to_string(party.id()) +
                            " in round " + std::to_string(round));
      }
      ups.push_back(std::move(*m));
    }
    ActiveParty::StepResult step;
    {
      ScopedStage s(&timings_, Stage::kBaseline);
      step = active_->Step(round, std::move(ups), indices);
    }
    metrics.loss = step.loss;
    metrics.accuracy = step.accuracy;
    for (RoundMessage& g : step.gradients) channel_.Deliver(std::move(g));

    std::vector<int> batch_labels(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i)
      batch_labels[i] = active_->labels()[indices[i]];

    for (PassiveParty& party : passive_) {
      auto m = channel_.Take(RoundMessage::Kind::kGradientDown, party.id(), round);
      if (!m) {
        throw ProtocolError("missing gradients for party " + std::to_string(party.id()) +
                            " in round " + std::to_string(round));
      }
      const PassiveUpdate update = party.ApplyGradient(*m, &timings_);
      const PassiveBuffers& buf = party.buffers();
      metrics.delta.push_back(buf.estimate.delta_local);
      metrics.kl_loss.push_back(update.kl_loss);
      metrics.cl_loss.push_back(update.cl_loss);
      metrics.mechanism_ok.push_back(MechanismHolds(party));
      // Purity is a simulator-side diagnostic; the party itself has no labels.
      std::optional<double> filtered, unfiltered;
      if (update.assignment && !update.fcm_degenerate) {
        unfiltered = Purity(*update.assignment, batch_labels, false);
        if (update.assignment->retained_count() > 0)
          filtered = Purity(*update.assignment, batch_labels, true);
      }
      metrics.purity.push_back(filtered);
      metrics.purity_unfiltered.push_back(unfiltered);
    }
    ++round_;
    if (event_log_ != nullptr) WriteEvent(metrics);
    return metrics;
  }

 private:
  bool MechanismHolds(const PassiveParty& party) const {
    const PipelineConfig& p = party.pipeline();
    if (!p.dp()) return false;
    const double t = p.privacy.clip_threshold;
    for (std::size_t i = 0; i < party.buffers().clipped.rows(); ++i)
      if (Norm(party.buffers().clipped.row(i)) > t) return false;
    if (p.privacy.epsilon > 0.0 && p.privacy.epsilon < 1.0 &&
        p.privacy.sigma < CalibrateSigma(p.privacy.epsilon, p.privacy.delta))
      return false;
    return p.privacy.sigma > 0.0;
  }

  void WriteEvent(const RoundMetrics& m) const {
    std::string line = "{\"round\":" + std::to_string(m.round) +
                       ",\"loss\":" + internal::JsonNumber(m.loss) +
                       ",\"accuracy\":" + internal::JsonNumber(m.accuracy) + ",\"delta\":[";
    for (std::size_t i = 0; i < m.delta.size(); ++i)
      line += (i ? "," : "") + internal::JsonNumber(m.delta[i]);
    line += "],\"purity\":[";
    for (std::size_t i = 0; i < m.purity.size(); ++i)
      line += (i ? "," : "") + (m.purity[i] ? internal::JsonNumber(*m.purity[i]) : "null");
    line += "]}\n";
    *event_log_ << line;
  }

  FederationConfig config_;
  std::uint64_t seed_;
  std::size_t classes_;
  std::vector<PassiveParty> passive_;
  std::optional<ActiveParty> active_;
  InProcessChannel channel_;
  StageTimes timings_;
  std::uint64_t round_ = 0;
  std::ostream* event_log_ = nullptr;
};

// n distinct indices from [0, N), uniformly without replacement (partial
// Fisher-Yates). Every party indexes its aligned rows with the same list.
inline std::vector<std::size_t> SampleAlignedBatch(std::size_t total, std::size_t n, Rng& rng) {
  if (n > total) {
    throw std::invalid_argument("SampleAlignedBatch: batch of " + std::to_string(n) +
                                " from " + std::to_string(total) + " samples");
  }
  std::vector<std::size_t> pool(total);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.UniformInt(total - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(n);
  return pool;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_accuracy = 0.0;  // mean batch accuracy seen during the epoch
  double test_accuracy = 0.0;
  double loss = 0.0;
  double mean_delta = 0.0;
  std::optional<double> purity;  // mean filtered purity, when clustering ran
  double kl_loss = 0.0;
  double cl_loss = 0.0;
};

struct TrainingHistory {
  std::vector<EpochRecord> epochs;
  std::uint64_t rounds = 0;
};

// Runs epochs x (N / n) rounds, each on a freshly sampled aligned batch, and
// evaluates on the test split after every epoch.
inline TrainingHistory Train(Federation& federation, const VerticalSplit& data) {
  TrainingHistory history;
  const TrainingConfig& cfg = federation.config().training;
  const std::size_t total = data.train.rows();
  if (total < cfg.batch_size) {
    throw std::invalid_argument("Train: fewer training rows than the batch size");
  }
  const std::size_t rounds_per_epoch = total / cfg.batch_size;
  Rng batch_rng = Rng(federation.seed()).Split(300);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch + 1;
    double purity_sum = 0.0;
    std::size_t purity_count = 0, delta_count = 0;
    for (std::size_t r = 0; r < rounds_per_epoch; ++r) {
      const std::vector<std::size_t> idx = SampleAlignedBatch(total, cfg.batch_size, batch_rng);
      const RoundMetrics m = federation.RunRound(idx);
      rec.loss += m.loss;
      rec.train_accuracy += m.accuracy;
      for (std::size_t p = 0; p < m.delta.size(); ++p) {
        rec.mean_delta += m.delta[p];
        rec.kl_loss += m.kl_loss[p];
        rec.cl_loss += m.cl_loss[p];
        ++delta_count;
        if (m.purity[p]) {
          purity_sum += *m.purity[p];
          ++purity_count;
        }
      }
    }
    const double rounds = static_cast<double>(rounds_per_epoch);
    rec.loss /= rounds;
    rec.train_accuracy /= rounds;
    if (delta_count > 0) {
      rec.mean_delta /= static_cast<double>(delta_count);
      rec.kl_loss /= static_cast<double>(delta_count);
      rec.cl_loss /= static_cast<double>(delta_count);
    }
    if (purity_count > 0) rec.purity = purity_sum / static_cast<double>(purity_count);
    Rng eval_rng = Rng(federation.seed()).Split(400 + epoch);
    rec.test_accuracy = federation.Snapshot().Accuracy(data.test, eval_rng,
                                                       federation.config().eval_with_noise);
    history.epochs.push_back(rec);
  }
  history.rounds = federation.rounds_completed();
  return history;
}

}  // namespace vflafe

#endif  // VFLAFE_PROTOCOL_H_
