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

#include "vflafe/protocol.h"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "testing.h"
#include "vflafe/data.h"

namespace vflafe {
namespace {

VerticalSplit SmallBlobs(std::size_t parties = 2, double separation = 1.0,
                         std::size_t per_class = 80, std::uint64_t seed = 1) {
  SyntheticSpec spec;
  spec.classes = 4;
  spec.per_class = per_class;
  spec.dim = 12;
  spec.parties = parties;
  spec.separation = separation;
  spec.seed = seed;
  return MakeSynthetic(spec);
}

FederationConfig DpConfig(bool rescale = true, bool dist_adjust = true) {
  FederationConfig cfg;
  cfg.training.learning_rate = 0.05;
  cfg.training.batch_size = 32;
  cfg.training.epochs = 2;
  cfg.pipeline.privacy = PrivacyParams::Create(0.5, 1e-2, 2.0);
  cfg.pipeline.adaptive.rescale = rescale;
  cfg.pipeline.adaptive.dist_adjust = dist_adjust;
  cfg.pipeline.adaptive.classes = 4;
  cfg.shape.embedding_dim = 8;
  cfg.shape.extractor_hidden = {16};
  return cfg;
}

std::vector<std::size_t> FirstRows(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

// ---------------------------------------------------------------------------
// Boundary hygiene and pipeline order

TEST(ProtocolTest, SpyNeverSeesPreNoiseRows) {
  const VerticalSplit data = SmallBlobs();
  Federation fed(DpConfig(), data.train, 3);
  std::vector<RoundMessage> seen;
  fed.channel().set_spy([&](const RoundMessage& m) { seen.push_back(m); });
  Rng rng(4);
  for (int r = 0; r < 5; ++r) {
    seen.clear();
    fed.RunRound(SampleAlignedBatch(data.train.rows(), 32, rng));
    std::size_t ups = 0;
    for (const RoundMessage& m : seen) {
      if (m.kind() != RoundMessage::Kind::kEmbeddingUp) continue;
      ++ups;
      const PassiveBuffers& buf = fed.passive(static_cast<std::size_t>(m.party_id())).buffers();
      for (const Matrix* pre : {&buf.raw, &buf.clipped, &buf.scaled})
        for (std::size_t i = 0; i < m.payload().rows(); ++i)
          for (std::size_t j = 0; j < pre->rows(); ++j) {
            const auto a = m.payload().row(i), b = pre->row(j);
            ASSERT_FALSE(std::equal(a.begin(), a.end(), b.begin())) << "round " << r;
          }
    }
    EXPECT_EQ(ups, 2u);
  }
}

TEST(ProtocolTest, PipelineOrderWitnessAndClipBound) {
  const VerticalSplit data = SmallBlobs();
  for (bool rescale : {true, false}) {
    FederationConfig cfg = DpConfig(rescale, true);
    Federation fed(cfg, data.train, 5);
    Rng rng(6);
    for (int r = 0; r < 4; ++r) {
      fed.RunRound(SampleAlignedBatch(data.train.rows(), 32, rng));
      for (std::size_t p = 0; p < fed.passive_count(); ++p) {
        const PassiveBuffers& buf = fed.passive(p).buffers();
        const std::vector<int> expected =
            rescale ? std::vector<int>{1, 2, 3} : std::vector<int>{1, 3};
        EXPECT_EQ(buf.stages, expected);
        for (std::size_t i = 0; i < buf.clipped.rows(); ++i)
          EXPECT_LE(Norm(buf.clipped.row(i)), cfg.pipeline.privacy.clip_threshold);
      }
    }
  }
}

TEST(ProtocolTest, BuffersAreClearedAtRoundStart) {
  const VerticalSplit data = SmallBlobs();
  Federation fed(DpConfig(), data.train, 5);
  fed.RunRound(FirstRows(32));
  ASSERT_TRUE(fed.passive(0).buffers().assignment.has_value());
  fed.passive(0).ProduceEmbeddings(1, FirstRows(16));
  EXPECT_FALSE(fed.passive(0).buffers().assignment.has_value());
  EXPECT_EQ(fed.passive(0).buffers().clipped.rows(), 16u);
  EXPECT_EQ(*fed.passive(0).buffers().round, 1u);
}

// ---------------------------------------------------------------------------
// Error paths

std::string ProtocolErrorOf(Federation& fed, std::span<const std::size_t> idx) {
  try {
    fed.RunRound(idx);
  } catch (const ProtocolError& e) {
    return e.what();
  }
  return "";
}

TEST(ProtocolTest, MissingEmbeddingNamesPartyAndRound) {
  const VerticalSplit data = SmallBlobs();
  Federation fed(DpConfig(), data.train, 7);
  fed.RunRound(FirstRows(32));
  fed.RunRound(FirstRows(32));
  fed.channel().set_drop_filter([](const RoundMessage& m) {
    return m.kind() == RoundMessage::Kind::kEmbeddingUp && m.party_id() == 1;
  });
  const std::string msg = ProtocolErrorOf(fed, FirstRows(32));
  EXPECT_NE(msg.find("party 1"), std::string::npos) << msg;
  EXPECT_NE(msg.find("round 2"), std::string::npos) << msg;
}

TEST(ProtocolTest, MissingGradientNamesPartyAndRound) {
  const VerticalSplit data = SmallBlobs();
  Federation fed(DpConfig(), data.train, 7);
  fed.channel().set_drop_filter([](const RoundMessage& m) {
    return m.kind() == RoundMessage::Kind::kGradientDown && m.party_id() == 0;
  });
  const std::string msg = ProtocolErrorOf(fed, FirstRows(32));
  EXPECT_NE(msg.find("gradients for party 0"), std::string::npos) << msg;
  EXPECT_NE(msg.find("round 0"), std::string::npos) << msg;
}

TEST(ProtocolTest, PassiveRejectsMismatchedGradients) {
  const VerticalSplit data = SmallBlobs();
  Federation fed(DpConfig(), data.train, 8);
  PassiveParty& party = fed.passive(0);
  party.ProduceEmbeddings(3, FirstRows(8));
  const Matrix g(8, party.embedding_dim());
  EXPECT_THROW(party.ApplyGradient(RoundMessage::GradientDown(1, 3, 3, g)), ProtocolError);
  EXPECT_THROW(party.ApplyGradient(RoundMessage::GradientDown(0, 4, 4, g)), ProtocolError);
  EXPECT_THROW(party.ApplyGradient(RoundMessage::GradientDown(0, 3, 2, g)), ProtocolError);
  EXPECT_THROW(party.ApplyGradient(RoundMessage::GradientDown(0, 3, 3, Matrix(7, 8))),
               ProtocolError);
  EXPECT_THROW(party.ApplyGradient(RoundMessage::EmbeddingUp(0, 3, 3, g)), ProtocolError);
  EXPECT_NO_THROW(party.ApplyGradient(RoundMessage::GradientDown(0, 3, 3, g)));
}

TEST(ProtocolTest, ActiveRejectsMalformedEmbeddings) {
  const VerticalSplit data = SmallBlobs();
  Federation fed(DpConfig(), data.train, 8);
  const auto idx = FirstRows(4);
  std::vector<RoundMessage> ups = {RoundMessage::EmbeddingUp(0, 0, 0, Matrix(4, 8)),
                                   RoundMessage::EmbeddingUp(1, 1, 1, Matrix(4, 8))};
  EXPECT_THROW(fed.active().Step(0, ups, idx), ProtocolError);
  ups = {RoundMessage::EmbeddingUp(0, 0, 0, Matrix(4, 8))};
  EXPECT_THROW(fed.active().Step(0, ups, idx), ProtocolError);  // width 8 != 16
}

// ---------------------------------------------------------------------------
// Shapes and gating

TEST(ProtocolTest, HeadWidthIsSumOfEmbeddingDims) {
  for (std::size_t parties : {1u, 2u, 3u}) {
    const VerticalSplit data = SmallBlobs(parties);
    const FederationConfig cfg = DpConfig();
    Federation fed(cfg, data.train, 1);
    std::size_t sum = 0;
    for (std::size_t p = 0; p < fed.passive_count(); ++p) sum += fed.passive(p).embedding_dim();
    EXPECT_EQ(sum, parties * cfg.shape.embedding_dim);
    EXPECT_EQ(fed.active().head().input_dim(), sum);
    EXPECT_EQ(fed.active().head().output_dim(), 4u);
  }
}

TEST(ProtocolTest, TogglesOffIsClipPlusNoise) {
  PipelineConfig cfg;
  cfg.privacy = PrivacyParams::Create(0.5, 1e-2, 1.5);
  cfg.adaptive.rescale = false;
  cfg.adaptive.dist_adjust = false;
  Rng data_rng(2);
  const Matrix raw = GaussianSample(data_rng, 0.0, 1.0, 20, 6);
  Rng a(9), b(9);
  const PipelineOutput out = RunPipeline(raw, cfg, a);
  const Matrix vanilla = AddNoise(ClipNorm(raw, 1.5), cfg.privacy, b);
  EXPECT_EQ(out.released, vanilla);
  EXPECT_EQ(out.scale, 1.0);
  EXPECT_EQ(out.scaled, out.clipped);
}

TEST(ProtocolTest, TogglesOffSkipsAuxiliaryWork) {
  const VerticalSplit data = SmallBlobs();
  Federation fed(DpConfig(false, false), data.train, 2);
  const RoundMetrics m = fed.RunRound(FirstRows(32));
  for (std::size_t p = 0; p < 2; ++p) {
    EXPECT_EQ(m.kl_loss[p], 0.0);
    EXPECT_EQ(m.cl_loss[p], 0.0);
    EXPECT_FALSE(m.purity[p].has_value());
    EXPECT_EQ(m.delta[p], 2.0 * fed.config().pipeline.privacy.clip_threshold);
    EXPECT_FALSE(fed.passive(p).buffers().assignment.has_value());
  }
  EXPECT_EQ(fed.timings().seconds[static_cast<std::size_t>(Stage::kRescale)], 0.0);
  EXPECT_EQ(fed.timings().seconds[static_cast<std::size_t>(Stage::kDistAdjust)], 0.0);
}

TEST(ProtocolTest, UnprotectedModeReleasesRawEmbeddings) {
  PipelineConfig cfg;
  cfg.mode = ProtectionMode::kUnprotected;
  cfg.privacy = PrivacyParams::Create(0.5, 1e-2, 0.1);
  Rng data_rng(2), rng(3);
  const Matrix raw = GaussianSample(data_rng, 0.0, 5.0, 10, 4);
  std::vector<int> stages;
  EXPECT_EQ(RunPipeline(raw, cfg, rng, nullptr, &stages).released, raw);
  EXPECT_TRUE(stages.empty());
}

TEST(ProtocolTest, MechanismPreconditionsHoldPerRound) {
  const VerticalSplit data = SmallBlobs();
  {
    Federation fed(DpConfig(false, false), data.train, 2);
    for (int r = 0; r < 3; ++r)
      for (bool ok : fed.RunRound(FirstRows(32)).mechanism_ok) EXPECT_TRUE(ok);
  }
  FederationConfig weak = DpConfig(false, false);
  weak.pipeline.privacy.sigma *= 0.5;
  Federation fed(weak, data.train, 2);
  for (bool ok : fed.RunRound(FirstRows(32)).mechanism_ok) EXPECT_FALSE(ok);
}

TEST(ProtocolTest, AuxiliaryLossesAndPurityAreReported) {
  const VerticalSplit data = SmallBlobs(2, 3.0);
  Federation fed(DpConfig(), data.train, 11);
  Rng rng(12);
  bool any_purity = false;
  for (int r = 0; r < 5; ++r) {
    const RoundMetrics m = fed.RunRound(SampleAlignedBatch(data.train.rows(), 32, rng));
    ASSERT_EQ(m.delta.size(), 2u);
    for (std::size_t p = 0; p < 2; ++p) {
      EXPECT_GT(m.delta[p], 0.0);
      EXPECT_LE(m.delta[p], 2.0 * fed.config().pipeline.privacy.clip_threshold);
      EXPECT_GE(m.kl_loss[p], 0.0);
      EXPECT_LE(m.cl_loss[p], 0.0);
      if (m.purity[p]) {
        any_purity = true;
        EXPECT_GE(*m.purity[p], 0.25);
        EXPECT_LE(*m.purity[p], 1.0);
      }
    }
  }
  EXPECT_TRUE(any_purity);
}

// ---------------------------------------------------------------------------
// Noise-off equivalence with a centralized model

DenseNet Compose(const DenseNet& lower, const DenseNet& upper) {
  std::vector<DenseLayer> layers = lower.layers();
  layers.insert(layers.end(), upper.layers().begin(), upper.layers().end());
  return DenseNet(std::move(layers));
}

void ExpectCentralizedTrajectory(ProtectionMode mode) {
  const VerticalSplit data = SmallBlobs(1, 1.0, 60);
  FederationConfig cfg;
  cfg.training.learning_rate = 0.1;
  cfg.training.batch_size = 16;
  cfg.pipeline.mode = mode;
  cfg.pipeline.privacy = PrivacyParams::Create(0.5, 1e-2, 1e6);
  cfg.pipeline.privacy.sigma = 0.0;
  cfg.pipeline.adaptive.rescale = false;
  cfg.pipeline.adaptive.dist_adjust = false;
  cfg.shape.extractor_hidden = {};
  cfg.shape.embedding_dim = data.train.party_features[0].cols();
  cfg.shape.embedding_activation = Activation::kIdentity;
  cfg.shape.head_hidden = {10};
  Federation fed(cfg, data.train, 21);
  // Identity extractor.
  DenseLayer& layer = fed.passive(0).mutable_extractor().mutable_layers()[0];
  layer.weights = Matrix(layer.in_dim(), layer.out_dim());
  for (std::size_t i = 0; i < layer.in_dim(); ++i) layer.weights(i, i) = 1.0;

  DenseNet central = Compose(fed.passive(0).extractor(), fed.active().head());
  const Matrix& x = data.train.party_features[0];
  Rng batch_rng(22);
  double worst = 0.0;
  for (int step = 0; step < 100; ++step) {
    const std::vector<std::size_t> idx = SampleAlignedBatch(x.rows(), 16, batch_rng);
    const double vfl = fed.RunRound(idx).loss;
    std::vector<int> y(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) y[i] = data.train.labels[idx[i]];
    const LossAndGradient ce = CrossEntropySoftmax(central.Forward(SelectRows(x, idx)), y);
    SgdStep(central, central.Backward(ce.gradient).params, cfg.training);
    worst = std::max(worst, std::fabs(vfl - ce.loss));
  }
  EXPECT_LE(worst, 1e-9);
  const DenseNet after = Compose(fed.passive(0).extractor(), fed.active().head());
  for (std::size_t l = 0; l < after.layers().size(); ++l)
    for (std::size_t k = 0; k < after.layers()[l].weights.size(); ++k)
      EXPECT_NEAR(after.layers()[l].weights.data()[k], central.layers()[l].weights.data()[k],
                  1e-9);
}

TEST(ProtocolTest, ZeroNoiseDpMatchesCentralizedModel) {
  ExpectCentralizedTrajectory(ProtectionMode::kDifferentialPrivacy);
}

TEST(ProtocolTest, UnprotectedMatchesCentralizedModel) {
  ExpectCentralizedTrajectory(ProtectionMode::kUnprotected);
}

// ---------------------------------------------------------------------------
// Batch sampling

TEST(SampleAlignedBatchTest, FullBatchIsPermutation) {
  Rng rng(1);
  std::vector<std::size_t> idx = SampleAlignedBatch(50, 50, rng);
  std::sort(idx.begin(), idx.end());
  EXPECT_EQ(idx, FirstRows(50));
}

TEST(SampleAlignedBatchTest, DeterministicPerSeed) {
  Rng a(5), b(5), c(6);
  const auto x = SampleAlignedBatch(1000, 32, a);
  EXPECT_EQ(x, SampleAlignedBatch(1000, 32, b));
  EXPECT_NE(x, SampleAlignedBatch(1000, 32, c));
  EXPECT_EQ(std::set<std::size_t>(x.begin(), x.end()).size(), 32u);
}

TEST(SampleAlignedBatchTest, OversizedBatchThrows) {
  Rng rng(1);
  EXPECT_THROW(SampleAlignedBatch(10, 11, rng), std::invalid_argument);
}

TEST(SampleAlignedBatchTest, InclusionFrequencyIsUniform) {
  const std::size_t total = 1000, n = 32, draws = 10000;
  std::vector<double> counts(total, 0.0);
  Rng rng(77);
  for (std::size_t d = 0; d < draws; ++d)
    for (std::size_t i : SampleAlignedBatch(total, n, rng)) counts[i] += 1.0;
  const double p = static_cast<double>(n) / static_cast<double>(total);
  const double mean = p * static_cast<double>(draws);
  const double se = std::sqrt(static_cast<double>(draws) * p * (1.0 - p));
  std::size_t outside = 0;
  double worst = 0.0;
  for (double c : counts) {
    const double z = std::fabs(c - mean) / se;
    outside += z > 3.0;
    worst = std::max(worst, z);
  }
  // 3 SE bounds hold per index with probability 0.9973; over 1000 indices a
  // handful may fall outside by chance alone.
  EXPECT_LE(outside, 10u);
  EXPECT_LT(worst, 5.0);
}

// ---------------------------------------------------------------------------
// Training loop

TEST(TrainTest, ZeroEpochsIsNoOp) {
  const VerticalSplit data = SmallBlobs();
  FederationConfig cfg = DpConfig();
  cfg.training.epochs = 0;
  Federation fed(cfg, data.train, 3);
  const std::vector<std::uint8_t> before = SerializeNet(fed.passive(0).extractor());
  const TrainingHistory h = Train(fed, data);
  EXPECT_TRUE(h.epochs.empty());
  EXPECT_EQ(h.rounds, 0u);
  EXPECT_EQ(SerializeNet(fed.passive(0).extractor()), before);
}

TEST(TrainTest, SeparableNoiseOffReachesHighAccuracy) {
  const VerticalSplit data = SmallBlobs(2, 4.0, 100);
  FederationConfig cfg = DpConfig(false, false);
  cfg.pipeline.mode = ProtectionMode::kUnprotected;
  cfg.training.epochs = 10;
  Federation fed(cfg, data.train, 4);
  const TrainingHistory h = Train(fed, data);
  ASSERT_EQ(h.epochs.size(), 10u);
  EXPECT_GE(h.epochs.back().train_accuracy, 0.95);
  EXPECT_GE(h.epochs.back().test_accuracy, 0.95);
  EXPECT_EQ(h.rounds, 10u * (data.train.rows() / 32));
}

TEST(TrainTest, BatchLargerThanDataThrows) {
  const VerticalSplit data = SmallBlobs(2, 1.0, 4);
  Federation fed(DpConfig(), data.train, 1);
  EXPECT_THROW(Train(fed, data), std::invalid_argument);
}

TEST(TrainTest, IdenticalSeedsGiveIdenticalHistories) {
  const VerticalSplit data = SmallBlobs();
  std::ostringstream log_a, log_b;
  Federation a(DpConfig(), data.train, 9), b(DpConfig(), data.train, 9);
  a.set_event_log(&log_a);
  b.set_event_log(&log_b);
  const TrainingHistory ha = Train(a, data), hb = Train(b, data);
  ASSERT_EQ(ha.epochs.size(), hb.epochs.size());
  for (std::size_t e = 0; e < ha.epochs.size(); ++e) {
    EXPECT_EQ(ha.epochs[e].loss, hb.epochs[e].loss);
    EXPECT_EQ(ha.epochs[e].test_accuracy, hb.epochs[e].test_accuracy);
    EXPECT_EQ(ha.epochs[e].mean_delta, hb.epochs[e].mean_delta);
    EXPECT_EQ(ha.epochs[e].purity, hb.epochs[e].purity);
  }
  EXPECT_EQ(log_a.str(), log_b.str());
  EXPECT_EQ(SerializeNet(a.active().head()), SerializeNet(b.active().head()));
  Federation c(DpConfig(), data.train, 10);
  EXPECT_NE(Train(c, data).epochs.back().loss, ha.epochs.back().loss);
}

TEST(TrainTest, EventLogHasOneLinePerRound) {
  const VerticalSplit data = SmallBlobs();
  std::ostringstream log;
  Federation fed(DpConfig(), data.train, 9);
  fed.set_event_log(&log);
  const TrainingHistory h = Train(fed, data);
  std::istringstream in(log.str());
  std::string line;
  std::uint64_t n = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(line.rfind("{\"round\":" + std::to_string(n) + ",", 0), 0u) << line;
    EXPECT_NE(line.find("\"delta\":["), std::string::npos);
    EXPECT_NE(line.find("\"purity\":["), std::string::npos);
    ++n;
  }
  EXPECT_EQ(n, h.rounds);
}

TEST(VflModelTest, NoiseFreeEvaluationIsDeterministic) {
  const VerticalSplit data = SmallBlobs();
  Federation fed(DpConfig(), data.train, 9);
  Train(fed, data);
  const VflModel model = fed.Snapshot();
  Rng a(1), b(2);
  EXPECT_EQ(model.Accuracy(data.test, a, false), model.Accuracy(data.test, b, false));
  Rng c(1), d(1);
  EXPECT_EQ(model.Accuracy(data.test, c, true), model.Accuracy(data.test, d, true));
}

}  // namespace
}  // namespace vflafe
