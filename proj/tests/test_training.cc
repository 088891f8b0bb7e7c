// tests/test_training.cc

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "avsd/training.h"
#include "test_util.h"

namespace avsd {
namespace {

const DatasetSplit &small_split() {
  static const DatasetSplit split = [] {
    SplitConfig c;
    c.scenario.duration = 30.0;
    c.train_count = 8;
    c.dev_count = 1;
    c.test_count = 2;
    c.train_identities = 8;
    c.dev_identities = 3;
    c.test_identities = 4;
    return make_split(c);
  }();
  return split;
}

std::vector<ScenarioBundle> tiny_data() {
  const auto &s = small_split();
  return {s.train[0], s.train[1]};
}

std::vector<Matrix> snapshot(const nn::ParameterGroup &g) { return g.values(); }

TEST(DiarizationLoss, ClampFloor) {
  ActivityMatrix y;
  y.values = Matrix::Ones(4, 2);
  EXPECT_NEAR(diarization_loss(Matrix::Zero(4, 2), y), -std::log(1e-7), 1e-4);
  y.values.setZero();
  EXPECT_NEAR(diarization_loss(Matrix::Zero(4, 2), y), -std::log1p(-1e-7), 1e-9);
  EXPECT_NEAR(diarization_loss(Matrix::Ones(4, 2), y), -std::log(1e-7), 1e-4);
}

TEST(DiarizationLoss, HalfIsLn2) {
  std::mt19937_64 rng(1);
  const ActivityMatrix y = testing::random_activity(rng, 20, 3);
  EXPECT_NEAR(diarization_loss(Matrix::Constant(20, 3, 0.5f), y), std::log(2.0), 1e-7);
}

TEST(DiarizationLoss, MatchesScalarLoop) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const ActivityMatrix y = testing::random_activity(rng, 30, 4);
    const Matrix p = testing::random_matrix(rng, 30, 4, 0, 1);
    double total = 0;
    for (int t = 0; t < 30; ++t)
      for (int n = 0; n < 4; ++n) {
        const double q = std::clamp<double>(p(t, n), 1e-7, 1 - 1e-7);
        total += y.values(t, n) > 0.5f ? -std::log(q) : -std::log(1 - q);
      }
    EXPECT_NEAR(diarization_loss(p, y), total / 120, 1e-5);
  }
  ActivityMatrix bad = testing::random_activity(rng, 30, 3);
  EXPECT_THROW(diarization_loss(Matrix::Zero(30, 4), bad), ShapeError);
}

TEST(AamSoftmax, NoMarginUnitScaleIsSoftmax) {
  std::mt19937_64 rng(3);
  const Matrix cos = testing::random_matrix(rng, 6, 5, -0.9, 0.9);
  const std::vector<int> labels{0, 4, 2, 2, 1, 3};
  double ce = 0;
  for (int r = 0; r < 6; ++r) {
    double z = 0;
    for (int c = 0; c < 5; ++c) z += std::exp(cos(r, c));
    ce += -(cos(r, labels[r]) - std::log(z));
  }
  EXPECT_NEAR(ag::aam_softmax_loss(ag::constant(cos), labels, 0.0f, 1.0f).item(), ce / 6, 1e-5);
  for (Real s : {1.0f, 8.0f, 32.0f})
    EXPECT_GE(ag::aam_softmax_loss(ag::constant(cos), labels, 0.2f, s).item(),
              ag::aam_softmax_loss(ag::constant(cos), labels, 0.0f, s).item());
}

TEST(Pretraining, SingleIdentityIsError) {
  // Every recording keeps only its first speaker, renamed to one shared identity.
  auto data = tiny_data();
  for (auto &s : data) {
    const std::string keep = s.speaker_identities[0];
    std::erase_if(s.truth, [&](const Segment &g) { return g.speaker_id != keep; });
    for (auto &g : s.truth) g.speaker_id = "spk000";
    s.speaker_identities = {"spk000"};
    s.lip_rois.resize(1);
    s.lip_rois[0].speaker_id = "spk000";
  }
  AvsdModel m(ModelConfig{}, 1);
  EXPECT_THROW(pretrain_speaker_encoder(data, m.se, m.se_group, {}), Error);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.learning_rate = 0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.freeze_epochs = 0;
  c.joint_epochs = 0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Training, FreezeSchedule) {
  const auto data = tiny_data();
  AvsdModel m(ModelConfig{}, 4);
  TrainConfig c;
  c.freeze_epochs = 1;
  c.joint_epochs = 1;
  c.learning_rate = 1e-3;
  const auto lip0 = snapshot(m.lip_group), vad0 = snapshot(m.vad_group), ae0 = snapshot(m.ae_group),
             se0 = snapshot(m.se_group), dec0 = snapshot(m.decoder_group);
  std::vector<Matrix> ae1;
  TrainState st;
  train(m, data, c, st, [&](int epoch, const TrainState &) {
    if (epoch != 1) return;
    EXPECT_EQ(snapshot(m.ae_group), ae0) << "audio encoder moved while frozen";
    EXPECT_EQ(snapshot(m.se_group), se0);
    EXPECT_NE(snapshot(m.decoder_group), dec0);
    ae1 = snapshot(m.ae_group);
  });
  EXPECT_EQ(st.epoch, 2);
  EXPECT_EQ(st.loss_history.size(), 2u);
  EXPECT_NE(snapshot(m.ae_group), ae1) << "audio encoder did not train after unfreezing";
  EXPECT_EQ(snapshot(m.se_group), se0);
  EXPECT_EQ(snapshot(m.lip_group), lip0);
  EXPECT_EQ(snapshot(m.vad_group), vad0);
}

TEST(Training, SpeakerEncoderJoint) {
  const auto data = tiny_data();
  AvsdModel m(ModelConfig{}, 5);
  TrainConfig c;
  c.freeze_epochs = 0;
  c.joint_epochs = 1;
  c.ae_joint = false;
  c.se_joint = true;
  const auto ae0 = snapshot(m.ae_group), se0 = snapshot(m.se_group);
  TrainState st;
  train(m, data, c, st);
  EXPECT_EQ(snapshot(m.ae_group), ae0);
  EXPECT_NE(snapshot(m.se_group), se0);
}

TEST(Training, DeterministicUnderSeed) {
  const auto data = tiny_data();
  TrainConfig c;
  c.freeze_epochs = 1;
  c.joint_epochs = 1;
  std::vector<std::vector<double>> runs;
  for (int k = 0; k < 2; ++k) {
    AvsdModel m(ModelConfig{}, 6);
    TrainState st;
    train(m, data, c, st);
    runs.push_back(st.loss_history);
  }
  EXPECT_EQ(runs[0], runs[1]);
}

TEST(Training, InvalidInputs) {
  AvsdModel m(ModelConfig{}, 7);
  TrainState st;
  EXPECT_THROW(train(m, {}, TrainConfig{}, st), Error);
  TrainConfig c;
  c.decoder_kind = DecoderKind::kBlstm;
  EXPECT_THROW(train(m, tiny_data(), c, st), Error);
}

TEST(Smoothing, MedianFilterMatchesNaive) {
  std::mt19937_64 rng(8);
  const Matrix x = testing::random_matrix(rng, 40, 2, 0, 1);
  const Matrix y = median_filter(x, 5);
  for (int t = 0; t < 40; ++t)
    for (int n = 0; n < 2; ++n) {
      std::vector<Real> w;
      for (int j = t - 2; j <= t + 2; ++j) w.push_back(x(std::clamp(j, 0, 39), n));
      std::sort(w.begin(), w.end());
      EXPECT_EQ(y(t, n), w[2]);
    }
  EXPECT_THROW(median_filter(x, 4), Error);
}

TEST(Smoothing, IdempotentAndWindowOne) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix x = testing::random_matrix(rng, 200, 3, 0, 1);
    const Matrix once = median_smooth(x, 11);
    EXPECT_EQ(median_smooth(once, 11), once);
    EXPECT_EQ(median_smooth(x, 1), x);
  }
}

TEST(Smoothing, DecideActivityThresholdIsStrict) {
  Matrix p = Matrix::Constant(30, 1, 0.5f);
  p.bottomRows(15).setConstant(0.51f);
  const ActivityMatrix a = decide_activity(p, 100.0, {"a"}, 1, 0.5);
  EXPECT_EQ(a.values.topRows(15).sum(), 0.0f);
  EXPECT_EQ(a.values.bottomRows(15).sum(), 15.0f);
  EXPECT_THROW(decide_activity(p, 100.0, {"a", "b"}), ShapeError);
}

TEST(Inference, DecisionsFollowProbabilities) {
  const auto &split = small_split();
  AvsdModel m(ModelConfig{}, 10);
  for (bool oracle : {true, false}) {
    InferenceConfig ic;
    ic.oracle_embeddings = oracle;
    const auto r = run_inference(m, split.test[0], ic);
    EXPECT_EQ(r.probs.rows(), split.test[0].num_frames());
    EXPECT_EQ(r.probs.cols(), 3);
    const ActivityMatrix d = decide_activity(r.probs, 100.0, split.test[0].speaker_identities, 11, 0.5);
    EXPECT_EQ(r.decisions.values, d.values);
    EXPECT_EQ(r.segments, activity_to_segments(d, 0.0, split.test[0].recording_id));
    for (const auto &e : r.embeddings) {
      EXPECT_EQ(e.source, oracle ? EmbeddingSource::kOracle : EmbeddingSource::kVisualEstimated);
      EXPECT_NEAR(e.values.norm(), 1.0, 1e-6);
    }
  }
}

TEST(Inference, MissingStreams) {
  AvsdModel m(ModelConfig{}, 11);
  ScenarioBundle s = small_split().test[0];
  const std::string victim = s.speaker_identities[1];
  s.lip_rois.erase(s.lip_rois.begin() + 1);
  try {
    run_inference(m, s, {});
    FAIL();
  } catch (const Error &e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("missing stream"), std::string::npos) << msg;
    EXPECT_NE(msg.find(victim), std::string::npos) << msg;
  }
  s = small_split().test[0];
  s.audio_features.resize(0, 0);
  EXPECT_THROW(run_inference(m, s, {}), Error);
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
  const auto data = tiny_data();
  TrainConfig c;
  c.freeze_epochs = 1;
  c.joint_epochs = 1;
  c.seed = 3;

  AvsdModel full(ModelConfig{}, 12);
  TrainState full_state;
  train(full, data, c, full_state);

  const auto dir = std::filesystem::temp_directory_path() / "avsd_ckpt_test";
  std::filesystem::remove_all(dir);
  {
    AvsdModel m(ModelConfig{}, 12);
    TrainState st;
    TrainConfig first = c;
    first.joint_epochs = 0;
    train(m, data, first, st);
    save_checkpoint(dir, m, st, c);
  }
  TrainState st;
  TrainConfig loaded_config;
  auto resumed = load_checkpoint(dir, st, loaded_config);
  EXPECT_EQ(st.epoch, 1);
  EXPECT_EQ(loaded_config.seed, 3u);
  EXPECT_EQ(loaded_config.total_epochs(), 2);
  ASSERT_TRUE(st.optimizer);
  train(*resumed, data, loaded_config, st);
  EXPECT_EQ(st.loss_history, full_state.loss_history);
  for (auto *g : full.groups()) EXPECT_EQ(snapshot(*g), snapshot(*resumed->group(g->name()))) << g->name();
  EXPECT_TRUE(std::filesystem::exists(dir / "loss.txt"));
  std::filesystem::remove_all(dir);
  EXPECT_THROW(load_checkpoint(dir, st, loaded_config), Error);
}

class LossCurve : public ::testing::TestWithParam<DecoderKind> {};

TEST_P(LossCurve, DecreasesOverFirstFiveEpochs) {
  const auto &data = small_split().train;
  std::vector<std::vector<double>> curves;
  for (uint64_t seed : {1, 2, 3}) {
    ModelConfig mc;
    mc.decoder.kind = GetParam();
    AvsdModel m(mc, seed);
    TrainConfig c;
    c.decoder_kind = GetParam();
    c.freeze_epochs = 5;
    c.joint_epochs = 0;
    c.seed = seed;
    TrainState st;
    train(m, data, c, st);
    curves.push_back(st.loss_history);
  }
  std::vector<double> median(5);
  for (int e = 0; e < 5; ++e) {
    std::vector<double> v{curves[0][e], curves[1][e], curves[2][e]};
    std::sort(v.begin(), v.end());
    median[e] = v[1];
    std::cout << "epoch " << e + 1 << " median loss " << median[e] << "\n";
  }
  for (int e = 1; e < 5; ++e) EXPECT_LT(median[e], median[e - 1]) << "epoch " << e + 1;
}

INSTANTIATE_TEST_SUITE_P(Kinds, LossCurve, ::testing::Values(DecoderKind::kTransformer, DecoderKind::kCrossAttention),
                         [](const auto &info) { return decoder_kind_name(info.param); });

}  // namespace
}  // namespace avsd
