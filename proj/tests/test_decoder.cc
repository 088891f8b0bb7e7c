// tests/test_decoder.cc

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

#include <random>

#include "avsd/decoder.h"
#include "avsd/encoders.h"
#include "test_util.h"

namespace avsd {
namespace {

constexpr int kDv = 32, kDa = 64;

struct Inputs {
  Matrix visual, audio, speaker;
};

Inputs random_inputs(uint64_t seed, int N, int T, int dv = kDv, int da = kDa) {
  std::mt19937_64 rng(seed);
  return {testing::random_matrix(rng, N * T, dv), testing::random_matrix(rng, T, da),
          testing::random_matrix(rng, N, da)};
}

Inputs permute(const Inputs &in, const std::vector<int> &perm) {
  const int N = static_cast<int>(perm.size()), T = static_cast<int>(in.audio.rows());
  Inputs out = in;
  for (int j = 0; j < N; ++j) {
    out.visual.middleRows(j * T, T) = in.visual.middleRows(perm[j] * T, T);
    out.speaker.row(j) = in.speaker.row(perm[j]);
  }
  return out;
}

TEST(Fusion, ShapeArithmetic) {
  const Inputs in = random_inputs(1, 3, 10);
  const Matrix f = fuse_embeddings(in.visual, in.audio, in.speaker);
  EXPECT_EQ(f.rows(), 3 * 10);
  EXPECT_EQ(f.cols(), 160);
  for (auto [dv, da] : {std::pair{8, 4}, {32, 64}, {16, 128}}) {
    const Inputs w = random_inputs(2, 2, 5, dv, da);
    EXPECT_EQ(fuse_embeddings(w.visual, w.audio, w.speaker).cols(), dv + 2 * da);
  }
}

TEST(Fusion, BroadcastIdentities) {
  const int N = 3, T = 10;
  const Inputs in = random_inputs(3, N, T);
  const Matrix f = fuse_embeddings(in.visual, in.audio, in.speaker);
  for (int n = 0; n < N; ++n)
    for (int t = 0; t < T; ++t) {
      EXPECT_EQ(RowVector(f.block(n * T + t, 0, 1, kDv)), RowVector(in.visual.row(n * T + t)));
      EXPECT_EQ(RowVector(f.block(n * T + t, kDv, 1, kDa)), RowVector(f.block(t, kDv, 1, kDa)));
      EXPECT_EQ(RowVector(f.block(n * T + t, kDv + kDa, 1, kDa)), RowVector(f.block(n * T, kDv + kDa, 1, kDa)));
    }
  EXPECT_EQ(RowVector(f.block(T + 4, kDv, 1, kDa)), RowVector(in.audio.row(4)));
  EXPECT_EQ(RowVector(f.block(2 * T + 7, kDv + kDa, 1, kDa)), RowVector(in.speaker.row(2)));
}

TEST(Fusion, MismatchReportsBothShapes) {
  const Inputs in = random_inputs(4, 3, 10);
  try {
    fuse_embeddings(in.visual, Matrix(in.audio.topRows(9)), in.speaker);
    FAIL();
  } catch (const ShapeError &e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(30, 32)"), std::string::npos) << msg;
    EXPECT_NE(msg.find("(9, 64)"), std::string::npos) << msg;
  }
  EXPECT_THROW(fuse_embeddings(in.visual, in.audio, Matrix(in.speaker.topRows(2))), ShapeError);
}

TEST(DecoderKind, ParseAndNames) {
  for (const auto &name : decoder_kind_names()) EXPECT_EQ(decoder_kind_name(parse_decoder_kind(name)), name);
  try {
    parse_decoder_kind("rnn");
    FAIL();
  } catch (const Error &e) {
    EXPECT_NE(std::string(e.what()).find("cross_attention"), std::string::npos);
  }
}

class EachDecoder : public ::testing::TestWithParam<DecoderKind> {
 protected:
  void SetUp() override {
    DecoderConfig c;
    c.kind = GetParam();
    decoder = make_decoder(group, c, kDv, kDa, rng);
  }
  nn::Rng rng{5};
  nn::ParameterGroup group{"decoder"};
  std::unique_ptr<Decoder> decoder;
};

TEST_P(EachDecoder, ShapeAndRange) {
  const Inputs in = random_inputs(6, 3, 37);
  const Matrix p = decode(*decoder, in.visual, in.audio, in.speaker);
  EXPECT_EQ(p.rows(), 37);
  EXPECT_EQ(p.cols(), 3);
  EXPECT_TRUE(p.allFinite());
  EXPECT_GT(p.minCoeff(), 0.0f);
  EXPECT_LT(p.maxCoeff(), 1.0f);
}

TEST_P(EachDecoder, SpeakerPermutationEquivariance) {
  const Inputs in = random_inputs(7, 4, 24);
  const std::vector<int> perm{3, 1, 0, 2};
  const Matrix a = decode(*decoder, in.visual, in.audio, in.speaker);
  const Inputs pin = permute(in, perm);
  const Matrix b = decode(*decoder, pin.visual, pin.audio, pin.speaker);
  for (int j = 0; j < 4; ++j)
    for (int t = 0; t < 24; ++t) EXPECT_NEAR(b(t, j), a(t, perm[j]), 1e-5) << "column " << j << " frame " << t;
}

TEST_P(EachDecoder, GradientReachesEveryParameter) {
  const Inputs in = random_inputs(8, 3, 20);
  std::mt19937_64 r(9);
  const Matrix target = (testing::random_matrix(r, 3 * 20, 1, 0, 1).array() > 0.5f).cast<Real>();
  group.zero_grad();
  ag::Var p = (*decoder)(ag::constant(in.visual), ag::constant(in.audio), ag::constant(in.speaker));
  ag::backward(ag::binary_cross_entropy(p, target));
  for (const auto &[name, v] : group.params()) {
    ASSERT_TRUE(v.has_grad()) << name << " has no gradient";
    EXPECT_TRUE(v.grad().allFinite()) << name;
    EXPECT_GT(v.grad().cwiseAbs().maxCoeff(), 0.0f) << name << " gradient is zero";
  }
}

TEST_P(EachDecoder, HeadGradientMatchesFiniteDifference) {
  const Inputs in = random_inputs(10, 2, 16);
  std::mt19937_64 r(11);
  const Matrix target = (testing::random_matrix(r, 2 * 16, 1, 0, 1).array() > 0.5f).cast<Real>();
  auto loss = [&] {
    return ag::binary_cross_entropy((*decoder)(ag::constant(in.visual), ag::constant(in.audio),
                                               ag::constant(in.speaker)),
                                    target);
  };
  group.zero_grad();
  ag::backward(loss());
  ag::Var w = decoder->head().weight();
  const Matrix analytic = w.grad();
  for (Eigen::Index i = 0; i < w.rows(); i += 5) {
    const Real orig = w.value()(i, 0);
    const Real eps = 1e-2f;
    ag::NoGradGuard g;
    w.mutable_value()(i, 0) = orig + eps;
    const double up = loss().item();
    w.mutable_value()(i, 0) = orig - eps;
    const double down = loss().item();
    w.mutable_value()(i, 0) = orig;
    const double numeric = (up - down) / (2 * eps);
    EXPECT_NEAR(analytic(i, 0), numeric, 2e-3 + 2e-2 * std::abs(numeric)) << "head weight " << i;
  }
}

INSTANTIATE_TEST_SUITE_P(Kinds, EachDecoder,
                         ::testing::Values(DecoderKind::kTransformer, DecoderKind::kConformer,
                                           DecoderKind::kCrossAttention, DecoderKind::kBlstm),
                         [](const auto &info) { return decoder_kind_name(info.param); });

TEST(CrossAttention, ZeroAudioContributionIsIdentity) {
  nn::Rng rng(12);
  nn::ParameterGroup group("decoder");
  DecoderConfig c;
  c.kind = DecoderKind::kCrossAttention;
  CrossAttentionDecoder dec(group, c, kDv, kDa, rng);
  ag::Var vb = dec.audio_attention().value_proj().bias();
  vb.mutable_value().setZero();
  std::mt19937_64 r(13);
  const Matrix q = testing::random_matrix(r, 3 * 6, c.model_dim);
  const Matrix out = dec.cross_audio(ag::constant(q), ag::constant(Matrix::Zero(3 * 6, c.model_dim)), 3).value();
  EXPECT_EQ(out, q);
}

TEST(Blstm, TimeReversalReversesOutput) {
  nn::Rng rng(14);
  nn::ParameterGroup group("decoder");
  DecoderConfig c;
  c.kind = DecoderKind::kBlstm;
  auto dec = make_decoder(group, c, kDv, kDa, rng);
  const int N = 2, T = 24;  // multiple of the pooling stride
  const Inputs in = random_inputs(15, N, T);
  Inputs rev = in;
  for (int n = 0; n < N; ++n) rev.visual.middleRows(n * T, T) = in.visual.middleRows(n * T, T).colwise().reverse();
  rev.audio = in.audio.colwise().reverse();
  const Matrix a = decode(*dec, in.visual, in.audio, in.speaker);
  const Matrix b = decode(*dec, rev.visual, rev.audio, rev.speaker);
  EXPECT_TRUE(b.isApprox(a.colwise().reverse(), 1e-5f));

  // A palindromic input gives a palindromic output.
  Inputs pal = in;
  for (int n = 0; n < N; ++n)
    for (int t = T / 2; t < T; ++t) pal.visual.row(n * T + t) = pal.visual.row(n * T + T - 1 - t);
  for (int t = T / 2; t < T; ++t) pal.audio.row(t) = pal.audio.row(T - 1 - t);
  const Matrix p = decode(*dec, pal.visual, pal.audio, pal.speaker);
  EXPECT_TRUE(p.isApprox(p.colwise().reverse(), 1e-5f));
}

TEST(DecoderFactory, InvalidConfig) {
  nn::Rng rng(16);
  nn::ParameterGroup group("decoder");
  DecoderConfig c;
  c.heads = 3;
  EXPECT_THROW(make_decoder(group, c, kDv, kDa, rng), Error);
}

}  // namespace
}  // namespace avsd
