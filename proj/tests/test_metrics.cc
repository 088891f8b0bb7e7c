// tests/test_metrics.cc

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
#include <functional>
#include <numeric>
#include <random>

#include "avsd/metrics.h"
#include "test_util.h"

namespace avsd {
namespace {

int64_t agreement(const ActivityMatrix &ref, const ActivityMatrix &hyp, const std::vector<int> &hyp_to_ref) {
  int64_t total = 0;
  for (size_t h = 0; h < hyp_to_ref.size(); ++h) {
    if (hyp_to_ref[h] < 0) continue;
    for (int t = 0; t < ref.num_frames(); ++t) total += ref.active(t, hyp_to_ref[h]) && hyp.active(t, static_cast<int>(h));
  }
  return total;
}

// Best agreement over every injective assignment of hypothesis columns to
// reference columns (or to nothing).
int64_t best_agreement(const ActivityMatrix &ref, const ActivityMatrix &hyp) {
  const int H = hyp.num_speakers(), R = ref.num_speakers();
  std::vector<int> assign(H, -1);
  int64_t best = 0;
  std::vector<char> used(R, 0);
  std::function<void(int)> rec = [&](int h) {
    if (h == H) {
      best = std::max(best, agreement(ref, hyp, assign));
      return;
    }
    assign[h] = -1;
    rec(h + 1);
    for (int r = 0; r < R; ++r)
      if (!used[r]) {
        used[r] = 1;
        assign[h] = r;
        rec(h + 1);
        used[r] = 0;
        assign[h] = -1;
      }
  };
  rec(0);
  return best;
}

// Per-frame counts written directly from the definition.
struct Oracle {
  double miss, fa, spkerr, der;
};

Oracle oracle_der(const ActivityMatrix &ref, const ActivityMatrix &hyp, const std::vector<int> &hyp_to_ref) {
  double miss = 0, fa = 0, err = 0, speech = 0;
  for (int t = 0; t < ref.num_frames(); ++t) {
    int nr = 0, nh = 0, both = 0;
    for (int r = 0; r < ref.num_speakers(); ++r) nr += ref.active(t, r);
    for (int h = 0; h < hyp.num_speakers(); ++h) {
      if (!hyp.active(t, h)) continue;
      ++nh;
      if (hyp_to_ref[h] >= 0 && ref.active(t, hyp_to_ref[h])) ++both;
    }
    speech += nr;
    miss += std::max(nr - nh, 0);
    fa += std::max(nh - nr, 0);
    err += std::min(nr, nh) - both;
  }
  return {100 * miss / speech, 100 * fa / speech, 100 * err / speech, 100 * (miss + fa + err) / speech};
}

ActivityMatrix permute_columns(const ActivityMatrix &a, const std::vector<int> &perm) {
  ActivityMatrix out = a;
  for (size_t j = 0; j < perm.size(); ++j) {
    out.values.col(static_cast<Eigen::Index>(j)) = a.values.col(perm[j]);
    out.speaker_order[j] = "h" + std::to_string(j);
  }
  return out;
}

TEST(Mapping, PermutedColumnsGiveInversePermutation) {
  std::mt19937_64 rng(1);
  auto ref = testing::random_activity(rng, 300, 4);
  const std::vector<int> perm{2, 0, 3, 1};
  auto hyp = permute_columns(ref, perm);
  auto m = optimal_speaker_mapping(ref, hyp);
  for (int j = 0; j < 4; ++j) EXPECT_EQ(m.hyp_to_ref[j], perm[j]);
}

TEST(Mapping, SilentExtraSpeakerUnmapped) {
  std::mt19937_64 rng(2);
  auto ref = testing::random_activity(rng, 200, 3);
  ActivityMatrix hyp = ref;
  hyp.values.conservativeResize(Eigen::NoChange, 4);
  hyp.values.col(3).setZero();
  hyp.speaker_order.push_back("silent");
  auto m = optimal_speaker_mapping(ref, hyp);
  EXPECT_EQ(m.hyp_to_ref[3], -1);
  for (int j = 0; j < 3; ++j) EXPECT_EQ(m.hyp_to_ref[j], j);
}

TEST(Mapping, MatchesExhaustiveEnumeration) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto ref = testing::random_activity(rng, 120, 4, 0.3);
    auto hyp = testing::random_activity(rng, 120, 4, 0.3, "h");
    auto m = optimal_speaker_mapping(ref, hyp);
    EXPECT_EQ(agreement(ref, hyp, m.hyp_to_ref), best_agreement(ref, hyp));
  }
}

TEST(Mapping, HungarianMatchesExhaustive) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    std::uniform_int_distribution<int> n(1, 7);
    auto ref = testing::random_activity(rng, 150, n(rng), 0.3);
    auto hyp = testing::random_activity(rng, 150, n(rng), 0.3, "h");
    EXPECT_EQ(agreement(ref, hyp, hungarian_speaker_mapping(ref, hyp).hyp_to_ref),
              agreement(ref, hyp, exhaustive_speaker_mapping(ref, hyp).hyp_to_ref));
  }
}

TEST(Mapping, FrameCountMismatchIsError) {
  std::mt19937_64 rng(5);
  EXPECT_THROW(optimal_speaker_mapping(testing::random_activity(rng, 10, 2), testing::random_activity(rng, 11, 2)),
               Error);
}

TEST(ComputeDer, PerfectHypothesis) {
  std::mt19937_64 rng(6);
  auto ref = testing::random_activity(rng, 500, 3);
  auto d = compute_der(ref, ref);
  EXPECT_EQ(d.miss, 0.0);
  EXPECT_EQ(d.fa, 0.0);
  EXPECT_EQ(d.spkerr, 0.0);
  EXPECT_EQ(d.der, 0.0);
}

TEST(ComputeDer, HandCountedTenFrames) {
  // ref: A on 0-4, B on 5-9; hyp: one speaker on 0-9.
  // Mapping hyp->A (5 shared frames). Frames 0-4 correct; frames 5-9 have
  // |R|=|H|=1 with the wrong speaker: 5 speaker-error frames of 10.
  ActivityMatrix ref, hyp;
  ref.speaker_order = {"A", "B"};
  ref.values = Matrix::Zero(10, 2);
  ref.values.block(0, 0, 5, 1).setOnes();
  ref.values.block(5, 1, 5, 1).setOnes();
  hyp.speaker_order = {"X"};
  hyp.values = Matrix::Ones(10, 1);
  auto d = compute_der(ref, hyp);
  EXPECT_EQ(d.mapping.at("X"), "A");
  EXPECT_DOUBLE_EQ(d.miss, 0.0);
  EXPECT_DOUBLE_EQ(d.fa, 0.0);
  EXPECT_DOUBLE_EQ(d.spkerr, 50.0);
  EXPECT_DOUBLE_EQ(d.der, 50.0);
}

TEST(ComputeDer, MatchesPerFrameOracle) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> n(1, 4);
  for (int trial = 0; trial < 100; ++trial) {
    auto ref = testing::random_activity(rng, 200, n(rng), 0.35);
    auto hyp = testing::random_activity(rng, 200, n(rng), 0.35, "h");
    if (ref.values.sum() == 0) continue;
    auto d = compute_der(ref, hyp);
    auto m = optimal_speaker_mapping(ref, hyp);
    auto o = oracle_der(ref, hyp, m.hyp_to_ref);
    EXPECT_NEAR(d.miss, o.miss, 1e-9);
    EXPECT_NEAR(d.fa, o.fa, 1e-9);
    EXPECT_NEAR(d.spkerr, o.spkerr, 1e-9);
    EXPECT_EQ(d.der, d.miss + d.fa + d.spkerr);
  }
}

TEST(ComputeDer, PermutationInvariance) {
  std::mt19937_64 rng(8);
  auto ref = testing::random_activity(rng, 300, 3, 0.3);
  auto hyp = testing::random_activity(rng, 300, 3, 0.3, "h");
  auto a = compute_der(ref, hyp);
  auto b = compute_der(ref, permute_columns(hyp, {1, 2, 0}));
  EXPECT_EQ(a.miss, b.miss);
  EXPECT_EQ(a.fa, b.fa);
  EXPECT_EQ(a.spkerr, b.spkerr);
}

TEST(ComputeDer, SilentHypothesisSpeakerChangesNothing) {
  std::mt19937_64 rng(9);
  auto ref = testing::random_activity(rng, 300, 3, 0.3);
  auto hyp = testing::random_activity(rng, 300, 2, 0.3, "h");
  auto a = compute_der(ref, hyp);
  hyp.values.conservativeResize(Eigen::NoChange, 3);
  hyp.values.col(2).setZero();
  hyp.speaker_order.push_back("quiet");
  auto b = compute_der(ref, hyp);
  EXPECT_EQ(a.der, b.der);
  EXPECT_EQ(a.miss, b.miss);
}

TEST(ComputeDer, EmptyReferenceIsError) {
  ActivityMatrix ref, hyp;
  ref.speaker_order = {"A"};
  ref.values = Matrix::Zero(10, 1);
  hyp = ref;
  EXPECT_THROW(compute_der(ref, hyp), Error);
}

TEST(ScoreSegments, PoolsRecordings) {
  std::mt19937_64 rng(10);
  auto ref = testing::random_aligned_segments(rng, "r1", 3, 2000);
  auto more = testing::random_aligned_segments(rng, "r2", 2, 2000);
  ref.insert(ref.end(), more.begin(), more.end());
  auto self = score_segments(ref, ref);
  EXPECT_EQ(self.der, 0.0);
  EXPECT_EQ(format_der(self), "MISS 0.00 FA 0.00 SPKERR 0.00 DER 0.00");
  EXPECT_EQ(self.mapping.at("r2/spk1"), "spk1");
}

TEST(FormatDer, FixedLayout) {
  DerBreakdown d;
  d.miss = 4.01;
  d.fa = 5.86;
  d.spkerr = 3.22;
  d.der = 13.09;
  EXPECT_EQ(format_der(d), "MISS 4.01 FA 5.86 SPKERR 3.22 DER 13.09");
}

}  // namespace
}  // namespace avsd
