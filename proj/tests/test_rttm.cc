// tests/test_rttm.cc

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
#include <random>
#include <sstream>

#include "avsd/rttm.h"
#include "test_util.h"

namespace avsd {
namespace {

std::vector<std::string> tokens(const std::string &text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  for (std::string t; in >> t;) out.push_back(t);
  return out;
}

TEST(ParseRttm, SingleLine) {
  auto segs = parse_rttm("SPEAKER rec1 1 0.50 2.00 <NA> <NA> spkA <NA> <NA>");
  ASSERT_EQ(segs.size(), 1u);
  EXPECT_EQ(segs[0], (Segment{"rec1", "spkA", 0.5, 2.0}));
}

TEST(ParseRttm, EmptyInput) {
  EXPECT_TRUE(parse_rttm("").empty());
  EXPECT_TRUE(parse_rttm("\n\n  \n").empty());
}

TEST(ParseRttm, SkipsOtherLineTypes) {
  auto segs = parse_rttm(
      "SPKR-INFO rec1 1 <NA> <NA> <NA> unknown spkA <NA> <NA>\n"
      "SPEAKER rec1 1 1.00 0.25 <NA> <NA> spkB <NA> <NA>\n");
  ASSERT_EQ(segs.size(), 1u);
  EXPECT_EQ(segs[0].speaker_id, "spkB");
}

TEST(ParseRttm, ErrorsNameTheLine) {
  try {
    parse_rttm("SPEAKER rec1 1 0.50 2.00 <NA> <NA> spkA <NA> <NA>\nSPEAKER rec1 1 x 2.00 <NA> <NA> spkA <NA> <NA>\n");
    FAIL();
  } catch (const ParseError &e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
  try {
    parse_rttm("\nSPEAKER rec1 1 0.5\n");
    FAIL();
  } catch (const ParseError &e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_rttm("SPEAKER rec1 1 0.50 -1.00 <NA> <NA> spkA <NA> <NA>"), ParseError);
  EXPECT_THROW(parse_rttm("SPEAKER rec1 1 -0.50 1.00 <NA> <NA> spkA <NA> <NA>"), ParseError);
}

TEST(WriteRttm, SingleSegmentAndEmpty) {
  EXPECT_EQ(write_rttm({{"rec1", "spkA", 0.5, 2.0}}), "SPEAKER rec1 1 0.50 2.00 <NA> <NA> spkA <NA> <NA>\n");
  EXPECT_EQ(write_rttm({}), "");
}

TEST(WriteRttm, SortsByRecordingThenOnset) {
  std::mt19937_64 rng(7);
  auto segs = testing::random_aligned_segments(rng, "recB", 3, 2000);
  auto more = testing::random_aligned_segments(rng, "recA", 2, 2000);
  segs.insert(segs.end(), more.begin(), more.end());
  std::shuffle(segs.begin(), segs.end(), rng);
  const auto back = parse_rttm(write_rttm(segs));
  ASSERT_EQ(back.size(), segs.size());
  for (size_t i = 1; i < back.size(); ++i) {
    const auto &a = back[i - 1], &b = back[i];
    EXPECT_TRUE(a.recording_id < b.recording_id || (a.recording_id == b.recording_id && a.onset <= b.onset));
  }
}

TEST(WriteRttm, RejectsInvalidSegments) {
  EXPECT_THROW(write_rttm({{"r", "s", 0.0, 0.0}}), Error);
  EXPECT_THROW(write_rttm({{"r", "s", -1.0, 1.0}}), Error);
}

TEST(RttmRoundTrip, FiftyLineFileTokenIdentical) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> cents(0, 99999), dur(1, 9999), spk(0, 4);
  std::vector<Segment> segs;
  for (int i = 0; i < 50; ++i)
    segs.push_back({"rec" + std::to_string(i % 3), "spk" + std::to_string(spk(rng)), cents(rng) / 100.0,
                    dur(rng) / 100.0});
  const std::string text = write_rttm(segs);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 50);
  EXPECT_EQ(tokens(write_rttm(parse_rttm(text))), tokens(text));
}

TEST(SegmentsToActivity, FullColumn) {
  auto a = segments_to_activity({{"r", "A", 0.0, 1.0}}, 10.0, 10, {"A"});
  EXPECT_EQ(a.values.col(0).sum(), 10);
}

TEST(SegmentsToActivity, OverlapPreserved) {
  auto a = segments_to_activity({{"r", "A", 0.0, 1.0}, {"r", "B", 0.3, 0.4}}, 10.0, 10, {"A", "B"});
  for (int t = 3; t < 7; ++t) {
    EXPECT_EQ(a.values(t, 0), 1);
    EXPECT_EQ(a.values(t, 1), 1);
  }
  EXPECT_EQ(a.values.col(1).sum(), 4);
}

TEST(SegmentsToActivity, MatchesBruteForceMidpointOracle) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> on(0.0, 9.0), du(0.001, 2.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Segment> segs;
    std::vector<std::string> order{"a", "b", "c"};
    for (int i = 0; i < 15; ++i) segs.push_back({"r", order[i % 3], on(rng), du(rng)});
    const int T = 1000;
    auto a = segments_to_activity(segs, 100.0, T, order);
    for (int t = 0; t < T; ++t)
      for (int s = 0; s < 3; ++s) {
        bool expect = false;
        const double mid = (t + 0.5) / 100.0;
        for (const auto &g : segs)
          if (g.speaker_id == order[s] && mid >= g.onset && mid < g.onset + g.duration) expect = true;
        ASSERT_EQ(a.values(t, s) == 1, expect) << "t=" << t << " s=" << s;
      }
  }
}

TEST(SegmentsToActivity, UnknownSpeakerListed) {
  try {
    segments_to_activity({{"r", "ghost", 0.0, 1.0}}, 100.0, 100, {"A"});
    FAIL();
  } catch (const Error &e) {
    EXPECT_NE(std::string(e.what()).find("ghost"), std::string::npos);
  }
}

TEST(SegmentsToActivity, Monotone) {
  std::mt19937_64 rng(5);
  auto segs = testing::random_aligned_segments(rng, "r", 3, 1000);
  const std::vector<std::string> order{"spk0", "spk1", "spk2"};
  auto before = segments_to_activity(segs, 100.0, 1000, order);
  segs.push_back({"r", "spk1", 3.333, 1.234});
  auto after = segments_to_activity(segs, 100.0, 1000, order);
  EXPECT_TRUE(((after.values - before.values).array() >= 0).all());
}

TEST(ActivityToSegments, RunExtraction) {
  ActivityMatrix a;
  a.frame_rate = 10.0;
  a.speaker_order = {"A"};
  a.values = Matrix::Zero(7, 1);
  a.values(2, 0) = a.values(3, 0) = a.values(4, 0) = 1;
  auto segs = activity_to_segments(a, 0.0, "r");
  ASSERT_EQ(segs.size(), 1u);
  EXPECT_NEAR(segs[0].onset, 0.2, 1e-12);
  EXPECT_NEAR(segs[0].duration, 0.3, 1e-12);
  EXPECT_EQ(activity_to_segments(a, 0.31, "r").size(), 0u);
}

TEST(ActivityToSegments, AllZero) {
  ActivityMatrix a;
  a.speaker_order = {"A", "B"};
  a.values = Matrix::Zero(50, 2);
  EXPECT_TRUE(activity_to_segments(a, 0.0, "r").empty());
}

TEST(ActivityToSegments, FrameAlignedRoundTrip) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    auto segs = testing::random_aligned_segments(rng, "r", 4, 3000);
    const std::vector<std::string> order{"spk0", "spk1", "spk2", "spk3"};
    auto back = activity_to_segments(segments_to_activity(segs, 100.0, 3000, order), 0.0, "r");
    auto expect = merge_segments(segs);
    back = merge_segments(back);
    ASSERT_EQ(back.size(), expect.size());
    for (size_t i = 0; i < back.size(); ++i) {
      EXPECT_EQ(back[i].speaker_id, expect[i].speaker_id);
      EXPECT_NEAR(back[i].onset, expect[i].onset, 1e-9);
      EXPECT_NEAR(back[i].duration, expect[i].duration, 1e-9);
    }
  }
}

TEST(MergeSegments, JoinsTouchingRuns) {
  auto m = merge_segments({{"r", "A", 0.0, 1.0}, {"r", "A", 1.0, 0.5}, {"r", "B", 0.5, 0.2}, {"r", "A", 3.0, 1.0}});
  ASSERT_EQ(m.size(), 3u);
  EXPECT_DOUBLE_EQ(m[0].duration, 1.5);
}

TEST(ActivityMatrix, DuplicateSpeakersRejected) {
  ActivityMatrix a;
  a.speaker_order = {"A", "A"};
  a.values = Matrix::Zero(3, 2);
  EXPECT_THROW(a.validate(), Error);
}

}  // namespace
}  // namespace avsd
