// include/avsd/metrics.h

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

#pragma once

// Frame-based diarization error rate with an optimal one-to-one speaker
// mapping. Per frame, with R the active reference speakers and H the active
// hypothesis speakers:
//   miss   += max(|R| - |H|, 0)
//   fa     += max(|H| - |R|, 0)
//   spkerr += min(|R|, |H|) - |R n mapped(H)|
// and each total is reported as a percentage of sum_t |R|.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "avsd/rttm.h"

namespace avsd {

/// hyp_to_ref[h] is the reference column assigned to hypothesis column h,
/// or -1 when h is unmapped.
struct SpeakerMapping {
  std::vector<int> hyp_to_ref;
};

struct DerCounts {
  int64_t miss = 0;
  int64_t fa = 0;
  int64_t spkerr = 0;
  int64_t ref_speech = 0;

  DerCounts &operator+=(const DerCounts &o);
};

struct DerBreakdown {
  double miss = 0.0;
  double fa = 0.0;
  double spkerr = 0.0;
  double der = 0.0;  // miss + fa + spkerr
  std::map<std::string, std::string> mapping;  // hypothesis speaker -> reference speaker
};

/// Overlap (co-active frame count) between every hypothesis and reference
/// column: result(h, r).
std::vector<std::vector<int64_t>> speaker_overlap(const ActivityMatrix &ref, const ActivityMatrix &hyp);

/// Maximises total co-active frames. Exhaustive over permutations when both
/// sides have at most 8 speakers, Hungarian assignment otherwise. Pairs with
/// zero overlap are left unmapped.
SpeakerMapping optimal_speaker_mapping(const ActivityMatrix &ref, const ActivityMatrix &hyp);
SpeakerMapping exhaustive_speaker_mapping(const ActivityMatrix &ref, const ActivityMatrix &hyp);
SpeakerMapping hungarian_speaker_mapping(const ActivityMatrix &ref, const ActivityMatrix &hyp);

DerCounts der_counts(const ActivityMatrix &ref, const ActivityMatrix &hyp, const SpeakerMapping &mapping);
DerBreakdown breakdown_from_counts(const DerCounts &counts);
DerBreakdown compute_der(const ActivityMatrix &ref, const ActivityMatrix &hyp);

/// Scores segment lists recording by recording (recordings taken from the
/// reference) at the given frame rate, pooling frame counts across
/// recordings. Mapping keys are "recording/speaker".
DerBreakdown score_segments(const std::vector<Segment> &ref, const std::vector<Segment> &hyp,
                            double frame_rate = 100.0);

/// Reference/hypothesis activity grids for one recording on a shared frame
/// axis long enough for both.
std::pair<ActivityMatrix, ActivityMatrix> activity_pair(const std::vector<Segment> &ref,
                                                        const std::vector<Segment> &hyp,
                                                        const std::string &recording_id, double frame_rate);

/// "MISS x.xx FA x.xx SPKERR x.xx DER x.xx"
std::string format_der(const DerBreakdown &der);

}  // namespace avsd
