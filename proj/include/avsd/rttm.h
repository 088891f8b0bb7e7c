// include/avsd/rttm.h

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

// RTTM (Rich Transcription Time Marked) reading and writing, and the
// conversion between segment lists and frame-aligned activity grids.
//
// A frame t covers [t/fps, (t+1)/fps); it counts as active for a speaker iff
// its midpoint (t + 0.5)/fps falls inside one of that speaker's half-open
// segments [onset, onset + duration).

#include <string>
#include <string_view>
#include <vector>

#include "avsd/base.h"

namespace avsd {

struct Segment {
  std::string recording_id;
  std::string speaker_id;
  double onset = 0.0;     // seconds
  double duration = 0.0;  // seconds

  double end() const { return onset + duration; }
  bool operator==(const Segment &) const = default;
};

/// Frame x speaker grid of {0,1}.
struct ActivityMatrix {
  Matrix values;  // T x N
  double frame_rate = 100.0;
  std::vector<std::string> speaker_order;

  int num_frames() const { return static_cast<int>(values.rows()); }
  int num_speakers() const { return static_cast<int>(values.cols()); }
  bool active(int t, int s) const { return values(t, s) > Real(0.5); }
  int speaker_index(const std::string &id) const;  // -1 if absent
  void validate() const;
};

void validate_segment(const Segment &s);

std::vector<Segment> parse_rttm(std::string_view text);
std::string write_rttm(std::vector<Segment> segments);
std::string format_rttm_line(const Segment &s);

std::vector<Segment> read_rttm_file(const std::string &path);
void write_rttm_file(const std::string &path, const std::vector<Segment> &segments);

/// Midpoint rule shared by the target builder and the scorer.
inline bool frame_in_segment(int frame, double frame_rate, const Segment &s) {
  const double mid = (frame + 0.5) / frame_rate;
  return mid >= s.onset && mid < s.end();
}

ActivityMatrix segments_to_activity(const std::vector<Segment> &segments, double frame_rate, int num_frames,
                                    const std::vector<std::string> &speaker_order);

/// Maximal runs of active frames per speaker, in speaker order then time.
/// Runs shorter than min_duration seconds are dropped.
std::vector<Segment> activity_to_segments(const ActivityMatrix &matrix, double min_duration,
                                          const std::string &recording_id);

/// Merges touching or overlapping segments of the same (recording, speaker).
std::vector<Segment> merge_segments(std::vector<Segment> segments);

/// Segments restricted to one recording.
std::vector<Segment> filter_recording(const std::vector<Segment> &segments, const std::string &recording_id);

/// Distinct recording ids in first-appearance order.
std::vector<std::string> recording_ids(const std::vector<Segment> &segments);

/// Distinct speaker ids in first-appearance order.
std::vector<std::string> speaker_ids(const std::vector<Segment> &segments);

}  // namespace avsd
