// src/rttm.cc

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

#include "avsd/rttm.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace avsd {

int ActivityMatrix::speaker_index(const std::string &id) const {
  for (size_t i = 0; i < speaker_order.size(); ++i)
    if (speaker_order[i] == id) return static_cast<int>(i);
  return -1;
}

void ActivityMatrix::validate() const {
  if (!(frame_rate > 0)) throw Error("activity matrix: frame_rate must be positive");
  if (static_cast<size_t>(values.cols()) != speaker_order.size())
    throw ShapeError("activity matrix: " + std::to_string(values.cols()) + " columns but " +
                     std::to_string(speaker_order.size()) + " speakers");
  std::set<std::string> seen(speaker_order.begin(), speaker_order.end());
  if (seen.size() != speaker_order.size()) throw Error("activity matrix: duplicate speaker ids");
}

void validate_segment(const Segment &s) {
  if (!(s.onset >= 0.0)) throw Error("segment " + s.speaker_id + ": negative onset");
  if (!(s.duration > 0.0)) throw Error("segment " + s.speaker_id + ": non-positive duration");
}

namespace {

double parse_number(std::string_view tok, size_t line_no, const char *field) {
  double v = 0.0;
  const char *b = tok.data(), *e = tok.data() + tok.size();
  auto [ptr, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || ptr != e || !std::isfinite(v))
    throw ParseError("rttm line " + std::to_string(line_no) + ": malformed " + field + " '" +
                     std::string(tok) + "'");
  return v;
}

std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace

std::vector<Segment> parse_rttm(std::string_view text) {
  std::vector<Segment> out;
  size_t line_no = 0;
  size_t pos = 0;
  while (pos <= text.size()) {
    size_t nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;

    std::vector<std::string_view> fields;
    size_t i = 0;
    while (i < line.size()) {
      while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
      size_t j = i;
      while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
      if (j > i) fields.push_back(line.substr(i, j - i));
      i = j;
    }
    if (fields.empty()) continue;
    if (fields[0] != "SPEAKER") continue;
    if (fields.size() < 9)
      throw ParseError("rttm line " + std::to_string(line_no) + ": expected at least 9 fields, got " +
                       std::to_string(fields.size()));
    Segment s;
    s.recording_id = std::string(fields[1]);
    s.onset = parse_number(fields[3], line_no, "onset");
    s.duration = parse_number(fields[4], line_no, "duration");
    s.speaker_id = std::string(fields[7]);
    if (s.duration < 0) throw ParseError("rttm line " + std::to_string(line_no) + ": negative duration");
    if (s.duration == 0) throw ParseError("rttm line " + std::to_string(line_no) + ": zero duration");
    if (s.onset < 0) throw ParseError("rttm line " + std::to_string(line_no) + ": negative onset");
    out.push_back(std::move(s));
  }
  return out;
}

std::string format_rttm_line(const Segment &s) {
  return "SPEAKER " + s.recording_id + " 1 " + fixed2(s.onset) + " " + fixed2(s.duration) + " <NA> <NA> " +
         s.speaker_id + " <NA> <NA>\n";
}

std::string write_rttm(std::vector<Segment> segments) {
  for (const auto &s : segments) validate_segment(s);
  std::stable_sort(segments.begin(), segments.end(), [](const Segment &a, const Segment &b) {
    if (a.recording_id != b.recording_id) return a.recording_id < b.recording_id;
    return a.onset < b.onset;
  });
  std::string out;
  for (const auto &s : segments) out += format_rttm_line(s);
  return out;
}

std::vector<Segment> read_rttm_file(const std::string &path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open rttm file " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  try {
    return parse_rttm(ss.str());
  } catch (const ParseError &e) {
    throw ParseError(path + ": " + e.what());
  }
}

void write_rttm_file(const std::string &path, const std::vector<Segment> &segments) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path + " for writing");
  os << write_rttm(segments);
}

ActivityMatrix segments_to_activity(const std::vector<Segment> &segments, double frame_rate, int num_frames,
                                    const std::vector<std::string> &speaker_order) {
  if (!(frame_rate > 0)) throw Error("segments_to_activity: frame_rate must be positive");
  if (num_frames < 0) throw Error("segments_to_activity: negative frame count");
  ActivityMatrix m;
  m.frame_rate = frame_rate;
  m.speaker_order = speaker_order;
  m.values = Matrix::Zero(num_frames, static_cast<Eigen::Index>(speaker_order.size()));
  m.validate();

  std::vector<std::string> unknown;
  for (const auto &s : segments) {
    const int col = m.speaker_index(s.speaker_id);
    if (col < 0) {
      if (std::find(unknown.begin(), unknown.end(), s.speaker_id) == unknown.end()) unknown.push_back(s.speaker_id);
      continue;
    }
    // Candidate range from the closed form, then the exact midpoint test at
    // the edges so rounding cannot disagree with frame_in_segment.
    int lo = std::max(0, static_cast<int>(std::ceil(s.onset * frame_rate - 0.5)) - 1);
    int hi = std::min(num_frames, static_cast<int>(std::ceil(s.end() * frame_rate - 0.5)) + 1);
    for (int t = lo; t < hi; ++t)
      if (frame_in_segment(t, frame_rate, s)) m.values(t, col) = 1;
  }
  if (!unknown.empty()) {
    std::string list;
    for (const auto &u : unknown) list += (list.empty() ? "" : ", ") + u;
    throw Error("segments_to_activity: unknown speaker id(s): " + list);
  }
  return m;
}

std::vector<Segment> activity_to_segments(const ActivityMatrix &matrix, double min_duration,
                                          const std::string &recording_id) {
  matrix.validate();
  std::vector<Segment> out;
  const int T = matrix.num_frames();
  for (int s = 0; s < matrix.num_speakers(); ++s) {
    int t = 0;
    while (t < T) {
      if (!matrix.active(t, s)) {
        ++t;
        continue;
      }
      int start = t;
      while (t < T && matrix.active(t, s)) ++t;
      Segment seg{recording_id, matrix.speaker_order[s], start / matrix.frame_rate,
                  (t - start) / matrix.frame_rate};
      if (seg.duration + 1e-9 >= min_duration) out.push_back(std::move(seg));
    }
  }
  return out;
}

std::vector<Segment> merge_segments(std::vector<Segment> segments) {
  std::stable_sort(segments.begin(), segments.end(), [](const Segment &a, const Segment &b) {
    if (a.recording_id != b.recording_id) return a.recording_id < b.recording_id;
    if (a.speaker_id != b.speaker_id) return a.speaker_id < b.speaker_id;
    return a.onset < b.onset;
  });
  std::vector<Segment> out;
  for (auto &s : segments) {
    if (!out.empty() && out.back().recording_id == s.recording_id && out.back().speaker_id == s.speaker_id &&
        s.onset <= out.back().end() + 1e-9) {
      out.back().duration = std::max(out.back().end(), s.end()) - out.back().onset;
    } else {
      out.push_back(std::move(s));
    }
  }
  return out;
}

std::vector<Segment> filter_recording(const std::vector<Segment> &segments, const std::string &recording_id) {
  std::vector<Segment> out;
  for (const auto &s : segments)
    if (s.recording_id == recording_id) out.push_back(s);
  return out;
}

std::vector<std::string> recording_ids(const std::vector<Segment> &segments) {
  std::vector<std::string> out;
  for (const auto &s : segments)
    if (std::find(out.begin(), out.end(), s.recording_id) == out.end()) out.push_back(s.recording_id);
  return out;
}

std::vector<std::string> speaker_ids(const std::vector<Segment> &segments) {
  std::vector<std::string> out;
  for (const auto &s : segments)
    if (std::find(out.begin(), out.end(), s.speaker_id) == out.end()) out.push_back(s.speaker_id);
  return out;
}

}  // namespace avsd
