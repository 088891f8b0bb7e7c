// src/metrics.cc

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

#include "avsd/metrics.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

namespace avsd {

DerCounts &DerCounts::operator+=(const DerCounts &o) {
  miss += o.miss;
  fa += o.fa;
  spkerr += o.spkerr;
  ref_speech += o.ref_speech;
  return *this;
}

namespace {

void check_compatible(const ActivityMatrix &ref, const ActivityMatrix &hyp) {
  ref.validate();
  hyp.validate();
  if (ref.num_frames() != hyp.num_frames())
    throw ShapeError("frame count mismatch: reference " + std::to_string(ref.num_frames()) + " vs hypothesis " +
                     std::to_string(hyp.num_frames()));
  if (std::abs(ref.frame_rate - hyp.frame_rate) > 1e-9)
    throw Error("frame rate mismatch between reference and hypothesis");
}

SpeakerMapping drop_empty(SpeakerMapping m, const std::vector<std::vector<int64_t>> &overlap) {
  for (size_t h = 0; h < m.hyp_to_ref.size(); ++h) {
    int r = m.hyp_to_ref[h];
    if (r >= 0 && overlap[h][r] == 0) m.hyp_to_ref[h] = -1;
  }
  return m;
}

}  // namespace

std::vector<std::vector<int64_t>> speaker_overlap(const ActivityMatrix &ref, const ActivityMatrix &hyp) {
  check_compatible(ref, hyp);
  std::vector<std::vector<int64_t>> o(hyp.num_speakers(), std::vector<int64_t>(ref.num_speakers(), 0));
  for (int t = 0; t < ref.num_frames(); ++t)
    for (int h = 0; h < hyp.num_speakers(); ++h) {
      if (!hyp.active(t, h)) continue;
      for (int r = 0; r < ref.num_speakers(); ++r)
        if (ref.active(t, r)) ++o[h][r];
    }
  return o;
}

SpeakerMapping exhaustive_speaker_mapping(const ActivityMatrix &ref, const ActivityMatrix &hyp) {
  const auto overlap = speaker_overlap(ref, hyp);
  const int nh = hyp.num_speakers(), nr = ref.num_speakers();
  const int k = std::max(nh, nr);
  if (k > 10) throw Error("exhaustive mapping limited to 10 speakers");
  // perm[h] = reference slot; slots >= nr and rows >= nh are padding.
  std::vector<int> perm(k);
  std::iota(perm.begin(), perm.end(), 0);
  int64_t best = -1;
  std::vector<int> best_perm = perm;
  do {
    int64_t total = 0;
    for (int h = 0; h < nh; ++h)
      if (perm[h] < nr) total += overlap[h][perm[h]];
    if (total > best) {
      best = total;
      best_perm = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  SpeakerMapping m;
  m.hyp_to_ref.assign(nh, -1);
  for (int h = 0; h < nh; ++h)
    if (best_perm[h] < nr) m.hyp_to_ref[h] = best_perm[h];
  return drop_empty(std::move(m), overlap);
}

SpeakerMapping hungarian_speaker_mapping(const ActivityMatrix &ref, const ActivityMatrix &hyp) {
  const auto overlap = speaker_overlap(ref, hyp);
  const int nh = hyp.num_speakers(), nr = ref.num_speakers();
  const int n = std::max(nh, nr);
  SpeakerMapping m;
  m.hyp_to_ref.assign(nh, -1);
  if (n == 0) return m;
  // Minimisation form of the Hungarian method on cost = -overlap (1-based).
  const int64_t inf = std::numeric_limits<int64_t>::max() / 4;
  auto cost = [&](int i, int j) -> int64_t {
    return (i < nh && j < nr) ? -overlap[i][j] : 0;
  };
  std::vector<int64_t> u(n + 1, 0), v(n + 1, 0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<int64_t> minv(n + 1, inf);
    std::vector<char> used(n + 1, false);
    do {
      used[j0] = true;
      int i0 = p[j0], j1 = 0;
      int64_t delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        int64_t cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  for (int j = 1; j <= n; ++j) {
    int i = p[j] - 1;
    if (i >= 0 && i < nh && j - 1 < nr) m.hyp_to_ref[i] = j - 1;
  }
  return drop_empty(std::move(m), overlap);
}

SpeakerMapping optimal_speaker_mapping(const ActivityMatrix &ref, const ActivityMatrix &hyp) {
  if (std::max(ref.num_speakers(), hyp.num_speakers()) <= 8) return exhaustive_speaker_mapping(ref, hyp);
  return hungarian_speaker_mapping(ref, hyp);
}

DerCounts der_counts(const ActivityMatrix &ref, const ActivityMatrix &hyp, const SpeakerMapping &mapping) {
  check_compatible(ref, hyp);
  if (static_cast<int>(mapping.hyp_to_ref.size()) != hyp.num_speakers())
    throw Error("mapping size does not match hypothesis speakers");
  DerCounts c;
  std::vector<char> covered(ref.num_speakers());
  for (int t = 0; t < ref.num_frames(); ++t) {
    int64_t nr = 0, nh = 0, hit = 0;
    std::fill(covered.begin(), covered.end(), 0);
    for (int h = 0; h < hyp.num_speakers(); ++h) {
      if (!hyp.active(t, h)) continue;
      ++nh;
      int r = mapping.hyp_to_ref[h];
      if (r >= 0) covered[r] = 1;
    }
    for (int r = 0; r < ref.num_speakers(); ++r) {
      if (!ref.active(t, r)) continue;
      ++nr;
      if (covered[r]) ++hit;
    }
    c.ref_speech += nr;
    c.miss += std::max<int64_t>(nr - nh, 0);
    c.fa += std::max<int64_t>(nh - nr, 0);
    c.spkerr += std::min(nr, nh) - hit;
  }
  return c;
}

DerBreakdown breakdown_from_counts(const DerCounts &counts) {
  if (counts.ref_speech <= 0) throw Error("DER undefined: reference has no speech");
  DerBreakdown d;
  const double denom = static_cast<double>(counts.ref_speech);
  d.miss = 100.0 * static_cast<double>(counts.miss) / denom;
  d.fa = 100.0 * static_cast<double>(counts.fa) / denom;
  d.spkerr = 100.0 * static_cast<double>(counts.spkerr) / denom;
  d.der = d.miss + d.fa + d.spkerr;
  return d;
}

DerBreakdown compute_der(const ActivityMatrix &ref, const ActivityMatrix &hyp) {
  const SpeakerMapping m = optimal_speaker_mapping(ref, hyp);
  DerBreakdown d = breakdown_from_counts(der_counts(ref, hyp, m));
  for (size_t h = 0; h < m.hyp_to_ref.size(); ++h)
    if (m.hyp_to_ref[h] >= 0) d.mapping[hyp.speaker_order[h]] = ref.speaker_order[m.hyp_to_ref[h]];
  return d;
}

std::pair<ActivityMatrix, ActivityMatrix> activity_pair(const std::vector<Segment> &ref,
                                                        const std::vector<Segment> &hyp,
                                                        const std::string &recording_id, double frame_rate) {
  auto r = filter_recording(ref, recording_id);
  auto h = filter_recording(hyp, recording_id);
  double end = 0.0;
  for (const auto &s : r) end = std::max(end, s.end());
  for (const auto &s : h) end = std::max(end, s.end());
  const int frames = static_cast<int>(std::ceil(end * frame_rate - 1e-9));
  return {segments_to_activity(r, frame_rate, frames, speaker_ids(r)),
          segments_to_activity(h, frame_rate, frames, speaker_ids(h))};
}

DerBreakdown score_segments(const std::vector<Segment> &ref, const std::vector<Segment> &hyp, double frame_rate) {
  DerCounts total;
  std::map<std::string, std::string> mapping;
  for (const auto &rec : recording_ids(ref)) {
    auto [r, h] = activity_pair(ref, hyp, rec, frame_rate);
    const SpeakerMapping m = optimal_speaker_mapping(r, h);
    total += der_counts(r, h, m);
    for (size_t i = 0; i < m.hyp_to_ref.size(); ++i)
      if (m.hyp_to_ref[i] >= 0) mapping[rec + "/" + h.speaker_order[i]] = r.speaker_order[m.hyp_to_ref[i]];
  }
  DerBreakdown d = breakdown_from_counts(total);
  d.mapping = std::move(mapping);
  return d;
}

std::string format_der(const DerBreakdown &der) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "MISS %.2f FA %.2f SPKERR %.2f DER %.2f", der.miss, der.fa, der.spkerr, der.der);
  return buf;
}

}  // namespace avsd
