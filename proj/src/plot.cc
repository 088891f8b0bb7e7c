// src/plot.cc

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

#include "avsd/plot.h"

#include <fstream>

#include "avsd/metrics.h"

namespace avsd {

namespace {

constexpr int kGap = 4;

void fill(Timeline &img, int x, int top, Rgb c) {
  for (int y = top; y < top + img.ribbon_height; ++y) {
    const size_t o = (static_cast<size_t>(y) * img.width + x) * 3;
    img.rgb[o] = c[0];
    img.rgb[o + 1] = c[1];
    img.rgb[o + 2] = c[2];
  }
}

}  // namespace

Rgb Timeline::pixel(int x, int y) const {
  const size_t o = (static_cast<size_t>(y) * width + x) * 3;
  return {rgb[o], rgb[o + 1], rgb[o + 2]};
}

Timeline render_timeline(const std::vector<Segment> &ref, const std::vector<Segment> &hyp,
                         const std::string &recording_id, double frame_rate, int ribbon_height) {
  auto [r, h] = activity_pair(ref, hyp, recording_id, frame_rate);
  const bool have_hyp = h.num_speakers() > 0;
  std::vector<int> ref_to_hyp(r.num_speakers(), -1);
  std::vector<char> hyp_mapped(h.num_speakers(), 0);
  if (have_hyp && r.num_speakers() > 0) {
    const SpeakerMapping m = optimal_speaker_mapping(r, h);
    for (int j = 0; j < h.num_speakers(); ++j)
      if (m.hyp_to_ref[j] >= 0) {
        ref_to_hyp[m.hyp_to_ref[j]] = j;
        hyp_mapped[j] = 1;
      }
  }

  Timeline img;
  img.ribbon_height = ribbon_height;
  img.width = std::max(1, r.num_frames());
  int y = kGap;
  for (int s = 0; s < r.num_speakers(); ++s) {
    img.ribbons.push_back({Ribbon::Kind::kReference, r.speaker_order[s], y});
    y += ribbon_height;
    if (have_hyp) {
      const int j = ref_to_hyp[s];
      img.ribbons.push_back({Ribbon::Kind::kHypothesis, j >= 0 ? h.speaker_order[j] : "", y});
      y += ribbon_height;
    }
    y += kGap;
  }
  for (int j = 0; j < h.num_speakers(); ++j)
    if (!hyp_mapped[j]) {
      img.ribbons.push_back({Ribbon::Kind::kHypothesis, h.speaker_order[j], y});
      y += ribbon_height + kGap;
    }
  img.height = y;
  img.rgb.assign(static_cast<size_t>(img.width) * img.height * 3, 255);

  // Ribbons are emitted as (ref, mapped hyp) pairs, then unmapped hyps.
  size_t k = 0;
  for (int s = 0; s < r.num_speakers(); ++s) {
    const Ribbon &rr = img.ribbons[k++];
    for (int t = 0; t < r.num_frames(); ++t)
      if (r.active(t, s)) fill(img, t, rr.top, kReference);
    if (!have_hyp) continue;
    const Ribbon &hr = img.ribbons[k++];
    const int j = ref_to_hyp[s];
    for (int t = 0; t < r.num_frames(); ++t) {
      const bool hv = j >= 0 && h.active(t, j);
      if (hv != r.active(t, s)) fill(img, t, hr.top, kError);
      else if (hv) fill(img, t, hr.top, kHypothesis);
    }
  }
  for (int j = 0; j < h.num_speakers(); ++j)
    if (!hyp_mapped[j]) {
      const Ribbon &hr = img.ribbons[k++];
      for (int t = 0; t < h.num_frames(); ++t)
        if (h.active(t, j)) fill(img, t, hr.top, kError);
    }
  return img;
}

void write_ppm(const std::filesystem::path &path, const Timeline &img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("plot: cannot write " + path.string());
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char *>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
}

}  // namespace avsd
