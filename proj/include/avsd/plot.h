// include/avsd/plot.h

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

// Timeline plots: for each reference speaker a reference ribbon with the
// mapped hypothesis ribbon directly below it; unmapped hypothesis speakers
// follow. One pixel column per frame. Hypothesis frames that disagree with
// the mapped reference speaker are drawn in kError.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "avsd/rttm.h"

namespace avsd {

using Rgb = std::array<uint8_t, 3>;

inline constexpr Rgb kBackground{255, 255, 255};
inline constexpr Rgb kReference{40, 90, 200};
inline constexpr Rgb kHypothesis{40, 160, 70};
inline constexpr Rgb kError{220, 30, 30};

struct Ribbon {
  enum class Kind { kReference, kHypothesis } kind;
  std::string speaker;
  int top = 0;  // first pixel row
};

struct Timeline {
  int width = 0;
  int height = 0;
  int ribbon_height = 10;
  std::vector<uint8_t> rgb;  // row-major, 3 bytes per pixel
  std::vector<Ribbon> ribbons;

  Rgb pixel(int x, int y) const;
};

Timeline render_timeline(const std::vector<Segment> &ref, const std::vector<Segment> &hyp,
                         const std::string &recording_id, double frame_rate = 100.0, int ribbon_height = 10);

void write_ppm(const std::filesystem::path &path, const Timeline &image);

}  // namespace avsd
