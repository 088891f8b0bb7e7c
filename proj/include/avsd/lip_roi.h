// include/avsd/lip_roi.h

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

#include <string>

#include "avsd/base.h"

namespace avsd {

/// Grayscale lip crops for one speaker, one row per video frame, each row a
/// row-major width x height image with values in [0, 1].
struct LipRoiSequence {
  std::string speaker_id;
  int width = 16;
  int height = 16;
  Matrix frames;  // T x (width * height)

  int num_frames() const { return static_cast<int>(frames.rows()); }
  void validate() const;
};

}  // namespace avsd
