// include/avsd/synthdata.h

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

// Reproducible synthetic multi-speaker recordings: turn-taking activity with
// a controlled overlap fraction, spectral-template acoustic features, and
// lip ROI streams whose mouth opening oscillates while the speaker talks.
//
// Overlap fraction = frames with >= 2 active speakers / frames with >= 1.

#include <cstdint>
#include <string>
#include <vector>

#include "avsd/lip_roi.h"
#include "avsd/rttm.h"
#include "avsd/tensor_io.h"

namespace avsd {

struct ScenarioConfig {
  int num_speakers = 3;
  double duration = 60.0;     // seconds
  double audio_rate = 100.0;  // feature frames per second
  double visual_rate = 25.0;  // video frames per second; audio_rate must be a multiple
  double overlap_ratio = 0.2;
  double noise_level = 0.5;
  uint64_t seed = 0;
  std::string recording_id;         // defaults to "rec<seed>"
  std::vector<int> identity_pool;   // identity indices to draw speakers from; empty = 0..num_speakers-1
  uint64_t universe_seed = 0;       // fixes what each identity index sounds and looks like
  int feature_dim = 80;
  int roi_size = 16;
  double occlusion_rate = 0.03;     // fraction of video frames with the mouth hidden
  double distractor_rate = 0.03;    // fraction of silent frames with non-speech mouth motion

  void validate() const;
};

struct SpeakerIdentity {
  int index = 0;
  std::string id;
  RowVector spectral_template;  // RMS 1
  double loudness = 1.0;
  double syllable_rate = 4.0;   // Hz
  double face_level = 0.65;
  double mouth_width = 4.0;     // pixels (half-width)
};

SpeakerIdentity make_identity(int index, uint64_t universe_seed, int feature_dim = 80);
std::string identity_name(int index);

struct ScenarioBundle {
  std::string recording_id;
  double audio_rate = 100.0;
  double visual_rate = 25.0;
  Matrix audio_features;                 // T x feature_dim
  std::vector<LipRoiSequence> lip_rois;  // video rate, same order as speaker_identities
  std::vector<Segment> truth;
  std::vector<std::string> speaker_identities;

  int num_frames() const { return static_cast<int>(audio_features.rows()); }
  int visual_repeat() const;
  ActivityMatrix truth_activity() const;
};

ScenarioBundle generate_scenario(const ScenarioConfig &config);

/// Overlap fraction of an activity grid (see file comment); 0 when silent.
double overlap_fraction(const ActivityMatrix &activity);

struct SplitConfig {
  ScenarioConfig scenario;  // template; seed, recording_id and identity_pool are set per scenario
  int train_count = 40;
  int dev_count = 10;
  int test_count = 10;
  uint64_t train_seed = 1000;  // scenario i of a split uses seed = split_seed + i
  uint64_t dev_seed = 2000;
  uint64_t test_seed = 3000;
  int train_identities = 24;   // disjoint identity pools, allocated in this order
  int dev_identities = 12;
  int test_identities = 12;

  void validate() const;
};

struct DatasetSplit {
  std::vector<ScenarioBundle> train, dev, test;
  std::vector<int> train_pool, dev_pool, test_pool;
};

DatasetSplit make_split(const SplitConfig &config);

TensorFile scenario_to_tensor_file(const ScenarioBundle &bundle);
ScenarioBundle scenario_from_tensor_file(const TensorFile &file);

}  // namespace avsd
