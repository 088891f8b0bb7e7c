// include/avsd/encoders.h

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

// Visual, audio and speaker encoders.
//
// Layouts: visual tensors are speaker-major (N*T rows, row n*T + t); audio
// embeddings are T x D_A; speaker embeddings are N x D_A, one row each.

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "avsd/lip_roi.h"
#include "avsd/nn.h"
#include "avsd/rttm.h"

namespace avsd {

// ---- visual ---------------------------------------------------------------

struct LipEncoderConfig {
  int roi_size = 16;
  int conv_channels = 4;  // 3x3 stride-2 spatial conv
  int hidden = 32;
  int output_dim = 32;    // D_V
  int heads = 2;
  int ffn_dim = 64;
  int conformer_kernel = 7;
};

/// Spatial conv -> multi-scale temporal conv -> Conformer -> BLSTM.
class LipEncoder {
 public:
  LipEncoder() = default;
  LipEncoder(nn::ParameterGroup &group, const LipEncoderConfig &config, nn::Rng &rng);

  /// rois: N*T x (roi_size^2), speaker-major. Returns N*T x D_V.
  ag::Var operator()(const Matrix &rois, int num_speakers) const;
  const LipEncoderConfig &config() const { return config_; }

 private:
  LipEncoderConfig config_;
  ag::Var conv_w_, conv_b_;
  nn::Linear proj_;
  nn::Conv1d tcn3_, tcn5_;
  nn::ConformerBlock conformer_;
  nn::Lstm fwd_, bwd_;
};

class VisualVadHead {
 public:
  VisualVadHead() = default;
  VisualVadHead(nn::ParameterGroup &group, int input_dim, nn::Rng &rng);
  /// N*T x D_V -> N*T x 1 probabilities.
  ag::Var operator()(const ag::Var &embeddings) const;
  const nn::Linear &linear() const { return linear_; }

 private:
  nn::Linear linear_;
};

/// Stacks per-speaker ROI streams speaker-major. Ragged lengths or sizes are
/// an error.
Matrix stack_rois(const std::vector<LipRoiSequence> &rois);

/// E_V for N speakers: N*T x D_V.
Matrix lip_encode(const LipEncoder &encoder, const std::vector<LipRoiSequence> &rois, int num_speakers);

/// T x N probabilities from speaker-major E_V (N*T x D_V).
Matrix visual_vad(const VisualVadHead &head, const Matrix &visual_embeddings, int num_speakers);

/// Speaker-major N*T x C  <->  time-major T x N*C views.
Matrix speaker_major_to_time_major(const Matrix &m, int num_speakers);
Matrix time_major_to_speaker_major(const Matrix &m, int num_speakers);

// ---- audio ----------------------------------------------------------------

/// Sliding-window mean (+) population std, window centred on each frame,
/// edges replicated so the output keeps T rows. segment_len must be odd.
Matrix frame_level_pooling(const Matrix &feature_map, int segment_len = 5, int shift = 1);

struct AudioBackboneConfig {
  int feature_dim = 80;
  int channels = 32;  // D'
  int kernel = 3;
  int segment_len = 5;
};

/// Two-layer conv1d bottleneck producing the feature map M, followed by
/// frame-level pooling (D_A = 2 * channels).
class ToyAudioBackbone {
 public:
  ToyAudioBackbone() = default;
  ToyAudioBackbone(nn::ParameterGroup &group, const AudioBackboneConfig &config, nn::Rng &rng);

  ag::Var feature_map(const ag::Var &features) const;  // T x D'
  ag::Var operator()(const ag::Var &features) const;   // T x D_A
  int output_dim() const { return 2 * config_.channels; }
  /// Frames of context either side that influence one output frame.
  int receptive_margin() const { return 2 * (config_.kernel / 2) + config_.segment_len / 2; }
  const AudioBackboneConfig &config() const { return config_; }

 private:
  AudioBackboneConfig config_;
  nn::Conv1d conv1_, conv2_;
};

/// Runs the backbone on frames [begin, end) of a recording, with enough
/// context that the result equals the same rows of a full-recording pass.
ag::Var audio_encode_range(const ToyAudioBackbone &backbone, const Matrix &features, int begin, int end);

/// Produces T x D_A audio embeddings for a recording.
class AudioExtractor {
 public:
  virtual ~AudioExtractor() = default;
  virtual Matrix extract(const Matrix &features, const std::string &recording_id) const = 0;
};

/// Precomputed embeddings: a directory holding manifest.json that maps
/// recording_id -> tensor container file with an "embeddings" tensor.
class ExternalExtractor : public AudioExtractor {
 public:
  explicit ExternalExtractor(std::filesystem::path directory);
  Matrix extract(const Matrix &features, const std::string &recording_id) const override;

 private:
  std::filesystem::path directory_;
  std::map<std::string, std::string> files_;
};

class ToyExtractor : public AudioExtractor {
 public:
  explicit ToyExtractor(const ToyAudioBackbone &backbone) : backbone_(backbone) {}
  Matrix extract(const Matrix &features, const std::string &recording_id) const override;

 private:
  const ToyAudioBackbone &backbone_;
};

class BackboneRegistry {
 public:
  using Factory = std::function<std::unique_ptr<AudioExtractor>(const std::string &argument)>;
  void add(const std::string &name, Factory factory);
  std::unique_ptr<AudioExtractor> make(const std::string &name, const std::string &argument = "") const;
  std::vector<std::string> names() const;

 private:
  std::map<std::string, Factory> factories_;
};

/// Registry with "external" (argument = directory) pre-registered.
BackboneRegistry default_backbone_registry();

Matrix audio_encode(const BackboneRegistry &registry, const std::string &backbone, const std::string &argument,
                    const Matrix &features, const std::string &recording_id);

// ---- speaker --------------------------------------------------------------

/// Per speaker (columns of probs, T x N), runs of frames where that speaker
/// alone exceeds the threshold; runs shorter than min_len frames dropped.
std::vector<std::vector<Segment>> estimate_non_overlapped_segments(const Matrix &probs, double frame_rate,
                                                                   const std::vector<std::string> &speaker_order,
                                                                   const std::string &recording_id,
                                                                   double threshold = 0.5, int min_len = 25);

/// Non-overlapped segments per speaker from reference activity.
std::vector<std::vector<Segment>> oracle_non_overlapped_segments(const ActivityMatrix &truth,
                                                                 const std::string &recording_id);

enum class EmbeddingSource { kOracle, kVisualEstimated };

struct SpeakerEmbedding {
  RowVector values;
  EmbeddingSource source = EmbeddingSource::kOracle;
  bool fallback = false;  // selected by score, not by segments
};

struct SpeakerSelectionConfig {
  int max_frames = 500;
  int block = 50;
  int fallback_top_k = 100;
};

/// Frame indices used for one speaker: frames inside its segments, evenly
/// subsampled in contiguous blocks to at most max_frames. If there are none,
/// the top_k frames by fallback_scores (ties by index).
std::vector<int> select_speaker_frames(const std::vector<Segment> &segments, double frame_rate, int num_frames,
                                       const Eigen::Ref<const Eigen::VectorXf> &fallback_scores,
                                       const SpeakerSelectionConfig &config, bool *used_fallback = nullptr);

/// Utterance-level embedding: backbone over the gathered frames, mean over
/// time, L2-normalised. 1 x D_A.
ag::Var speaker_embedding_var(const ToyAudioBackbone &encoder, const Matrix &features, const std::vector<int> &frames);

/// One embedding per speaker. fallback_scores is T x N (e.g. visual VAD).
std::vector<SpeakerEmbedding> extract_speaker_embedding(const Matrix &features,
                                                        const std::vector<std::vector<Segment>> &segments,
                                                        const ToyAudioBackbone &encoder, double frame_rate,
                                                        const Matrix &fallback_scores, EmbeddingSource source,
                                                        const SpeakerSelectionConfig &config = {});

Matrix stack_embeddings(const std::vector<SpeakerEmbedding> &embeddings);

}  // namespace avsd
