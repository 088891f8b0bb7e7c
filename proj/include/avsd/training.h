// include/avsd/training.h

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

// Model container, pre-training of the lip and speaker encoders, the joint
// training loop with its freeze schedule, inference to RTTM segments, and
// checkpoints.
//
// Checkpoint directory layout:
//   meta.json          {"format", "epoch", "loss_history", "train_config", "model_config"}
//   <group>.tensors    one container per parameter group
//   optimizer.tensors  Adam moments, keyed "<group>/<param>:m" and ":v"
//   loss.txt           "epoch loss" per completed epoch

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "avsd/decoder.h"
#include "avsd/encoders.h"
#include "avsd/metrics.h"
#include "avsd/synthdata.h"
#include "json.hpp"

namespace avsd {

struct ModelConfig {
  LipEncoderConfig lip;
  AudioBackboneConfig audio;
  DecoderConfig decoder;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  int freeze_epochs = 5;
  int joint_epochs = 10;
  int batch_size = 4;  // chunks per optimizer step
  DecoderKind decoder_kind = DecoderKind::kTransformer;
  double aam_margin = 0.2;
  double aam_scale = 32.0;
  uint64_t seed = 0;
  bool ae_joint = true;     // unfreeze the audio encoder after freeze_epochs
  bool se_joint = false;    // unfreeze the speaker encoder after freeze_epochs
  bool lip_frozen = true;
  double chunk_seconds = 10.0;
  double max_grad_norm = 5.0;  // 0 disables clipping

  int total_epochs() const { return freeze_epochs + joint_epochs; }
  void validate() const;
};

class AvsdModel {
 public:
  AvsdModel(const ModelConfig &config, uint64_t seed);
  AvsdModel(const AvsdModel &) = delete;
  AvsdModel &operator=(const AvsdModel &) = delete;

  const ModelConfig &config() const { return config_; }
  std::vector<nn::ParameterGroup *> groups();
  nn::ParameterGroup *group(const std::string &name);

  /// Loads the pre-trained lip/VAD and speaker encoders from another model
  /// and initialises the audio encoder from the speaker encoder.
  void adopt_pretrained(AvsdModel &source);

  ModelConfig config_;
  nn::ParameterGroup lip_group{"lip_encoder"};
  nn::ParameterGroup vad_group{"visual_vad"};
  nn::ParameterGroup ae_group{"audio_encoder"};
  nn::ParameterGroup se_group{"speaker_encoder"};
  nn::ParameterGroup decoder_group{"decoder"};
  LipEncoder lip;
  VisualVadHead vad;
  ToyAudioBackbone ae;
  ToyAudioBackbone se;
  std::unique_ptr<Decoder> decoder;
};

/// Mean per-cell binary cross-entropy, probabilities clamped to
/// [1e-7, 1 - 1e-7]. probs and target are T x N.
double diarization_loss(const Matrix &probs, const ActivityMatrix &target);

// ---- pre-training ---------------------------------------------------------

struct SpeakerPretrainConfig {
  int steps = 300;
  int batch = 16;
  int crop_frames = 200;
  double learning_rate = 1e-3;
  double margin = 0.2;
  double scale = 32.0;
  uint64_t seed = 0;
};

/// Trains the speaker encoder with AAM-softmax on single-speaker crops of
/// the scenarios. Returns the per-step loss.
std::vector<double> pretrain_speaker_encoder(const std::vector<ScenarioBundle> &scenarios, ToyAudioBackbone &encoder,
                                             nn::ParameterGroup &group, const SpeakerPretrainConfig &config);

struct LipPretrainConfig {
  int epochs = 4;
  double learning_rate = 1e-3;
  double chunk_seconds = 10.0;
  uint64_t seed = 0;
};

/// Trains lip encoder + VAD head on frame activity at the video rate.
/// Returns the per-epoch loss.
std::vector<double> pretrain_lip_encoder(const std::vector<ScenarioBundle> &scenarios, AvsdModel &model,
                                         const LipPretrainConfig &config);

/// Frame accuracy of the thresholded visual VAD against the truth, at the
/// video rate, pooled over scenarios.
double visual_vad_accuracy(const AvsdModel &model, const std::vector<ScenarioBundle> &scenarios,
                           double chunk_seconds = 10.0);

// ---- joint training -------------------------------------------------------

struct TrainState {
  int epoch = 0;  // completed epochs
  std::vector<double> loss_history;
  std::unique_ptr<nn::Adam> optimizer;
};

/// Per-epoch hook: (epoch, state). Called after the epoch's loss is recorded.
using EpochCallback = std::function<void(int, const TrainState &)>;

/// Visual embeddings for a whole recording at the audio frame rate
/// (N*T x D_V), encoded in chunks of chunk_seconds.
Matrix encode_visual(const AvsdModel &model, const ScenarioBundle &scenario, double chunk_seconds = 10.0);

/// Runs epochs state.epoch+1 .. config.total_epochs(). A fresh state starts
/// from epoch 1.
/// With external_audio set, E_A comes from that extractor instead of the
/// toy audio encoder, which then stays frozen (ae_joint must be off).
void train(AvsdModel &model, const std::vector<ScenarioBundle> &data, const TrainConfig &config, TrainState &state,
           const EpochCallback &on_epoch = {}, const AudioExtractor *external_audio = nullptr);

// ---- inference ------------------------------------------------------------

/// One pass of a running median (window w, odd) per column with edge
/// replication.
Matrix median_filter(const Matrix &values, int window);

/// Repeats median_filter until the signal stops changing (a root signal),
/// which makes the result idempotent under the same window.
Matrix median_smooth(const Matrix &values, int window);

/// Smoothing, thresholding (> threshold is active) and run extraction.
ActivityMatrix decide_activity(const Matrix &probs, double frame_rate, const std::vector<std::string> &speaker_order,
                               int median_window = 11, double threshold = 0.5);

struct InferenceConfig {
  bool oracle_embeddings = false;
  int median_window = 11;
  double threshold = 0.5;
  double vad_threshold = 0.5;
  int vad_min_len = 25;  // frames at the audio rate
  double chunk_seconds = 10.0;
  double min_duration = 0.0;
  const AudioExtractor *external_audio = nullptr;  // replaces the toy audio encoder
};

struct InferenceResult {
  Matrix probs;  // T x N, raw decoder output
  ActivityMatrix decisions;
  std::vector<Segment> segments;
  std::vector<SpeakerEmbedding> embeddings;
};

InferenceResult run_inference(const AvsdModel &model, const ScenarioBundle &scenario, const InferenceConfig &config,
                              const Matrix *visual_cache = nullptr);

/// Pooled DER over scenarios at the audio frame rate.
DerBreakdown evaluate(const AvsdModel &model, const std::vector<ScenarioBundle> &scenarios,
                      const InferenceConfig &config, std::vector<Segment> *hypothesis = nullptr);

// ---- persistence ----------------------------------------------------------

nlohmann::json model_config_to_json(const ModelConfig &config);
ModelConfig model_config_from_json(const nlohmann::json &j);
nlohmann::json train_config_to_json(const TrainConfig &config);
TrainConfig train_config_from_json(const nlohmann::json &j);

void save_checkpoint(const std::filesystem::path &dir, AvsdModel &model, const TrainState &state,
                     const TrainConfig &config);
/// Loads parameters and optimizer state into a model built from the
/// checkpoint's model config.
std::unique_ptr<AvsdModel> load_checkpoint(const std::filesystem::path &dir, TrainState &state, TrainConfig &config);

void save_model_groups(const std::filesystem::path &dir, AvsdModel &model, const std::vector<std::string> &groups);
void load_model_groups(const std::filesystem::path &dir, AvsdModel &model, const std::vector<std::string> &groups);

}  // namespace avsd
