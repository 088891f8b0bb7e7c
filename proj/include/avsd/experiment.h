// include/avsd/experiment.h

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

// One flat JSON object fully determines an experiment: scenario and split
// settings, model widths, training schedule, pre-training, inference and
// paths. Unknown keys are rejected so typos do not pass silently.
//
// Dataset directory written by gen-data:
//   manifest.json              {"config": {...}, "splits": {"train": [...], ...}}
//   <split>/<recording>.tensors
//   <split>.rttm               truth for the split

#include <filesystem>
#include <string>
#include <vector>

#include "avsd/training.h"
#include "json.hpp"

namespace avsd {

struct ExperimentConfig {
  SplitConfig split;
  ModelConfig model;
  TrainConfig train;
  SpeakerPretrainConfig se_pretrain;
  LipPretrainConfig lip_pretrain;
  InferenceConfig inference;
  std::string audio_backbone = "toy";
  std::string audio_backbone_path;
  std::string data_dir;
};

nlohmann::json experiment_to_json(const ExperimentConfig &config);
/// Starts from `base` and overrides every key present in j.
ExperimentConfig experiment_from_json(const nlohmann::json &j, const ExperimentConfig &base = {});
std::vector<std::string> experiment_keys();

/// Sets one key from text ("0.5", "true", "transformer"), as given on the
/// command line.
void set_experiment_key(ExperimentConfig &config, const std::string &key, const std::string &value);

ExperimentConfig load_experiment(const std::filesystem::path &path);

/// Writes scenario containers, per-split truth RTTM and the manifest.
/// Returns the relative paths of the written scenario files.
std::vector<std::string> write_dataset(const std::filesystem::path &dir, const DatasetSplit &split,
                                       const ExperimentConfig &config);
std::vector<ScenarioBundle> load_dataset_split(const std::filesystem::path &dir, const std::string &split);

}  // namespace avsd
