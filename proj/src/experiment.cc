// src/experiment.cc

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

#include "avsd/experiment.h"

#include <fstream>
#include <functional>

namespace avsd {

namespace {

using nlohmann::json;

struct Key {
  const char *name;
  std::function<json(const ExperimentConfig &)> get;
  std::function<void(ExperimentConfig &, const json &)> set;
};

#define AVSD_KEY(name, field)                                                           \
  Key {                                                                                 \
    name, [](const ExperimentConfig &c) { return json(c.field); },                      \
        [](ExperimentConfig &c, const json &v) { v.get_to(c.field); }                   \
  }

const std::vector<Key> &keys() {
  static const std::vector<Key> k = {
      AVSD_KEY("num_speakers", split.scenario.num_speakers),
      AVSD_KEY("duration", split.scenario.duration),
      AVSD_KEY("audio_rate", split.scenario.audio_rate),
      AVSD_KEY("visual_rate", split.scenario.visual_rate),
      AVSD_KEY("overlap_ratio", split.scenario.overlap_ratio),
      AVSD_KEY("noise_level", split.scenario.noise_level),
      AVSD_KEY("universe_seed", split.scenario.universe_seed),
      AVSD_KEY("feature_dim", split.scenario.feature_dim),
      AVSD_KEY("roi_size", split.scenario.roi_size),
      AVSD_KEY("occlusion_rate", split.scenario.occlusion_rate),
      AVSD_KEY("distractor_rate", split.scenario.distractor_rate),
      AVSD_KEY("train_count", split.train_count),
      AVSD_KEY("dev_count", split.dev_count),
      AVSD_KEY("test_count", split.test_count),
      AVSD_KEY("train_seed", split.train_seed),
      AVSD_KEY("dev_seed", split.dev_seed),
      AVSD_KEY("test_seed", split.test_seed),
      AVSD_KEY("train_identities", split.train_identities),
      AVSD_KEY("dev_identities", split.dev_identities),
      AVSD_KEY("test_identities", split.test_identities),
      AVSD_KEY("lip_conv_channels", model.lip.conv_channels),
      AVSD_KEY("lip_hidden", model.lip.hidden),
      AVSD_KEY("visual_dim", model.lip.output_dim),
      AVSD_KEY("lip_heads", model.lip.heads),
      AVSD_KEY("lip_ffn_dim", model.lip.ffn_dim),
      AVSD_KEY("lip_conformer_kernel", model.lip.conformer_kernel),
      AVSD_KEY("audio_channels", model.audio.channels),
      AVSD_KEY("audio_kernel", model.audio.kernel),
      AVSD_KEY("pooling_segment_len", model.audio.segment_len),
      AVSD_KEY("model_dim", model.decoder.model_dim),
      AVSD_KEY("heads", model.decoder.heads),
      AVSD_KEY("ffn_dim", model.decoder.ffn_dim),
      AVSD_KEY("time_blocks", model.decoder.time_blocks),
      AVSD_KEY("speaker_blocks", model.decoder.speaker_blocks),
      AVSD_KEY("decoder_stride", model.decoder.stride),
      AVSD_KEY("decoder_conformer_kernel", model.decoder.conformer_kernel),
      AVSD_KEY("lstm_layers", model.decoder.lstm_layers),
      AVSD_KEY("learning_rate", train.learning_rate),
      AVSD_KEY("freeze_epochs", train.freeze_epochs),
      AVSD_KEY("joint_epochs", train.joint_epochs),
      AVSD_KEY("batch_size", train.batch_size),
      Key{"decoder_kind", [](const ExperimentConfig &c) { return json(decoder_kind_name(c.train.decoder_kind)); },
          [](ExperimentConfig &c, const json &v) {
            c.train.decoder_kind = parse_decoder_kind(v.get<std::string>());
            c.model.decoder.kind = c.train.decoder_kind;
          }},
      AVSD_KEY("aam_margin", train.aam_margin),
      AVSD_KEY("aam_scale", train.aam_scale),
      AVSD_KEY("seed", train.seed),
      AVSD_KEY("ae_joint", train.ae_joint),
      AVSD_KEY("se_joint", train.se_joint),
      AVSD_KEY("lip_frozen", train.lip_frozen),
      AVSD_KEY("chunk_seconds", train.chunk_seconds),
      AVSD_KEY("max_grad_norm", train.max_grad_norm),
      AVSD_KEY("se_pretrain_steps", se_pretrain.steps),
      AVSD_KEY("se_pretrain_batch", se_pretrain.batch),
      AVSD_KEY("se_pretrain_crop_frames", se_pretrain.crop_frames),
      AVSD_KEY("se_pretrain_learning_rate", se_pretrain.learning_rate),
      AVSD_KEY("lip_pretrain_epochs", lip_pretrain.epochs),
      AVSD_KEY("lip_pretrain_learning_rate", lip_pretrain.learning_rate),
      AVSD_KEY("oracle_embeddings", inference.oracle_embeddings),
      AVSD_KEY("median_window", inference.median_window),
      AVSD_KEY("threshold", inference.threshold),
      AVSD_KEY("vad_threshold", inference.vad_threshold),
      AVSD_KEY("vad_min_len", inference.vad_min_len),
      AVSD_KEY("min_duration", inference.min_duration),
      AVSD_KEY("audio_backbone", audio_backbone),
      AVSD_KEY("audio_backbone_path", audio_backbone_path),
      AVSD_KEY("data_dir", data_dir),
  };
  return k;
}

#undef AVSD_KEY

const Key &find_key(const std::string &name) {
  for (const auto &k : keys())
    if (name == k.name) return k;
  std::string valid;
  for (const auto &k : keys()) valid += (valid.empty() ? "" : ", ") + std::string(k.name);
  throw Error("unknown config key '" + name + "' (valid: " + valid + ")");
}

// Keeps the pre-training seeds and margins tied to the training settings.
void sync(ExperimentConfig &c) {
  c.model.decoder.kind = c.train.decoder_kind;
  c.se_pretrain.margin = c.train.aam_margin;
  c.se_pretrain.scale = c.train.aam_scale;
  c.se_pretrain.seed = c.train.seed;
  c.lip_pretrain.seed = c.train.seed;
  c.lip_pretrain.chunk_seconds = c.train.chunk_seconds;
  c.inference.chunk_seconds = c.train.chunk_seconds;
  c.model.audio.feature_dim = c.split.scenario.feature_dim;
  c.model.lip.roi_size = c.split.scenario.roi_size;
}

}  // namespace

std::vector<std::string> experiment_keys() {
  std::vector<std::string> out;
  for (const auto &k : keys()) out.emplace_back(k.name);
  return out;
}

json experiment_to_json(const ExperimentConfig &config) {
  json j = json::object();
  for (const auto &k : keys()) j[k.name] = k.get(config);
  return j;
}

ExperimentConfig experiment_from_json(const json &j, const ExperimentConfig &base) {
  if (!j.is_object()) throw ParseError("config: expected a flat JSON object");
  ExperimentConfig c = base;
  for (auto it = j.begin(); it != j.end(); ++it) {
    try {
      find_key(it.key()).set(c, it.value());
    } catch (const json::exception &e) {
      throw ParseError("config key '" + it.key() + "': " + e.what());
    }
  }
  sync(c);
  return c;
}

void set_experiment_key(ExperimentConfig &config, const std::string &key, const std::string &value) {
  const Key &k = find_key(key);
  json current = k.get(config);
  json v;
  if (current.is_string()) {
    v = value;
  } else {
    try {
      v = json::parse(value);
    } catch (const json::exception &) {
      throw ParseError("config key '" + key + "': cannot parse value '" + value + "'");
    }
  }
  try {
    k.set(config, v);
  } catch (const json::exception &e) {
    throw ParseError("config key '" + key + "': " + e.what());
  }
  sync(config);
}

ExperimentConfig load_experiment(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) throw Error("config: cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception &e) {
    throw ParseError("config: " + path.string() + ": " + e.what());
  }
  return experiment_from_json(j);
}

std::vector<std::string> write_dataset(const std::filesystem::path &dir, const DatasetSplit &split,
                                       const ExperimentConfig &config) {
  std::vector<std::string> files;
  json splits = json::object();
  auto emit = [&](const std::string &name, const std::vector<ScenarioBundle> &scenarios) {
    std::filesystem::create_directories(dir / name);
    std::vector<Segment> truth;
    json list = json::array();
    for (const auto &s : scenarios) {
      const std::string rel = name + "/" + s.recording_id + ".tensors";
      write_tensor_file(dir / rel, scenario_to_tensor_file(s));
      files.push_back(rel);
      list.push_back(rel);
      truth.insert(truth.end(), s.truth.begin(), s.truth.end());
    }
    write_rttm_file((dir / (name + ".rttm")).string(), truth);
    splits[name] = list;
  };
  emit("train", split.train);
  emit("dev", split.dev);
  emit("test", split.test);
  json manifest = {{"config", experiment_to_json(config)},
                   {"splits", splits},
                   {"identity_pools", {{"train", split.train_pool}, {"dev", split.dev_pool}, {"test", split.test_pool}}}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
  return files;
}

std::vector<ScenarioBundle> load_dataset_split(const std::filesystem::path &dir, const std::string &split) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw Error("dataset: cannot open " + (dir / "manifest.json").string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception &e) {
    throw ParseError("dataset manifest: " + std::string(e.what()));
  }
  if (!manifest.contains("splits") || !manifest["splits"].contains(split))
    throw Error("dataset: no split '" + split + "' in " + dir.string());
  std::vector<ScenarioBundle> out;
  for (const auto &rel : manifest["splits"][split])
    out.push_back(scenario_from_tensor_file(read_tensor_file(dir / rel.get<std::string>())));
  return out;
}

}  // namespace avsd
