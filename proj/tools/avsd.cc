// tools/avsd.cc

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

// avsd: generate synthetic data, train, infer, score and plot.
//
//   avsd gen-data --out data [--config exp.json] [--seed N] [--force]
//   avsd train --data data --out ckpt [--resume] [--set key=value ...]
//   avsd infer --checkpoint ckpt --data data [--split test] --out hyp.rttm
//   avsd score ref.rttm hyp.rttm
//   avsd plot ref.rttm hyp.rttm --out timeline.ppm [--recording id]

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include "CLI11.hpp"
#include "avsd/experiment.h"
#include "avsd/plot.h"

namespace fs = std::filesystem;
using namespace avsd;

namespace {

struct Common {
  std::string config;
  int64_t seed = -1;
  std::string out;
  bool force = false;
  std::vector<std::string> sets;
};

void add_common(CLI::App *cmd, Common &c, bool out_required) {
  cmd->add_option("--config", c.config, "flat JSON experiment config")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "seed override");
  auto *o = cmd->add_option("--out", c.out, "output path");
  if (out_required) o->required();
  cmd->add_flag("--force", c.force, "overwrite existing output");
  cmd->add_option("--set", c.sets, "config override key=value (repeatable)");
}

// Returns the config plus the set of keys given explicitly.
std::pair<ExperimentConfig, std::set<std::string>> build_config(const Common &c) {
  ExperimentConfig cfg;
  std::set<std::string> given;
  if (!c.config.empty()) {
    std::ifstream in(c.config);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception &e) {
      throw ParseError("config: " + c.config + ": " + e.what());
    }
    cfg = experiment_from_json(j);
    for (auto it = j.begin(); it != j.end(); ++it) given.insert(it.key());
  }
  for (const auto &kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Error("--set expects key=value, got '" + kv + "'");
    set_experiment_key(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    given.insert(kv.substr(0, eq));
  }
  return {cfg, given};
}

bool non_empty_dir(const fs::path &p) { return fs::exists(p) && fs::is_directory(p) && !fs::is_empty(p); }

void cmd_gen_data(const Common &c) {
  auto [cfg, given] = build_config(c);
  if (c.seed >= 0) set_experiment_key(cfg, "universe_seed", std::to_string(c.seed));
  const fs::path out = c.out;
  if (fs::exists(out) && !fs::is_directory(out)) throw Error("output " + out.string() + " is not a directory");
  if (non_empty_dir(out)) {
    if (!c.force) throw Error("output directory " + out.string() + " is not empty (use --force)");
    for (const char *name : {"train", "dev", "test"}) fs::remove_all(out / name);
    for (const char *name : {"train.rttm", "dev.rttm", "test.rttm", "manifest.json"}) fs::remove(out / name);
  }
  fs::create_directories(out);
  const DatasetSplit split = make_split(cfg.split);
  const auto files = write_dataset(out, split, cfg);
  std::printf("wrote %zu scenarios to %s\n", files.size(), out.string().c_str());
}

std::unique_ptr<AudioExtractor> external_audio(const ExperimentConfig &cfg) {
  if (cfg.audio_backbone == "toy") return nullptr;
  return default_backbone_registry().make(cfg.audio_backbone, cfg.audio_backbone_path);
}

void cmd_train(const Common &c, const std::string &data_arg, bool resume) {
  auto [cfg, given] = build_config(c);
  if (c.seed >= 0) set_experiment_key(cfg, "seed", std::to_string(c.seed));
  const fs::path data = data_arg.empty() ? fs::path(cfg.data_dir) : fs::path(data_arg);
  if (data.empty() || !fs::exists(data)) throw Error("train: data directory '" + data.string() + "' does not exist");
  const fs::path out = c.out;
  const auto train_data = load_dataset_split(data, "train");
  auto extractor = external_audio(cfg);

  TrainState state;
  std::unique_ptr<AvsdModel> model;
  TrainConfig tc = cfg.train;
  if (resume) {
    TrainConfig stored;
    model = load_checkpoint(out, state, stored);
    const int freeze = given.count("freeze_epochs") ? tc.freeze_epochs : stored.freeze_epochs;
    const int joint = given.count("joint_epochs") ? tc.joint_epochs : stored.joint_epochs;
    tc = stored;
    tc.freeze_epochs = freeze;
    tc.joint_epochs = joint;
    std::printf("resuming %s at epoch %d\n", out.string().c_str(), state.epoch + 1);
  } else {
    if (non_empty_dir(out) && !c.force) throw Error("output directory " + out.string() + " is not empty (use --force or --resume)");
    tc.validate();
    model = std::make_unique<AvsdModel>(cfg.model, tc.seed);
    const auto se_loss = pretrain_speaker_encoder(train_data, model->se, model->se_group, cfg.se_pretrain);
    const auto lip_loss = pretrain_lip_encoder(train_data, *model, cfg.lip_pretrain);
    model->ae_group.copy_values_from(model->se_group);
    fs::create_directories(out);
    std::ofstream(out / "pretrain.json") << nlohmann::json{{"speaker_encoder_loss", se_loss},
                                                            {"lip_encoder_loss", lip_loss}}.dump() << "\n";
    std::printf("pretrained speaker encoder (loss %.4f) and lip encoder (loss %.4f)\n", se_loss.back(),
                lip_loss.back());
  }
  train(*model, train_data, tc, state,
        [&](int epoch, const TrainState &s) {
          save_checkpoint(out, *model, s, tc);
          std::printf("epoch %d loss %.6f\n", epoch, s.loss_history.back());
          std::fflush(stdout);
        },
        extractor.get());
  if (state.epoch >= tc.total_epochs()) save_checkpoint(out, *model, state, tc);
}

void cmd_infer(const Common &c, const std::string &checkpoint, const std::string &data_arg, const std::string &split,
               bool oracle) {
  auto [cfg, given] = build_config(c);
  const fs::path data = data_arg.empty() ? fs::path(cfg.data_dir) : fs::path(data_arg);
  if (fs::exists(c.out) && !c.force) throw Error("output " + c.out + " exists (use --force)");
  TrainState state;
  TrainConfig tc;
  auto model = load_checkpoint(checkpoint, state, tc);
  auto extractor = external_audio(cfg);
  InferenceConfig ic = cfg.inference;
  ic.chunk_seconds = tc.chunk_seconds;
  ic.oracle_embeddings = ic.oracle_embeddings || oracle;
  ic.external_audio = extractor.get();
  std::vector<Segment> hyp;
  for (const auto &s : load_dataset_split(data, split)) {
    auto r = run_inference(*model, s, ic);
    hyp.insert(hyp.end(), r.segments.begin(), r.segments.end());
  }
  write_rttm_file(c.out, hyp);
  std::printf("wrote %zu segments to %s\n", hyp.size(), c.out.c_str());
}

void cmd_score(const Common &c, const std::string &ref, const std::string &hyp, double frame_rate) {
  const DerBreakdown d = score_segments(read_rttm_file(ref), read_rttm_file(hyp), frame_rate);
  const std::string line = format_der(d);
  std::printf("%s\n", line.c_str());
  if (!c.out.empty()) {
    if (fs::exists(c.out) && !c.force) throw Error("output " + c.out + " exists (use --force)");
    std::ofstream(c.out) << line << "\n";
  }
}

void cmd_plot(const Common &c, const std::string &ref, const std::string &hyp, std::string recording,
              double frame_rate) {
  const auto r = read_rttm_file(ref);
  const auto h = hyp.empty() ? std::vector<Segment>{} : read_rttm_file(hyp);
  if (recording.empty()) {
    const auto ids = recording_ids(r);
    if (ids.empty()) throw Error("plot: reference has no segments");
    recording = ids.front();
  }
  if (fs::exists(c.out) && !c.force) throw Error("output " + c.out + " exists (use --force)");
  write_ppm(c.out, render_timeline(r, h, recording, frame_rate));
  std::printf("wrote %s\n", c.out.c_str());
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"audio-visual speaker diarization toolkit"};
  app.require_subcommand(1);

  Common gen_c, train_c, infer_c, score_c, plot_c;
  auto *gen = app.add_subcommand("gen-data", "generate a synthetic train/dev/test split");
  add_common(gen, gen_c, true);

  auto *trn = app.add_subcommand("train", "pre-train encoders and train the decoder");
  add_common(trn, train_c, true);
  std::string train_data;
  bool resume = false;
  trn->add_option("--data", train_data, "dataset directory from gen-data");
  trn->add_flag("--resume", resume, "continue from the checkpoint in --out");

  auto *inf = app.add_subcommand("infer", "decode a split to RTTM");
  add_common(inf, infer_c, true);
  std::string checkpoint, infer_data, split = "test";
  bool oracle = false;
  inf->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  inf->add_option("--data", infer_data, "dataset directory");
  inf->add_option("--split", split, "train, dev or test");
  inf->add_flag("--oracle-embeddings", oracle, "speaker embeddings from reference segments");

  auto *sc = app.add_subcommand("score", "DER of a hypothesis RTTM against a reference RTTM");
  add_common(sc, score_c, false);
  std::string score_ref, score_hyp;
  double score_rate = 100.0;
  sc->add_option("ref", score_ref, "reference RTTM")->required()->check(CLI::ExistingFile);
  sc->add_option("hyp", score_hyp, "hypothesis RTTM")->required()->check(CLI::ExistingFile);
  sc->add_option("--frame-rate", score_rate, "scoring frame rate");

  auto *pl = app.add_subcommand("plot", "timeline image (PPM) of reference and hypothesis");
  add_common(pl, plot_c, true);
  std::string plot_ref, plot_hyp, recording;
  double plot_rate = 100.0;
  pl->add_option("ref", plot_ref, "reference RTTM")->required()->check(CLI::ExistingFile);
  pl->add_option("hyp", plot_hyp, "hypothesis RTTM")->check(CLI::ExistingFile);
  pl->add_option("--recording", recording, "recording to plot (default: first)");
  pl->add_option("--frame-rate", plot_rate, "pixels per second");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp &e) {
    return app.exit(e);
  } catch (const CLI::ParseError &e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  try {
    if (*gen) cmd_gen_data(gen_c);
    else if (*trn) cmd_train(train_c, train_data, resume);
    else if (*inf) cmd_infer(infer_c, checkpoint, infer_data, split, oracle);
    else if (*sc) cmd_score(score_c, score_ref, score_hyp, score_rate);
    else if (*pl) cmd_plot(plot_c, plot_ref, plot_hyp, recording, plot_rate);
  } catch (const std::exception &e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
