// src/training.cc

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

#include "avsd/training.h"

#include <algorithm>
#include <climits>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

namespace avsd {

namespace {

uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Rows [start, start+len) of every speaker block of a speaker-major matrix.
Matrix gather_blocks(const Matrix &m, int blocks, int start, int len) {
  const Eigen::Index T = m.rows() / blocks;
  Matrix out(static_cast<Eigen::Index>(blocks) * len, m.cols());
  for (int n = 0; n < blocks; ++n) out.middleRows(n * len, len) = m.middleRows(n * T + start, len);
  return out;
}

void scatter_blocks(Matrix &dst, const Matrix &src, int blocks, int start, int len) {
  const Eigen::Index T = dst.rows() / blocks;
  for (int n = 0; n < blocks; ++n) dst.middleRows(n * T + start, len) = src.middleRows(n * len, len);
}

// Lip ROI streams in speaker_identities order; error names a missing stream.
std::vector<LipRoiSequence> ordered_rois(const ScenarioBundle &s) {
  std::vector<LipRoiSequence> out;
  for (const auto &id : s.speaker_identities) {
    auto it = std::find_if(s.lip_rois.begin(), s.lip_rois.end(), [&](const auto &r) { return r.speaker_id == id; });
    if (it == s.lip_rois.end()) throw Error("missing stream: lip ROI for speaker " + id + " in " + s.recording_id);
    out.push_back(*it);
  }
  return out;
}

void check_streams(const ScenarioBundle &s) {
  if (s.audio_features.rows() == 0) throw Error("missing stream: audio_features for " + s.recording_id);
  if (s.speaker_identities.empty()) throw Error("missing stream: speaker list for " + s.recording_id);
  ordered_rois(s);
}

int frames_for(double seconds, double rate) { return std::max(1, static_cast<int>(std::lround(seconds * rate))); }

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw Error("train config: learning_rate must be > 0");
  if (freeze_epochs < 0 || joint_epochs < 0 || freeze_epochs + joint_epochs < 1)
    throw Error("train config: freeze_epochs + joint_epochs must be >= 1");
  if (batch_size < 1) throw Error("train config: batch_size must be >= 1");
  if (!(chunk_seconds > 0)) throw Error("train config: chunk_seconds must be > 0");
}

AvsdModel::AvsdModel(const ModelConfig &c, uint64_t seed) : config_(c) {
  nn::Rng rng(seed);
  lip = LipEncoder(lip_group, c.lip, rng);
  vad = VisualVadHead(vad_group, c.lip.output_dim, rng);
  se = ToyAudioBackbone(se_group, c.audio, rng);
  ae = ToyAudioBackbone(ae_group, c.audio, rng);
  decoder = make_decoder(decoder_group, c.decoder, c.lip.output_dim, ae.output_dim(), rng);
}

std::vector<nn::ParameterGroup *> AvsdModel::groups() {
  return {&lip_group, &vad_group, &ae_group, &se_group, &decoder_group};
}

nn::ParameterGroup *AvsdModel::group(const std::string &name) {
  for (auto *g : groups())
    if (g->name() == name) return g;
  throw Error("no parameter group '" + name + "'");
}

void AvsdModel::adopt_pretrained(AvsdModel &source) {
  lip_group.copy_values_from(source.lip_group);
  vad_group.copy_values_from(source.vad_group);
  se_group.copy_values_from(source.se_group);
  ae_group.copy_values_from(source.se_group);
}

double diarization_loss(const Matrix &probs, const ActivityMatrix &target) {
  if (probs.rows() != target.values.rows() || probs.cols() != target.values.cols())
    throw ShapeError("diarization_loss: probs " + shape_str(probs) + " vs target " + shape_str(target.values));
  ag::NoGradGuard guard;
  return ag::binary_cross_entropy(ag::constant(probs), target.values).item();
}

// ---- pre-training ---------------------------------------------------------

std::vector<double> pretrain_speaker_encoder(const std::vector<ScenarioBundle> &scenarios, ToyAudioBackbone &encoder,
                                             nn::ParameterGroup &group, const SpeakerPretrainConfig &config) {
  struct Item {
    const ScenarioBundle *scenario;
    std::vector<int> frames;
    int label;
  };
  std::map<std::string, int> classes;
  std::vector<Item> items;
  SpeakerSelectionConfig all;
  all.max_frames = INT_MAX;
  for (const auto &s : scenarios) {
    const ActivityMatrix truth = s.truth_activity();
    const auto segs = oracle_non_overlapped_segments(truth, s.recording_id);
    for (int n = 0; n < truth.num_speakers(); ++n) {
      if (segs[n].empty()) continue;
      Eigen::VectorXf none = Eigen::VectorXf::Zero(truth.num_frames());
      auto frames = select_speaker_frames(segs[n], s.audio_rate, truth.num_frames(), none, all);
      auto [it, _] = classes.emplace(truth.speaker_order[n], static_cast<int>(classes.size()));
      items.push_back({&s, std::move(frames), it->second});
    }
  }
  if (classes.size() < 2)
    throw Error("pretrain_speaker_encoder: need >= 2 distinct speaker identities, got " +
                std::to_string(classes.size()));

  nn::Rng rng(mix_seed(config.seed, 0x5e));
  nn::ParameterGroup head("aam_head");
  ag::Var weights = head.uniform("classes", static_cast<Eigen::Index>(classes.size()), encoder.output_dim(), 1.0f, rng);
  group.set_frozen(false);
  nn::Adam opt(static_cast<Real>(config.learning_rate));
  std::vector<double> history;
  for (int step = 0; step < config.steps; ++step) {
    std::vector<ag::Var> rows;
    std::vector<int> labels;
    for (int b = 0; b < config.batch; ++b) {
      const Item &it = items[rng() % items.size()];
      const int n = static_cast<int>(it.frames.size());
      const int len = std::min(n, config.crop_frames);
      const int start = n == len ? 0 : static_cast<int>(rng() % static_cast<uint64_t>(n - len + 1));
      std::vector<int> crop(it.frames.begin() + start, it.frames.begin() + start + len);
      rows.push_back(speaker_embedding_var(encoder, it.scenario->audio_features, crop));
      labels.push_back(it.label);
    }
    ag::Var cos = ag::matmul_nt(ag::concat_rows(rows), ag::l2_normalize_rows(weights));
    ag::Var loss = ag::aam_softmax_loss(cos, labels, static_cast<Real>(config.margin), static_cast<Real>(config.scale));
    ag::backward(loss);
    opt.step({&group, &head}, 5.0);
    history.push_back(loss.item());
  }
  return history;
}

namespace {

struct LipChunk {
  Matrix rois;    // N*len x pixels
  Matrix target;  // N*len x 1
  int speakers;
};

std::vector<LipChunk> lip_chunks(const std::vector<ScenarioBundle> &scenarios, double chunk_seconds) {
  std::vector<LipChunk> out;
  for (const auto &s : scenarios) {
    check_streams(s);
    const auto rois = ordered_rois(s);
    const int N = static_cast<int>(rois.size());
    const Matrix all = stack_rois(rois);
    const int Tv = rois[0].num_frames();
    const ActivityMatrix truth = segments_to_activity(s.truth, s.visual_rate, Tv, s.speaker_identities);
    const Matrix target = time_major_to_speaker_major(truth.values, N);
    const int chunk = frames_for(chunk_seconds, s.visual_rate);
    for (int start = 0; start < Tv; start += chunk) {
      const int len = std::min(chunk, Tv - start);
      out.push_back({gather_blocks(all, N, start, len), gather_blocks(target, N, start, len), N});
    }
  }
  return out;
}

}  // namespace

std::vector<double> pretrain_lip_encoder(const std::vector<ScenarioBundle> &scenarios, AvsdModel &model,
                                         const LipPretrainConfig &config) {
  if (scenarios.empty()) throw Error("pretrain_lip_encoder: empty dataset");
  auto chunks = lip_chunks(scenarios, config.chunk_seconds);
  model.lip_group.set_frozen(false);
  model.vad_group.set_frozen(false);
  nn::Adam opt(static_cast<Real>(config.learning_rate));
  std::vector<size_t> order(chunks.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> history;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    nn::Rng rng(mix_seed(config.seed, static_cast<uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (size_t i : order) {
      const LipChunk &c = chunks[i];
      ag::Var p = model.vad(model.lip(c.rois, c.speakers));
      ag::Var loss = ag::binary_cross_entropy(p, c.target);
      ag::backward(loss);
      opt.step({&model.lip_group, &model.vad_group}, 5.0);
      total += loss.item();
    }
    history.push_back(total / static_cast<double>(chunks.size()));
  }
  return history;
}

double visual_vad_accuracy(const AvsdModel &model, const std::vector<ScenarioBundle> &scenarios,
                           double chunk_seconds) {
  int64_t correct = 0, total = 0;
  ag::NoGradGuard guard;
  for (const auto &c : lip_chunks(scenarios, chunk_seconds)) {
    const Matrix p = model.vad(model.lip(c.rois, c.speakers)).value();
    for (Eigen::Index i = 0; i < p.rows(); ++i) correct += (p(i, 0) > Real(0.5)) == (c.target(i, 0) > Real(0.5));
    total += p.rows();
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

// ---- joint training -------------------------------------------------------

Matrix encode_visual(const AvsdModel &model, const ScenarioBundle &scenario, double chunk_seconds) {
  check_streams(scenario);
  const auto rois = ordered_rois(scenario);
  const int N = static_cast<int>(rois.size());
  const Matrix all = stack_rois(rois);
  const int Tv = rois[0].num_frames();
  const int chunk = frames_for(chunk_seconds, scenario.visual_rate);
  Matrix ev(all.rows(), model.config().lip.output_dim);
  ag::NoGradGuard guard;
  for (int start = 0; start < Tv; start += chunk) {
    const int len = std::min(chunk, Tv - start);
    scatter_blocks(ev, model.lip(gather_blocks(all, N, start, len), N).value(), N, start, len);
  }
  const int r = scenario.visual_repeat();
  const int T = scenario.num_frames();
  if (Tv * r != T)
    throw ShapeError("visual stream of " + std::to_string(Tv) + " frames does not cover " + std::to_string(T) +
                     " audio frames in " + scenario.recording_id);
  Matrix out(static_cast<Eigen::Index>(N) * T, ev.cols());
  for (int n = 0; n < N; ++n)
    for (int t = 0; t < T; ++t) out.row(n * T + t) = ev.row(n * Tv + t / r);
  return out;
}

namespace {

struct RecordingCache {
  const ScenarioBundle *scenario = nullptr;
  int speakers = 0;
  Matrix visual;  // N*T x D_V
  Matrix rois;    // N*Tv x pixels, only when the lip encoder trains
  Matrix target;  // N*T x 1
  std::vector<std::vector<int>> speaker_frames;
  Matrix audio;    // cached AE output while frozen
  Matrix speaker;  // cached E_S while frozen
};

struct ChunkRef {
  int recording;
  int start;
  int len;
};

}  // namespace

void train(AvsdModel &model, const std::vector<ScenarioBundle> &data, const TrainConfig &config, TrainState &state,
           const EpochCallback &on_epoch, const AudioExtractor *external_audio) {
  config.validate();
  if (external_audio && config.ae_joint) throw Error("train: ae_joint needs the toy audio backbone");
  if (data.empty()) throw Error("train: empty dataset");
  if (model.config().decoder.kind != config.decoder_kind)
    throw Error("train: model decoder is " + decoder_kind_name(model.config().decoder.kind) + ", config asks for " +
                decoder_kind_name(config.decoder_kind));
  if (!state.optimizer) state.optimizer = std::make_unique<nn::Adam>(static_cast<Real>(config.learning_rate));

  std::vector<RecordingCache> recs;
  std::vector<ChunkRef> chunks;
  for (const auto &s : data) {
    check_streams(s);
    RecordingCache rc;
    rc.scenario = &s;
    rc.speakers = static_cast<int>(s.speaker_identities.size());
    const ActivityMatrix truth = s.truth_activity();
    rc.target = time_major_to_speaker_major(truth.values, rc.speakers);
    const auto segs = oracle_non_overlapped_segments(truth, s.recording_id);
    for (int n = 0; n < rc.speakers; ++n) {
      Eigen::VectorXf score = truth.values.col(n);
      rc.speaker_frames.push_back(select_speaker_frames(segs[n], s.audio_rate, truth.num_frames(), score, {}));
    }
    if (config.lip_frozen)
      rc.visual = encode_visual(model, s);
    else
      rc.rois = stack_rois(ordered_rois(s));
    const int chunk = frames_for(config.chunk_seconds, s.audio_rate);
    if (!config.lip_frozen && chunk % s.visual_repeat() != 0)
      throw Error("train: chunk length must align with video frames when the lip encoder trains");
    for (int start = 0; start < s.num_frames(); start += chunk)
      chunks.push_back({static_cast<int>(recs.size()), start, std::min(chunk, s.num_frames() - start)});
    recs.push_back(std::move(rc));
  }

  bool audio_cached = false, speaker_cached = false;
  for (int epoch = state.epoch + 1; epoch <= config.total_epochs(); ++epoch) {
    const bool joint = epoch > config.freeze_epochs;
    const bool ae_train = joint && config.ae_joint;
    const bool se_train = joint && config.se_joint;
    model.lip_group.set_frozen(config.lip_frozen);
    model.vad_group.set_frozen(true);
    model.ae_group.set_frozen(!ae_train);
    model.se_group.set_frozen(!se_train);
    model.decoder_group.set_frozen(false);

    if (!ae_train && !audio_cached) {
      ag::NoGradGuard guard;
      for (auto &rc : recs)
        rc.audio = external_audio ? external_audio->extract(rc.scenario->audio_features, rc.scenario->recording_id)
                                  : model.ae(ag::constant(rc.scenario->audio_features)).value();
      audio_cached = true;
    }
    if (!se_train && !speaker_cached) {
      ag::NoGradGuard guard;
      for (auto &rc : recs) {
        rc.speaker.resize(rc.speakers, model.se.output_dim());
        for (int n = 0; n < rc.speakers; ++n)
          rc.speaker.row(n) = speaker_embedding_var(model.se, rc.scenario->audio_features, rc.speaker_frames[n]).value();
      }
      speaker_cached = true;
    }

    std::vector<size_t> order(chunks.size());
    std::iota(order.begin(), order.end(), 0);
    nn::Rng rng(mix_seed(config.seed, static_cast<uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);

    double total = 0.0;
    int in_batch = 0;
    for (size_t k = 0; k < order.size(); ++k) {
      const ChunkRef &c = chunks[order[k]];
      const RecordingCache &rc = recs[c.recording];
      const int N = rc.speakers;
      ag::Var visual;
      if (config.lip_frozen) {
        visual = ag::constant(gather_blocks(rc.visual, N, c.start, c.len));
      } else {
        const int r = rc.scenario->visual_repeat();
        const int vlen = (c.len + r - 1) / r;
        ag::Var ev = model.lip(gather_blocks(rc.rois, N, c.start / r, vlen), N);
        visual = ag::repeat_rows(ev, r);
        if (vlen * r != c.len) throw ShapeError("train: partial video frame at chunk end");
      }
      ag::Var audio = ae_train ? audio_encode_range(model.ae, rc.scenario->audio_features, c.start, c.start + c.len)
                               : ag::constant(rc.audio.middleRows(c.start, c.len));
      ag::Var speaker;
      if (se_train) {
        std::vector<ag::Var> rows;
        for (int n = 0; n < N; ++n) rows.push_back(speaker_embedding_var(model.se, rc.scenario->audio_features, rc.speaker_frames[n]));
        speaker = ag::concat_rows(rows);
      } else {
        speaker = ag::constant(rc.speaker);
      }
      ag::Var probs = (*model.decoder)(visual, audio, speaker);
      ag::Var loss = ag::binary_cross_entropy(probs, gather_blocks(rc.target, N, c.start, c.len));
      total += loss.item();
      ag::backward(ag::scale(loss, Real(1) / static_cast<Real>(config.batch_size)));
      if (++in_batch == config.batch_size || k + 1 == order.size()) {
        state.optimizer->step(model.groups(), config.max_grad_norm);
        in_batch = 0;
      }
    }
    if (ae_train) audio_cached = false;
    if (se_train) speaker_cached = false;
    if (!config.lip_frozen) {
      for (auto &rc : recs) rc.visual.resize(0, 0);
    }
    state.loss_history.push_back(total / static_cast<double>(chunks.size()));
    state.epoch = epoch;
    if (on_epoch) on_epoch(epoch, state);
  }
}

// ---- inference ------------------------------------------------------------

Matrix median_filter(const Matrix &values, int window) {
  if (window < 1 || window % 2 == 0) throw Error("median filter: window must be odd and >= 1");
  if (window == 1) return values;
  const int T = static_cast<int>(values.rows()), h = window / 2;
  Matrix out(values.rows(), values.cols());
  std::vector<Real> buf(window);
  for (Eigen::Index c = 0; c < values.cols(); ++c)
    for (int t = 0; t < T; ++t) {
      for (int j = -h; j <= h; ++j) buf[j + h] = values(std::clamp(t + j, 0, T - 1), c);
      std::nth_element(buf.begin(), buf.begin() + h, buf.end());
      out(t, c) = buf[h];
    }
  return out;
}

Matrix median_smooth(const Matrix &values, int window) {
  Matrix cur = median_filter(values, window);
  // Repeated median filtering reaches a root signal in finitely many passes.
  for (Eigen::Index pass = 0; pass <= values.rows(); ++pass) {
    Matrix next = median_filter(cur, window);
    if (next == cur) return cur;
    cur = std::move(next);
  }
  throw Error("median smoothing did not converge");
}

ActivityMatrix decide_activity(const Matrix &probs, double frame_rate, const std::vector<std::string> &speaker_order,
                               int median_window, double threshold) {
  if (static_cast<Eigen::Index>(speaker_order.size()) != probs.cols())
    throw ShapeError("decide_activity: " + std::to_string(speaker_order.size()) + " speakers for " +
                     std::to_string(probs.cols()) + " columns");
  ActivityMatrix a;
  const Matrix smooth = median_smooth(probs, median_window);
  a.values = (smooth.array() > static_cast<Real>(threshold)).cast<Real>();
  a.frame_rate = frame_rate;
  a.speaker_order = speaker_order;
  return a;
}

InferenceResult run_inference(const AvsdModel &model, const ScenarioBundle &s, const InferenceConfig &config,
                              const Matrix *visual_cache) {
  check_streams(s);
  const int N = static_cast<int>(s.speaker_identities.size());
  const int T = s.num_frames();
  const Matrix visual = visual_cache ? *visual_cache : encode_visual(model, s, config.chunk_seconds);
  if (visual.rows() != static_cast<Eigen::Index>(N) * T) throw ShapeError("run_inference: visual cache shape mismatch");

  InferenceResult r;
  const Matrix vad = visual_vad(model.vad, visual, N);
  std::vector<std::vector<Segment>> segs;
  Matrix fallback;
  EmbeddingSource source;
  if (config.oracle_embeddings) {
    const ActivityMatrix truth = s.truth_activity();
    segs = oracle_non_overlapped_segments(truth, s.recording_id);
    fallback = truth.values;
    source = EmbeddingSource::kOracle;
  } else {
    segs = estimate_non_overlapped_segments(vad, s.audio_rate, s.speaker_identities, s.recording_id,
                                            config.vad_threshold, config.vad_min_len);
    fallback = vad;
    source = EmbeddingSource::kVisualEstimated;
  }
  r.embeddings = extract_speaker_embedding(s.audio_features, segs, model.se, s.audio_rate, fallback, source);
  const Matrix speaker = stack_embeddings(r.embeddings);

  Matrix audio;
  if (config.external_audio) {
    audio = config.external_audio->extract(s.audio_features, s.recording_id);
  } else {
    ag::NoGradGuard guard;
    audio = model.ae(ag::constant(s.audio_features)).value();
  }
  if (audio.rows() != T) throw ShapeError("run_inference: audio embeddings have " + std::to_string(audio.rows()) +
                                          " frames, expected " + std::to_string(T));
  r.probs.resize(T, N);
  const int chunk = frames_for(config.chunk_seconds, s.audio_rate);
  for (int start = 0; start < T; start += chunk) {
    const int len = std::min(chunk, T - start);
    r.probs.middleRows(start, len) =
        decode(*model.decoder, gather_blocks(visual, N, start, len), audio.middleRows(start, len), speaker);
  }
  r.decisions = decide_activity(r.probs, s.audio_rate, s.speaker_identities, config.median_window, config.threshold);
  r.segments = activity_to_segments(r.decisions, config.min_duration, s.recording_id);
  return r;
}

DerBreakdown evaluate(const AvsdModel &model, const std::vector<ScenarioBundle> &scenarios,
                      const InferenceConfig &config, std::vector<Segment> *hypothesis) {
  if (scenarios.empty()) throw Error("evaluate: no scenarios");
  std::vector<Segment> ref, hyp;
  for (const auto &s : scenarios) {
    ref.insert(ref.end(), s.truth.begin(), s.truth.end());
    auto r = run_inference(model, s, config);
    hyp.insert(hyp.end(), r.segments.begin(), r.segments.end());
  }
  if (hypothesis) *hypothesis = hyp;
  return score_segments(ref, hyp, scenarios.front().audio_rate);
}

// ---- persistence ----------------------------------------------------------

nlohmann::json model_config_to_json(const ModelConfig &c) {
  return {{"lip",
           {{"roi_size", c.lip.roi_size},
            {"conv_channels", c.lip.conv_channels},
            {"hidden", c.lip.hidden},
            {"output_dim", c.lip.output_dim},
            {"heads", c.lip.heads},
            {"ffn_dim", c.lip.ffn_dim},
            {"conformer_kernel", c.lip.conformer_kernel}}},
          {"audio",
           {{"feature_dim", c.audio.feature_dim},
            {"channels", c.audio.channels},
            {"kernel", c.audio.kernel},
            {"segment_len", c.audio.segment_len}}},
          {"decoder",
           {{"kind", decoder_kind_name(c.decoder.kind)},
            {"model_dim", c.decoder.model_dim},
            {"heads", c.decoder.heads},
            {"ffn_dim", c.decoder.ffn_dim},
            {"time_blocks", c.decoder.time_blocks},
            {"speaker_blocks", c.decoder.speaker_blocks},
            {"stride", c.decoder.stride},
            {"conformer_kernel", c.decoder.conformer_kernel},
            {"lstm_layers", c.decoder.lstm_layers}}}};
}

ModelConfig model_config_from_json(const nlohmann::json &j) {
  ModelConfig c;
  const auto &l = j.at("lip");
  c.lip.roi_size = l.at("roi_size");
  c.lip.conv_channels = l.at("conv_channels");
  c.lip.hidden = l.at("hidden");
  c.lip.output_dim = l.at("output_dim");
  c.lip.heads = l.at("heads");
  c.lip.ffn_dim = l.at("ffn_dim");
  c.lip.conformer_kernel = l.at("conformer_kernel");
  const auto &a = j.at("audio");
  c.audio.feature_dim = a.at("feature_dim");
  c.audio.channels = a.at("channels");
  c.audio.kernel = a.at("kernel");
  c.audio.segment_len = a.at("segment_len");
  const auto &d = j.at("decoder");
  c.decoder.kind = parse_decoder_kind(d.at("kind"));
  c.decoder.model_dim = d.at("model_dim");
  c.decoder.heads = d.at("heads");
  c.decoder.ffn_dim = d.at("ffn_dim");
  c.decoder.time_blocks = d.at("time_blocks");
  c.decoder.speaker_blocks = d.at("speaker_blocks");
  c.decoder.stride = d.at("stride");
  c.decoder.conformer_kernel = d.at("conformer_kernel");
  c.decoder.lstm_layers = d.at("lstm_layers");
  return c;
}

nlohmann::json train_config_to_json(const TrainConfig &c) {
  return {{"learning_rate", c.learning_rate}, {"freeze_epochs", c.freeze_epochs},
          {"joint_epochs", c.joint_epochs},   {"batch_size", c.batch_size},
          {"decoder_kind", decoder_kind_name(c.decoder_kind)},
          {"aam_margin", c.aam_margin},       {"aam_scale", c.aam_scale},
          {"seed", c.seed},                   {"ae_joint", c.ae_joint},
          {"se_joint", c.se_joint},           {"lip_frozen", c.lip_frozen},
          {"chunk_seconds", c.chunk_seconds}, {"max_grad_norm", c.max_grad_norm}};
}

TrainConfig train_config_from_json(const nlohmann::json &j) {
  TrainConfig c;
  c.learning_rate = j.at("learning_rate");
  c.freeze_epochs = j.at("freeze_epochs");
  c.joint_epochs = j.at("joint_epochs");
  c.batch_size = j.at("batch_size");
  c.decoder_kind = parse_decoder_kind(j.at("decoder_kind"));
  c.aam_margin = j.at("aam_margin");
  c.aam_scale = j.at("aam_scale");
  c.seed = j.at("seed");
  c.ae_joint = j.at("ae_joint");
  c.se_joint = j.at("se_joint");
  c.lip_frozen = j.at("lip_frozen");
  c.chunk_seconds = j.at("chunk_seconds");
  c.max_grad_norm = j.at("max_grad_norm");
  return c;
}

void save_model_groups(const std::filesystem::path &dir, AvsdModel &model, const std::vector<std::string> &groups) {
  std::filesystem::create_directories(dir);
  for (const auto &g : groups) write_tensor_file(dir / (g + ".tensors"), model.group(g)->to_tensor_file());
}

void load_model_groups(const std::filesystem::path &dir, AvsdModel &model, const std::vector<std::string> &groups) {
  for (const auto &g : groups) model.group(g)->load_tensor_file(read_tensor_file(dir / (g + ".tensors")));
}

void save_checkpoint(const std::filesystem::path &dir, AvsdModel &model, const TrainState &state,
                     const TrainConfig &config) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> names;
  for (auto *g : model.groups()) names.push_back(g->name());
  save_model_groups(dir, model, names);
  if (state.optimizer) write_tensor_file(dir / "optimizer.tensors", state.optimizer->state_to_tensor_file());
  nlohmann::json meta = {{"format", "avsd-checkpoint-1"},
                         {"epoch", state.epoch},
                         {"loss_history", state.loss_history},
                         {"groups", names},
                         {"train_config", train_config_to_json(config)},
                         {"model_config", model_config_to_json(model.config())}};
  std::ofstream(dir / "meta.json") << meta.dump(2) << "\n";
  std::ofstream loss(dir / "loss.txt");
  loss << "epoch loss\n";
  char buf[64];
  for (size_t i = 0; i < state.loss_history.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu %.6f\n", i + 1, state.loss_history[i]);
    loss << buf;
  }
}

std::unique_ptr<AvsdModel> load_checkpoint(const std::filesystem::path &dir, TrainState &state, TrainConfig &config) {
  std::ifstream in(dir / "meta.json");
  if (!in) throw Error("checkpoint: cannot open " + (dir / "meta.json").string());
  nlohmann::json meta;
  try {
    in >> meta;
  } catch (const nlohmann::json::exception &e) {
    throw ParseError("checkpoint: " + (dir / "meta.json").string() + ": " + e.what());
  }
  config = train_config_from_json(meta.at("train_config"));
  auto model = std::make_unique<AvsdModel>(model_config_from_json(meta.at("model_config")), config.seed);
  load_model_groups(dir, *model, meta.at("groups").get<std::vector<std::string>>());
  state.epoch = meta.at("epoch");
  state.loss_history = meta.at("loss_history").get<std::vector<double>>();
  state.optimizer = std::make_unique<nn::Adam>(static_cast<Real>(config.learning_rate));
  if (std::filesystem::exists(dir / "optimizer.tensors"))
    state.optimizer->load_state(read_tensor_file(dir / "optimizer.tensors"));
  return model;
}

}  // namespace avsd
