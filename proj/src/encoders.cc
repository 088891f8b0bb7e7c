// src/encoders.cc

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

#include "avsd/encoders.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "avsd/tensor_io.h"
#include "json.hpp"

namespace avsd {

// ---- visual ---------------------------------------------------------------

namespace {

// 3x3, stride 2, zero padding 1. One output row per (frame, position).
Matrix im2col_3x3s2(const Matrix &frames, int size) {
  const int out = (size + 1) / 2;
  Matrix cols = Matrix::Zero(frames.rows() * out * out, 9);
  for (Eigen::Index f = 0; f < frames.rows(); ++f)
    for (int oy = 0; oy < out; ++oy)
      for (int ox = 0; ox < out; ++ox) {
        const Eigen::Index r = (f * out + oy) * out + ox;
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const int y = 2 * oy + ky - 1, x = 2 * ox + kx - 1;
            if (y >= 0 && y < size && x >= 0 && x < size) cols(r, ky * 3 + kx) = frames(f, y * size + x);
          }
      }
  return cols;
}

}  // namespace

LipEncoder::LipEncoder(nn::ParameterGroup &group, const LipEncoderConfig &c, nn::Rng &rng) : config_(c) {
  if (c.roi_size < 2 || c.hidden % 2 != 0 || c.output_dim % 2 != 0)
    throw Error("lip encoder: roi_size >= 2 and even hidden/output widths required");
  const int out = (c.roi_size + 1) / 2;
  conv_w_ = group.uniform("spatial.weight", 9, c.conv_channels, std::sqrt(Real(6) / Real(9 + c.conv_channels)), rng);
  conv_b_ = group.zeros("spatial.bias", 1, c.conv_channels);
  proj_ = nn::Linear(group, "proj", out * out * c.conv_channels, c.hidden, rng);
  tcn3_ = nn::Conv1d(group, "tcn3", c.hidden, c.hidden / 2, 3, rng);
  tcn5_ = nn::Conv1d(group, "tcn5", c.hidden, c.hidden / 2, 5, rng);
  conformer_ = nn::ConformerBlock(group, "conformer", c.hidden, c.heads, c.ffn_dim, c.conformer_kernel,
                                  nn::Axis::kTime, rng);
  fwd_ = nn::Lstm(group, "blstm.fwd", c.hidden, c.output_dim / 2, rng);
  bwd_ = nn::Lstm(group, "blstm.bwd", c.hidden, c.output_dim / 2, rng);
}

ag::Var LipEncoder::operator()(const Matrix &rois, int num_speakers) const {
  const int S = config_.roi_size;
  if (rois.cols() != S * S) throw ShapeError("lip encoder: expected " + std::to_string(S * S) + " pixels per frame");
  if (num_speakers < 1 || rois.rows() % num_speakers != 0 || rois.rows() == 0)
    throw ShapeError("lip encoder: " + std::to_string(rois.rows()) + " rows not divisible by N=" +
                     std::to_string(num_speakers));
  const int out = (S + 1) / 2;
  ag::Var x = ag::constant(im2col_3x3s2(rois, S));
  x = ag::relu(ag::add_row(ag::matmul(x, conv_w_), conv_b_));
  x = ag::reshape(x, rois.rows(), static_cast<Eigen::Index>(out) * out * config_.conv_channels);
  x = ag::relu(proj_(x));
  ag::Var t = ag::relu(ag::concat_cols({tcn3_(x, num_speakers), tcn5_(x, num_speakers)}));
  x = ag::add(x, t);
  x = conformer_(x, num_speakers);
  return ag::concat_cols({fwd_(x, false, num_speakers), bwd_(x, true, num_speakers)});
}

VisualVadHead::VisualVadHead(nn::ParameterGroup &group, int input_dim, nn::Rng &rng)
    : linear_(group, "vad", input_dim, 1, rng) {}

ag::Var VisualVadHead::operator()(const ag::Var &embeddings) const { return ag::sigmoid(linear_(embeddings)); }

Matrix stack_rois(const std::vector<LipRoiSequence> &rois) {
  if (rois.empty()) throw Error("lip ROIs: no speakers");
  for (const auto &r : rois) r.validate();
  const int T = rois[0].num_frames();
  for (const auto &r : rois)
    if (r.num_frames() != T || r.frames.cols() != rois[0].frames.cols())
      throw ShapeError("lip ROIs: ragged streams (" + rois[0].speaker_id + " has " + std::to_string(T) +
                       " frames, " + r.speaker_id + " has " + std::to_string(r.num_frames()) + ")");
  Matrix m(static_cast<Eigen::Index>(rois.size()) * T, rois[0].frames.cols());
  for (size_t n = 0; n < rois.size(); ++n) m.middleRows(static_cast<Eigen::Index>(n) * T, T) = rois[n].frames;
  return m;
}

Matrix lip_encode(const LipEncoder &encoder, const std::vector<LipRoiSequence> &rois, int num_speakers) {
  if (static_cast<int>(rois.size()) != num_speakers)
    throw ShapeError("lip_encode: " + std::to_string(rois.size()) + " ROI streams for N=" +
                     std::to_string(num_speakers));
  ag::NoGradGuard guard;
  return encoder(stack_rois(rois), num_speakers).value();
}

Matrix visual_vad(const VisualVadHead &head, const Matrix &visual_embeddings, int num_speakers) {
  ag::NoGradGuard guard;
  Matrix p = head(ag::constant(visual_embeddings)).value();
  return speaker_major_to_time_major(p, num_speakers);
}

Matrix speaker_major_to_time_major(const Matrix &m, int num_speakers) {
  if (num_speakers < 1 || m.rows() % num_speakers != 0) throw ShapeError("speaker-major layout: bad N");
  const Eigen::Index T = m.rows() / num_speakers, C = m.cols();
  Matrix out(T, num_speakers * C);
  for (int n = 0; n < num_speakers; ++n) out.middleCols(n * C, C) = m.middleRows(n * T, T);
  return out;
}

Matrix time_major_to_speaker_major(const Matrix &m, int num_speakers) {
  if (num_speakers < 1 || m.cols() % num_speakers != 0) throw ShapeError("time-major layout: bad N");
  const Eigen::Index T = m.rows(), C = m.cols() / num_speakers;
  Matrix out(T * num_speakers, C);
  for (int n = 0; n < num_speakers; ++n) out.middleRows(n * T, T) = m.middleCols(n * C, C);
  return out;
}

// ---- audio ----------------------------------------------------------------

Matrix frame_level_pooling(const Matrix &feature_map, int segment_len, int shift) {
  if (shift != 1) throw Error("frame_level_pooling: only shift 1 keeps one output row per frame");
  if (feature_map.rows() < 1) throw ShapeError("frame_level_pooling: empty feature map");
  ag::NoGradGuard guard;
  return ag::frame_pooling(ag::constant(feature_map), segment_len, 1).value();
}

ToyAudioBackbone::ToyAudioBackbone(nn::ParameterGroup &group, const AudioBackboneConfig &c, nn::Rng &rng)
    : config_(c),
      conv1_(group, "conv1", c.feature_dim, c.channels, c.kernel, rng),
      conv2_(group, "conv2", c.channels, c.channels, c.kernel, rng) {}

ag::Var ToyAudioBackbone::feature_map(const ag::Var &features) const {
  if (features.cols() != config_.feature_dim)
    throw ShapeError("audio backbone: expected " + std::to_string(config_.feature_dim) + "-dim features, got " +
                     std::to_string(features.cols()));
  ag::Var h = ag::relu(conv1_(features, 1));
  return ag::relu(conv2_(h, 1));
}

ag::Var ToyAudioBackbone::operator()(const ag::Var &features) const {
  return ag::frame_pooling(feature_map(features), config_.segment_len, 1);
}

ag::Var audio_encode_range(const ToyAudioBackbone &backbone, const Matrix &features, int begin, int end) {
  const int T = static_cast<int>(features.rows());
  if (begin < 0 || end > T || begin >= end) throw ShapeError("audio_encode_range: bad frame range");
  // The conv layers zero-pad and pooling replicates edges, so a margin only
  // reproduces the full pass where it does not reach the recording edges;
  // at the edges the chunk boundary coincides with the recording boundary.
  const int m = backbone.receptive_margin();
  const int a = std::max(0, begin - m), b = std::min(T, end + m);
  ag::Var full = backbone(ag::constant(features.middleRows(a, b - a)));
  return ag::slice_rows(full, begin - a, end - begin);
}

Matrix ToyExtractor::extract(const Matrix &features, const std::string &) const {
  ag::NoGradGuard guard;
  return backbone_(ag::constant(features)).value();
}

ExternalExtractor::ExternalExtractor(std::filesystem::path directory) : directory_(std::move(directory)) {
  const auto manifest = directory_ / "manifest.json";
  std::ifstream in(manifest);
  if (!in) throw Error("external extractor: cannot open " + manifest.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception &e) {
    throw ParseError("external extractor: " + manifest.string() + ": " + e.what());
  }
  for (auto it = j.begin(); it != j.end(); ++it) files_[it.key()] = it.value().get<std::string>();
}

Matrix ExternalExtractor::extract(const Matrix &features, const std::string &recording_id) const {
  auto it = files_.find(recording_id);
  if (it == files_.end()) throw Error("external extractor: no entry for recording " + recording_id);
  TensorFile f = read_tensor_file(directory_ / it->second);
  Matrix e = f.get("embeddings").data;
  if (features.rows() > 0 && e.rows() != features.rows())
    throw ShapeError("external extractor: " + recording_id + " has " + std::to_string(e.rows()) +
                     " frames, features have " + std::to_string(features.rows()));
  return e;
}

void BackboneRegistry::add(const std::string &name, Factory factory) { factories_[name] = std::move(factory); }

std::vector<std::string> BackboneRegistry::names() const {
  std::vector<std::string> out;
  for (const auto &kv : factories_) out.push_back(kv.first);
  return out;
}

std::unique_ptr<AudioExtractor> BackboneRegistry::make(const std::string &name, const std::string &argument) const {
  auto it = factories_.find(name);
  if (it == factories_.end()) {
    std::string list;
    for (const auto &n : names()) list += (list.empty() ? "" : ", ") + n;
    throw Error("unknown backbone '" + name + "'; registered: " + list);
  }
  return it->second(argument);
}

BackboneRegistry default_backbone_registry() {
  BackboneRegistry r;
  r.add("external", [](const std::string &dir) { return std::make_unique<ExternalExtractor>(dir); });
  return r;
}

Matrix audio_encode(const BackboneRegistry &registry, const std::string &backbone, const std::string &argument,
                    const Matrix &features, const std::string &recording_id) {
  return registry.make(backbone, argument)->extract(features, recording_id);
}

// ---- speaker --------------------------------------------------------------

namespace {

std::vector<Segment> runs_to_segments(const std::vector<char> &mask, double frame_rate, int min_len,
                                      const std::string &recording_id, const std::string &speaker) {
  std::vector<Segment> out;
  const int T = static_cast<int>(mask.size());
  for (int t = 0; t < T;) {
    if (!mask[t]) {
      ++t;
      continue;
    }
    int e = t;
    while (e < T && mask[e]) ++e;
    if (e - t >= min_len) out.push_back({recording_id, speaker, t / frame_rate, (e - t) / frame_rate});
    t = e;
  }
  return out;
}

}  // namespace

std::vector<std::vector<Segment>> estimate_non_overlapped_segments(const Matrix &probs, double frame_rate,
                                                                   const std::vector<std::string> &speaker_order,
                                                                   const std::string &recording_id,
                                                                   double threshold, int min_len) {
  const int T = static_cast<int>(probs.rows()), N = static_cast<int>(probs.cols());
  if (static_cast<int>(speaker_order.size()) != N) throw ShapeError("estimate_non_overlapped_segments: N mismatch");
  std::vector<std::vector<Segment>> out(N);
  for (int n = 0; n < N; ++n) {
    std::vector<char> mask(T, 0);
    for (int t = 0; t < T; ++t) {
      bool alone = probs(t, n) > threshold;
      for (int m = 0; m < N && alone; ++m)
        if (m != n && probs(t, m) > threshold) alone = false;
      mask[t] = alone;
    }
    out[n] = runs_to_segments(mask, frame_rate, min_len, recording_id, speaker_order[n]);
  }
  return out;
}

std::vector<std::vector<Segment>> oracle_non_overlapped_segments(const ActivityMatrix &truth,
                                                                 const std::string &recording_id) {
  const int T = truth.num_frames(), N = truth.num_speakers();
  std::vector<std::vector<Segment>> out(N);
  for (int n = 0; n < N; ++n) {
    std::vector<char> mask(T, 0);
    for (int t = 0; t < T; ++t) {
      int active = 0;
      for (int m = 0; m < N; ++m) active += truth.active(t, m);
      mask[t] = truth.active(t, n) && active == 1;
    }
    out[n] = runs_to_segments(mask, truth.frame_rate, 1, recording_id, truth.speaker_order[n]);
  }
  return out;
}

std::vector<int> select_speaker_frames(const std::vector<Segment> &segments, double frame_rate, int num_frames,
                                       const Eigen::Ref<const Eigen::VectorXf> &fallback_scores,
                                       const SpeakerSelectionConfig &config, bool *used_fallback) {
  std::vector<int> frames;
  for (int t = 0; t < num_frames; ++t)
    for (const auto &s : segments)
      if (frame_in_segment(t, frame_rate, s)) {
        frames.push_back(t);
        break;
      }
  if (used_fallback) *used_fallback = frames.empty();
  if (frames.empty()) {
    if (fallback_scores.size() != num_frames) throw ShapeError("speaker frames: fallback scores length mismatch");
    std::vector<int> order(num_frames);
    std::iota(order.begin(), order.end(), 0);
    const int k = std::min(config.fallback_top_k, num_frames);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
      return fallback_scores(a) > fallback_scores(b) || (fallback_scores(a) == fallback_scores(b) && a < b);
    });
    frames.assign(order.begin(), order.begin() + k);
    std::sort(frames.begin(), frames.end());
    return frames;
  }
  const int n = static_cast<int>(frames.size());
  if (n <= config.max_frames) return frames;
  // Evenly spaced contiguous blocks keep local context for the convolutions.
  const int blocks = std::max(1, config.max_frames / config.block);
  std::vector<int> picked;
  for (int b = 0; b < blocks; ++b) {
    const int start = static_cast<int>((static_cast<int64_t>(n - config.block) * b) / std::max(1, blocks - 1));
    for (int i = 0; i < config.block && start + i < n; ++i) picked.push_back(frames[start + i]);
  }
  std::sort(picked.begin(), picked.end());
  picked.erase(std::unique(picked.begin(), picked.end()), picked.end());
  return picked;
}

ag::Var speaker_embedding_var(const ToyAudioBackbone &encoder, const Matrix &features, const std::vector<int> &frames) {
  if (frames.empty()) throw Error("speaker embedding: no frames selected");
  Matrix x(static_cast<Eigen::Index>(frames.size()), features.cols());
  for (size_t i = 0; i < frames.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = features.row(frames[i]);
  return ag::l2_normalize_rows(ag::mean_rows(encoder(ag::constant(std::move(x)))));
}

std::vector<SpeakerEmbedding> extract_speaker_embedding(const Matrix &features,
                                                        const std::vector<std::vector<Segment>> &segments,
                                                        const ToyAudioBackbone &encoder, double frame_rate,
                                                        const Matrix &fallback_scores, EmbeddingSource source,
                                                        const SpeakerSelectionConfig &config) {
  const int T = static_cast<int>(features.rows());
  const int N = static_cast<int>(segments.size());
  if (fallback_scores.rows() != T || fallback_scores.cols() != N)
    throw ShapeError("extract_speaker_embedding: fallback scores " + shape_str(fallback_scores) + ", expected " +
                     std::to_string(T) + "x" + std::to_string(N));
  ag::NoGradGuard guard;
  std::vector<SpeakerEmbedding> out;
  for (int n = 0; n < N; ++n) {
    bool fb = false;
    Eigen::VectorXf scores = fallback_scores.col(n);
    auto frames = select_speaker_frames(segments[n], frame_rate, T, scores, config, &fb);
    SpeakerEmbedding e;
    e.values = speaker_embedding_var(encoder, features, frames).value();
    e.source = source;
    e.fallback = fb;
    out.push_back(std::move(e));
  }
  return out;
}

Matrix stack_embeddings(const std::vector<SpeakerEmbedding> &embeddings) {
  if (embeddings.empty()) throw Error("no speaker embeddings");
  Matrix m(static_cast<Eigen::Index>(embeddings.size()), embeddings[0].values.cols());
  for (size_t i = 0; i < embeddings.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = embeddings[i].values;
  return m;
}

}  // namespace avsd
