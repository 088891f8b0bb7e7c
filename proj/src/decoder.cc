// src/decoder.cc

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

#include "avsd/decoder.h"

#include "avsd/encoders.h"

namespace avsd {

namespace {

void check_fusion_shapes(const Matrix &v, const Matrix &a, const Matrix &s) {
  const bool bad_rows = s.rows() < 1 || a.rows() < 1 || v.rows() != s.rows() * a.rows();
  if (bad_rows || a.cols() != s.cols())
    throw ShapeError("fuse_embeddings: E_V " + shape_str(v) + ", E_A " + shape_str(a) + ", E_S " + shape_str(s) +
                     (bad_rows ? "; E_V rows must equal N*T" : "; E_A and E_S widths differ"));
}

}  // namespace

ag::Var fuse_embeddings(const ag::Var &visual, const ag::Var &audio, const ag::Var &speaker) {
  check_fusion_shapes(visual.value(), audio.value(), speaker.value());
  const int N = static_cast<int>(speaker.rows()), T = static_cast<int>(audio.rows());
  return ag::concat_cols({visual, ag::tile_rows(audio, N), ag::repeat_rows(speaker, T)});
}

Matrix fuse_embeddings(const Matrix &visual, const Matrix &audio, const Matrix &speaker) {
  ag::NoGradGuard guard;
  return fuse_embeddings(ag::constant(visual), ag::constant(audio), ag::constant(speaker)).value();
}

DecoderKind parse_decoder_kind(const std::string &name) {
  for (auto k : {DecoderKind::kTransformer, DecoderKind::kConformer, DecoderKind::kCrossAttention, DecoderKind::kBlstm})
    if (decoder_kind_name(k) == name) return k;
  throw Error("invalid decoder_kind '" + name + "'; options: transformer, conformer, cross_attention, blstm");
}

std::string decoder_kind_name(DecoderKind kind) {
  switch (kind) {
    case DecoderKind::kTransformer: return "transformer";
    case DecoderKind::kConformer: return "conformer";
    case DecoderKind::kCrossAttention: return "cross_attention";
    case DecoderKind::kBlstm: return "blstm";
  }
  return "?";
}

std::vector<std::string> decoder_kind_names() { return {"transformer", "conformer", "cross_attention", "blstm"}; }

ag::Var Decoder::operator()(const ag::Var &visual, const ag::Var &audio, const ag::Var &speaker) const {
  return ag::sigmoid(head_(hidden(visual, audio, speaker)));
}

Matrix decode(const Decoder &decoder, const Matrix &visual, const Matrix &audio, const Matrix &speaker) {
  ag::NoGradGuard guard;
  Matrix p = decoder(ag::constant(visual), ag::constant(audio), ag::constant(speaker)).value();
  return speaker_major_to_time_major(p, static_cast<int>(speaker.rows()));
}

namespace {

ag::Var time_positions(int frames, int dim, int speakers) {
  return ag::tile_rows(ag::constant(nn::sinusoidal_encoding(frames, dim)), speakers);
}

// Two-stage self-attention stack: time axis per speaker, then speaker axis per frame.
class StagedDecoder : public Decoder {
 public:
  StagedDecoder(nn::ParameterGroup &group, const DecoderConfig &c, int visual_dim, int audio_dim, nn::Rng &rng)
      : config_(c) {
    in_ = nn::Linear(group, "input", visual_dim + 2 * audio_dim, c.model_dim, rng);
    const bool conformer = c.kind == DecoderKind::kConformer;
    for (int i = 0; i < c.time_blocks; ++i) {
      const std::string name = "time" + std::to_string(i);
      if (conformer)
        conf_time_.emplace_back(group, name, c.model_dim, c.heads, c.ffn_dim, c.conformer_kernel, nn::Axis::kTime, rng);
      else
        tr_time_.emplace_back(group, name, c.model_dim, c.heads, c.ffn_dim, rng);
    }
    for (int i = 0; i < c.speaker_blocks; ++i) {
      const std::string name = "speaker" + std::to_string(i);
      if (conformer)
        conf_spk_.emplace_back(group, name, c.model_dim, c.heads, c.ffn_dim, c.conformer_kernel, nn::Axis::kSpeaker,
                               rng);
      else
        tr_spk_.emplace_back(group, name, c.model_dim, c.heads, c.ffn_dim, rng);
    }
    if (!conformer) final_norm_ = nn::LayerNorm(group, "final_norm", c.model_dim);
    head_ = nn::Linear(group, "head", c.model_dim, 1, rng);
  }

  ag::Var hidden(const ag::Var &visual, const ag::Var &audio, const ag::Var &speaker) const override {
    const int N = static_cast<int>(speaker.rows()), T = static_cast<int>(audio.rows());
    ag::Var x = ag::pool_time(fuse_embeddings(visual, audio, speaker), N, config_.stride);
    const int Tp = static_cast<int>(x.rows()) / N;
    x = ag::add(in_(x), time_positions(Tp, config_.model_dim, N));
    for (const auto &b : tr_time_) x = b(x, N, nn::Axis::kTime);
    for (const auto &b : conf_time_) x = b(x, N);
    for (const auto &b : tr_spk_) x = b(x, N, nn::Axis::kSpeaker);
    for (const auto &b : conf_spk_) x = b(x, N);
    if (!tr_time_.empty() || !tr_spk_.empty()) x = final_norm_(x);
    return ag::unpool_time(x, N, T, config_.stride);
  }

 private:
  DecoderConfig config_;
  nn::Linear in_;
  std::vector<nn::TransformerBlock> tr_time_, tr_spk_;
  std::vector<nn::ConformerBlock> conf_time_, conf_spk_;
  nn::LayerNorm final_norm_;
};

// Forward and backward passes share weights and are summed, so reversing
// the input in time reverses the output.
class BlstmDecoder : public Decoder {
 public:
  BlstmDecoder(nn::ParameterGroup &group, const DecoderConfig &c, int visual_dim, int audio_dim, nn::Rng &rng)
      : config_(c) {
    in_ = nn::Linear(group, "input", visual_dim + 2 * audio_dim, c.model_dim, rng);
    for (int i = 0; i < c.lstm_layers; ++i) layers_.emplace_back(group, "lstm" + std::to_string(i), c.model_dim, c.model_dim, rng);
    head_ = nn::Linear(group, "head", c.model_dim, 1, rng);
  }

  ag::Var hidden(const ag::Var &visual, const ag::Var &audio, const ag::Var &speaker) const override {
    const int N = static_cast<int>(speaker.rows()), T = static_cast<int>(audio.rows());
    ag::Var x = ag::relu(in_(ag::pool_time(fuse_embeddings(visual, audio, speaker), N, config_.stride)));
    for (const auto &l : layers_) x = ag::add(l(x, false, N), l(x, true, N));
    return ag::unpool_time(x, N, T, config_.stride);
  }

 private:
  DecoderConfig config_;
  nn::Linear in_;
  std::vector<nn::Lstm> layers_;
};

}  // namespace

CrossAttentionDecoder::CrossAttentionDecoder(nn::ParameterGroup &group, const DecoderConfig &c, int visual_dim,
                                             int audio_dim, nn::Rng &rng)
    : config_(c) {
  const int d = c.model_dim;
  visual_in_ = nn::Linear(group, "visual_in", visual_dim, d, rng);
  norm1_ = nn::LayerNorm(group, "norm1", d);
  attn1_ = nn::MultiHeadAttention(group, "attn1", d, audio_dim, d, c.heads, rng);
  audio_in_ = nn::Linear(group, "audio_in", audio_dim, d, rng);
  norm2_ = nn::LayerNorm(group, "norm2", d);
  attn2_ = nn::MultiHeadAttention(group, "attn2", d, d, d, c.heads, rng);
  norm3_ = nn::LayerNorm(group, "norm3", d);
  ffn_ = nn::FeedForward(group, "ffn", d, c.ffn_dim, rng);
  norm_out_ = nn::LayerNorm(group, "norm_out", d);
  head_ = nn::Linear(group, "head", d, 1, rng);
}

ag::Var CrossAttentionDecoder::cross_speaker(const ag::Var &query, const ag::Var &speaker, int frames) const {
  const int N = static_cast<int>(speaker.rows());
  return ag::add(query, attn1_(norm1_(query), ag::repeat_rows(speaker, frames), N, nn::Axis::kSpeaker));
}

ag::Var CrossAttentionDecoder::cross_audio(const ag::Var &query, const ag::Var &audio_kv, int blocks) const {
  return ag::add(query, attn2_(norm2_(query), audio_kv, blocks, nn::Axis::kTime));
}

ag::Var CrossAttentionDecoder::hidden(const ag::Var &visual, const ag::Var &audio, const ag::Var &speaker) const {
  check_fusion_shapes(visual.value(), audio.value(), speaker.value());
  const int N = static_cast<int>(speaker.rows()), T = static_cast<int>(audio.rows());
  const int s = config_.stride;
  ag::Var a = ag::pool_time(audio, 1, s);
  const int Tp = static_cast<int>(a.rows());
  ag::Var pos = time_positions(Tp, config_.model_dim, N);
  ag::Var q = ag::add(visual_in_(ag::pool_time(visual, N, s)), pos);
  ag::Var out1 = cross_speaker(q, speaker, Tp);
  ag::Var out2 = cross_audio(out1, ag::add(ag::tile_rows(audio_in_(a), N), pos), N);
  ag::Var y = norm_out_(ag::add(out2, ffn_(norm3_(out2))));
  return ag::unpool_time(y, N, T, s);
}

std::unique_ptr<Decoder> make_decoder(nn::ParameterGroup &group, const DecoderConfig &c, int visual_dim, int audio_dim,
                                      nn::Rng &rng) {
  if (c.model_dim % c.heads != 0) throw Error("decoder: model_dim must be divisible by heads");
  if (c.stride < 1) throw Error("decoder: stride must be >= 1");
  switch (c.kind) {
    case DecoderKind::kTransformer:
    case DecoderKind::kConformer: return std::make_unique<StagedDecoder>(group, c, visual_dim, audio_dim, rng);
    case DecoderKind::kCrossAttention: return std::make_unique<CrossAttentionDecoder>(group, c, visual_dim, audio_dim, rng);
    case DecoderKind::kBlstm: return std::make_unique<BlstmDecoder>(group, c, visual_dim, audio_dim, rng);
  }
  throw Error("decoder: unknown kind");
}

}  // namespace avsd
