// include/avsd/decoder.h

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

// Fusion of visual, audio and speaker embeddings and the four decoders.
//
// All decoders consume speaker-major E_V (N*T x D_V), time-major E_A
// (T x D_A) and E_S (N x D_A) and emit speaker-major probabilities
// (N*T x 1). Internally they average-pool time by `stride` frames, run at
// the reduced rate, and repeat each output back to the input frames.

#include <memory>
#include <string>
#include <vector>

#include "avsd/nn.h"

namespace avsd {

/// E_F = E_V (+) E_A repeated over speakers (+) E_S repeated over time;
/// N*T x (D_V + 2 D_A).
ag::Var fuse_embeddings(const ag::Var &visual, const ag::Var &audio, const ag::Var &speaker);
Matrix fuse_embeddings(const Matrix &visual, const Matrix &audio, const Matrix &speaker);

enum class DecoderKind { kTransformer, kConformer, kCrossAttention, kBlstm };

DecoderKind parse_decoder_kind(const std::string &name);  // error lists the options
std::string decoder_kind_name(DecoderKind kind);
std::vector<std::string> decoder_kind_names();

struct DecoderConfig {
  DecoderKind kind = DecoderKind::kTransformer;
  int model_dim = 32;
  int heads = 2;
  int ffn_dim = 64;
  int time_blocks = 2;     // stage 1: per-speaker, along time
  int speaker_blocks = 2;  // stage 2: per-frame, across speakers
  int stride = 4;
  int conformer_kernel = 7;
  int lstm_layers = 2;
};

class Decoder {
 public:
  virtual ~Decoder() = default;

  /// Final hidden states, N*T x model_dim, at the input frame rate.
  virtual ag::Var hidden(const ag::Var &visual, const ag::Var &audio, const ag::Var &speaker) const = 0;

  /// Output affine map; probabilities are sigmoid(head(hidden)).
  const nn::Linear &head() const { return head_; }

  ag::Var operator()(const ag::Var &visual, const ag::Var &audio, const ag::Var &speaker) const;

 protected:
  nn::Linear head_;
};

/// Lip embeddings query the speaker embeddings across speakers at each
/// frame; the result then queries the audio embeddings along time. Both
/// attentions are residual, so a zero attention contribution leaves the
/// query unchanged.
class CrossAttentionDecoder : public Decoder {
 public:
  CrossAttentionDecoder(nn::ParameterGroup &group, const DecoderConfig &config, int visual_dim, int audio_dim,
                        nn::Rng &rng);
  ag::Var hidden(const ag::Var &visual, const ag::Var &audio, const ag::Var &speaker) const override;

  ag::Var cross_speaker(const ag::Var &query, const ag::Var &speaker, int frames) const;
  /// query: N*T' x model_dim; audio_kv: N*T' x model_dim (audio tiled per speaker).
  ag::Var cross_audio(const ag::Var &query, const ag::Var &audio_kv, int blocks) const;
  const nn::MultiHeadAttention &audio_attention() const { return attn2_; }

 private:
  DecoderConfig config_;
  nn::Linear visual_in_, audio_in_;
  nn::MultiHeadAttention attn1_, attn2_;
  nn::LayerNorm norm1_, norm2_, norm3_, norm_out_;
  nn::FeedForward ffn_;
};

std::unique_ptr<Decoder> make_decoder(nn::ParameterGroup &group, const DecoderConfig &config, int visual_dim,
                                      int audio_dim, nn::Rng &rng);

/// Runs a decoder without recording a graph; returns T x N probabilities.
Matrix decode(const Decoder &decoder, const Matrix &visual, const Matrix &audio, const Matrix &speaker);

}  // namespace avsd
