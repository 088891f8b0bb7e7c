// include/avsd/nn.h

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

#include <map>
#include <random>
#include <string>
#include <vector>

#include "avsd/autograd.h"
#include "avsd/tensor_io.h"

namespace avsd::nn {

using Rng = std::mt19937_64;

/// A named set of parameters that is frozen or trained as a unit.
class ParameterGroup {
 public:
  explicit ParameterGroup(std::string name) : name_(std::move(name)) {}

  ag::Var create(const std::string &name, Matrix init);
  ag::Var uniform(const std::string &name, Eigen::Index rows, Eigen::Index cols, Real bound, Rng &rng);
  ag::Var zeros(const std::string &name, Eigen::Index rows, Eigen::Index cols);
  ag::Var ones(const std::string &name, Eigen::Index rows, Eigen::Index cols);

  const std::string &name() const { return name_; }
  const std::vector<std::pair<std::string, ag::Var>> &params() const { return params_; }

  /// Frozen parameters never enter the graph, so they receive no gradient
  /// and the optimizer leaves them untouched.
  void set_frozen(bool frozen);
  bool frozen() const { return frozen_; }

  std::vector<Matrix> values() const;
  size_t num_scalars() const;
  void zero_grad();
  void copy_values_from(const ParameterGroup &other);

  TensorFile to_tensor_file() const;
  void load_tensor_file(const TensorFile &file);

 private:
  std::string name_;
  bool frozen_ = false;
  std::vector<std::pair<std::string, ag::Var>> params_;
};

class Adam {
 public:
  explicit Adam(Real learning_rate, Real beta1 = 0.9f, Real beta2 = 0.999f, Real eps = 1e-8f)
      : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// Applies one update to every non-frozen parameter holding a gradient,
  /// then clears all gradients. Returns the pre-clip global gradient norm.
  double step(const std::vector<ParameterGroup *> &groups, double max_grad_norm = 0.0);

  int64_t steps() const { return step_count_; }
  TensorFile state_to_tensor_file() const;
  void load_state(const TensorFile &file);

 private:
  struct Moments {
    Matrix m, v;
    int64_t t = 0;
  };
  Real lr_, beta1_, beta2_, eps_;
  int64_t step_count_ = 0;
  std::map<std::string, Moments> moments_;
};

class Linear {
 public:
  Linear() = default;
  Linear(ParameterGroup &group, const std::string &name, int in, int out, Rng &rng, bool bias = true);
  ag::Var operator()(const ag::Var &x) const;
  const ag::Var &weight() const { return weight_; }
  const ag::Var &bias() const { return bias_; }
  bool has_bias() const { return bias_.valid(); }

 private:
  ag::Var weight_, bias_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterGroup &group, const std::string &name, int dim);
  ag::Var operator()(const ag::Var &x) const;

 private:
  ag::Var gamma_, beta_;
};

class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParameterGroup &group, const std::string &name, int dim, int hidden, Rng &rng);
  ag::Var operator()(const ag::Var &x) const;

 private:
  Linear up_, down_;
};

enum class Axis { kTime, kSpeaker };

/// Multi-head attention. Along kTime each row block attends over its own
/// rows; along kSpeaker each frame attends across blocks (no positional
/// information, so the op is equivariant to block permutations).
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterGroup &group, const std::string &name, int query_dim, int kv_dim,
                     int model_dim, int heads, Rng &rng);
  ag::Var operator()(const ag::Var &query, const ag::Var &key_value, int blocks, Axis axis) const;
  const Linear &value_proj() const { return v_; }

 private:
  Linear q_, k_, v_, out_;
  int heads_ = 1;
  int model_dim_ = 0;
};

/// Pre-norm Transformer encoder block.
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(ParameterGroup &group, const std::string &name, int dim, int heads, int ffn_dim, Rng &rng);
  ag::Var operator()(const ag::Var &x, int blocks, Axis axis) const;

 private:
  LayerNorm norm_attn_, norm_ffn_;
  MultiHeadAttention attn_;
  FeedForward ffn_;
};

/// Conformer block: half FFN, self-attention, convolution module, half FFN,
/// final LayerNorm. Along kSpeaker the depthwise kernel is forced to width
/// 1 so the block stays permutation-equivariant across speakers.
class ConformerBlock {
 public:
  ConformerBlock() = default;
  ConformerBlock(ParameterGroup &group, const std::string &name, int dim, int heads, int ffn_dim,
                 int kernel, Axis axis, Rng &rng);
  ag::Var operator()(const ag::Var &x, int blocks) const;

 private:
  Axis axis_ = Axis::kTime;
  LayerNorm norm_ff1_, norm_attn_, norm_conv_, norm_ff2_, norm_out_, norm_dw_;
  FeedForward ff1_, ff2_;
  MultiHeadAttention attn_;
  Linear pw1_, pw2_;
  ag::Var dw_weight_, dw_bias_;
};

class Lstm {
 public:
  Lstm() = default;
  Lstm(ParameterGroup &group, const std::string &name, int in, int hidden, Rng &rng);
  ag::Var operator()(const ag::Var &x, bool reverse, int blocks) const;
  int hidden() const { return hidden_; }

 private:
  ag::Var w_in_, w_rec_, bias_;
  int hidden_ = 0;
};

class Conv1d {
 public:
  Conv1d() = default;
  Conv1d(ParameterGroup &group, const std::string &name, int in, int out, int kernel, Rng &rng);
  ag::Var operator()(const ag::Var &x, int blocks) const;
  int kernel() const { return kernel_; }

 private:
  ag::Var weight_, bias_;
  int kernel_ = 1;
};

/// Standard sinusoidal table, rows = positions.
Matrix sinusoidal_encoding(int positions, int dim);

}  // namespace avsd::nn
