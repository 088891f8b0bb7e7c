// include/avsd/autograd.h

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

// Minimal reverse-mode automatic differentiation over 2-D matrices.
//
// Multi-speaker tensors are laid out speaker-major: a (T x N x D) grid is a
// matrix of N*T rows, row n*T + t.  Ops that must not mix rows across
// speakers take a `blocks` argument (number of equal-height row blocks).

#include <functional>
#include <memory>
#include <vector>

#include "avsd/base.h"

namespace avsd::ag {

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node &)> backward;

  void accumulate(const Matrix &g);
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix &value() const { return node_->value; }
  Matrix &mutable_value() { return node_->value; }
  const Matrix &grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad.resize(0, 0); }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  Real item() const { return node_->value(0, 0); }
  bool valid() const { return node_ != nullptr; }
  const std::shared_ptr<Node> &node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard &) = delete;
  NoGradGuard &operator=(const NoGradGuard &) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

Var constant(Matrix m);
Var leaf(Matrix m, bool requires_grad);

/// Runs backpropagation from a 1x1 loss. Gradients accumulate into every
/// reachable node that requires them.
void backward(const Var &loss);

// Linear algebra.
Var matmul(const Var &a, const Var &b);
Var matmul_nt(const Var &a, const Var &b);  // a * b^T
Var add(const Var &a, const Var &b);
Var sub(const Var &a, const Var &b);
Var mul(const Var &a, const Var &b);
Var scale(const Var &a, Real s);
Var add_row(const Var &a, const Var &row);  // broadcast 1xC over rows
Var mul_row(const Var &a, const Var &row);
Var mul_col(const Var &a, const Var &col);  // broadcast Rx1 over columns

// Element-wise nonlinearities.
Var relu(const Var &a);
Var sigmoid(const Var &a);
Var tanh(const Var &a);
Var silu(const Var &a);

// Row-wise.
Var softmax_rows(const Var &a);
Var layer_norm(const Var &a, const Var &gamma, const Var &beta, Real eps = 1e-5f);
Var row_sum(const Var &a);
Var l2_normalize_rows(const Var &a, Real eps = 1e-12f);

// Reductions.
Var mean_rows(const Var &a);  // 1xC
Var sum_all(const Var &a);
Var mean_all(const Var &a);

// Layout.
Var concat_cols(const std::vector<Var> &parts);
Var concat_rows(const std::vector<Var> &parts);
Var slice_cols(const Var &a, Eigen::Index start, Eigen::Index count);
Var slice_rows(const Var &a, Eigen::Index start, Eigen::Index count);
Var gather_rows(const Var &a, const std::vector<Eigen::Index> &rows);
Var reshape(const Var &a, Eigen::Index rows, Eigen::Index cols);
Var tile_rows(const Var &a, int times);    // [a; a; ...]
Var repeat_rows(const Var &a, int times);  // each row repeated consecutively
Var pool_time(const Var &a, int blocks, int stride);
Var unpool_time(const Var &a, int blocks, int frames, int stride);

// Sequence ops (per row block, "same" zero padding).
Var conv1d(const Var &x, const Var &weight, const Var &bias, int kernel, int blocks);
Var depthwise_conv1d(const Var &x, const Var &weight, const Var &bias, int blocks);
Var lstm(const Var &x, const Var &w_in, const Var &w_rec, const Var &bias, bool reverse,
         int blocks);

/// Sliding-window mean (+) population std per block; see encoders.h.
Var frame_pooling(const Var &x, int segment_len, int blocks);

/// Attention across the block axis: for each frame t, row n*T+t of q attends
/// over rows m*T+t of k/v for m in [0, blocks).
Var block_axis_attention(const Var &q, const Var &k, const Var &v, int blocks);

// Losses.
Var binary_cross_entropy(const Var &probs, const Matrix &target, Real clamp = 1e-7f);
Var aam_softmax_loss(const Var &cosines, const std::vector<int> &labels, Real margin,
                     Real scale);

}  // namespace avsd::ag
