// src/nn.cc

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

#include "avsd/nn.h"

#include <cmath>

namespace avsd::nn {

ag::Var ParameterGroup::create(const std::string &name, Matrix init) {
  for (const auto &[n, _] : params_)
    if (n == name) throw Error("duplicate parameter '" + name + "' in group '" + name_ + "'");
  ag::Var v = ag::leaf(std::move(init), !frozen_);
  params_.emplace_back(name, v);
  return v;
}

ag::Var ParameterGroup::uniform(const std::string &name, Eigen::Index rows, Eigen::Index cols, Real bound,
                                Rng &rng) {
  std::uniform_real_distribution<Real> dist(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return create(name, std::move(m));
}

ag::Var ParameterGroup::zeros(const std::string &name, Eigen::Index rows, Eigen::Index cols) {
  return create(name, Matrix::Zero(rows, cols));
}

ag::Var ParameterGroup::ones(const std::string &name, Eigen::Index rows, Eigen::Index cols) {
  return create(name, Matrix::Ones(rows, cols));
}

void ParameterGroup::set_frozen(bool frozen) {
  frozen_ = frozen;
  for (auto &[_, v] : params_) {
    v.set_requires_grad(!frozen);
    if (frozen) v.zero_grad();
  }
}

std::vector<Matrix> ParameterGroup::values() const {
  std::vector<Matrix> out;
  out.reserve(params_.size());
  for (const auto &[_, v] : params_) out.push_back(v.value());
  return out;
}

size_t ParameterGroup::num_scalars() const {
  size_t n = 0;
  for (const auto &[_, v] : params_) n += static_cast<size_t>(v.value().size());
  return n;
}

void ParameterGroup::zero_grad() {
  for (auto &[_, v] : params_) v.zero_grad();
}

void ParameterGroup::copy_values_from(const ParameterGroup &other) {
  if (other.params_.size() != params_.size())
    throw Error("parameter group '" + name_ + "' layout differs from '" + other.name_ + "'");
  for (size_t i = 0; i < params_.size(); ++i) {
    auto &dst = params_[i].second;
    const auto &src = other.params_[i].second;
    if (dst.rows() != src.rows() || dst.cols() != src.cols())
      throw ShapeError("parameter '" + params_[i].first + "' shape differs");
    dst.mutable_value() = src.value();
  }
}

TensorFile ParameterGroup::to_tensor_file() const {
  TensorFile f;
  f.meta["group"] = name_;
  for (const auto &[n, v] : params_) f.add(n, v.value());
  return f;
}

void ParameterGroup::load_tensor_file(const TensorFile &file) {
  for (auto &[n, v] : params_) {
    const auto &t = file.get(n);
    if (t.data.rows() != v.rows() || t.data.cols() != v.cols())
      throw ShapeError("checkpoint tensor '" + n + "' has shape " + shape_str(t.data) + ", expected " +
                       shape_str(v.value()));
    v.mutable_value() = t.data;
  }
}

double Adam::step(const std::vector<ParameterGroup *> &groups, double max_grad_norm) {
  double sq = 0.0;
  for (auto *g : groups) {
    if (g->frozen()) continue;
    for (const auto &[_, v] : g->params())
      if (v.has_grad()) sq += static_cast<double>(v.grad().squaredNorm());
  }
  const double norm = std::sqrt(sq);
  const Real clip = (max_grad_norm > 0.0 && norm > max_grad_norm) ? static_cast<Real>(max_grad_norm / norm) : Real(1);

  ++step_count_;
  for (auto *g : groups) {
    if (g->frozen()) {
      g->zero_grad();
      continue;
    }
    for (const auto &[name, v] : g->params()) {
      if (!v.has_grad()) continue;
      auto &mom = moments_[g->name() + "/" + name];
      if (mom.m.size() == 0) {
        mom.m = Matrix::Zero(v.rows(), v.cols());
        mom.v = Matrix::Zero(v.rows(), v.cols());
      }
      ++mom.t;
      Matrix grad = v.grad() * clip;
      mom.m = beta1_ * mom.m + (1 - beta1_) * grad;
      mom.v = beta2_ * mom.v + (1 - beta2_) * grad.cwiseProduct(grad);
      const Real bc1 = 1 - std::pow(beta1_, static_cast<Real>(mom.t));
      const Real bc2 = 1 - std::pow(beta2_, static_cast<Real>(mom.t));
      ag::Var param = v;
      param.mutable_value().array() -=
          lr_ * (mom.m.array() / bc1) / ((mom.v.array() / bc2).sqrt() + eps_);
    }
    g->zero_grad();
  }
  return norm;
}

TensorFile Adam::state_to_tensor_file() const {
  TensorFile f;
  f.meta["steps"] = step_count_;
  nlohmann::json counts = nlohmann::json::object();
  for (const auto &[key, mom] : moments_) {
    f.add(key + ":m", mom.m);
    f.add(key + ":v", mom.v);
    counts[key] = mom.t;
  }
  f.meta["counts"] = counts;
  return f;
}

void Adam::load_state(const TensorFile &file) {
  step_count_ = file.meta.value("steps", int64_t{0});
  moments_.clear();
  for (const auto &[key, t] : file.meta.at("counts").items()) {
    Moments mom;
    mom.m = file.get(key + ":m").data;
    mom.v = file.get(key + ":v").data;
    mom.t = t.get<int64_t>();
    moments_[key] = std::move(mom);
  }
}

Linear::Linear(ParameterGroup &group, const std::string &name, int in, int out, Rng &rng, bool bias) {
  const Real bound = std::sqrt(Real(6) / static_cast<Real>(in + out));
  weight_ = group.uniform(name + ".weight", in, out, bound, rng);
  if (bias) bias_ = group.zeros(name + ".bias", 1, out);
}

ag::Var Linear::operator()(const ag::Var &x) const {
  ag::Var y = ag::matmul(x, weight_);
  return bias_.valid() ? ag::add_row(y, bias_) : y;
}

LayerNorm::LayerNorm(ParameterGroup &group, const std::string &name, int dim) {
  gamma_ = group.ones(name + ".gamma", 1, dim);
  beta_ = group.zeros(name + ".beta", 1, dim);
}

ag::Var LayerNorm::operator()(const ag::Var &x) const { return ag::layer_norm(x, gamma_, beta_); }

FeedForward::FeedForward(ParameterGroup &group, const std::string &name, int dim, int hidden, Rng &rng)
    : up_(group, name + ".up", dim, hidden, rng), down_(group, name + ".down", hidden, dim, rng) {}

ag::Var FeedForward::operator()(const ag::Var &x) const { return down_(ag::relu(up_(x))); }

MultiHeadAttention::MultiHeadAttention(ParameterGroup &group, const std::string &name, int query_dim,
                                       int kv_dim, int model_dim, int heads, Rng &rng)
    : q_(group, name + ".q", query_dim, model_dim, rng),
      k_(group, name + ".k", kv_dim, model_dim, rng),
      v_(group, name + ".v", kv_dim, model_dim, rng),
      out_(group, name + ".out", model_dim, query_dim, rng, /*bias=*/false),
      heads_(heads),
      model_dim_(model_dim) {
  if (heads <= 0 || model_dim % heads != 0)
    throw Error("attention: model_dim " + std::to_string(model_dim) + " not divisible by heads " +
                std::to_string(heads));
}

ag::Var MultiHeadAttention::operator()(const ag::Var &query, const ag::Var &key_value, int blocks,
                                       Axis axis) const {
  ag::Var q = q_(query), k = k_(key_value), v = v_(key_value);
  const int dh = model_dim_ / heads_;
  std::vector<ag::Var> heads;
  heads.reserve(heads_);
  if (axis == Axis::kSpeaker) {
    if (query.rows() != key_value.rows()) throw ShapeError("speaker-axis attention needs aligned rows");
    for (int h = 0; h < heads_; ++h)
      heads.push_back(ag::block_axis_attention(ag::slice_cols(q, h * dh, dh), ag::slice_cols(k, h * dh, dh),
                                               ag::slice_cols(v, h * dh, dh), blocks));
    return out_(ag::concat_cols(heads));
  }
  const Eigen::Index tq = q.rows() / blocks, tk = k.rows() / blocks;
  const Real inv = Real(1) / std::sqrt(static_cast<Real>(dh));
  std::vector<ag::Var> per_block;
  per_block.reserve(blocks);
  for (int b = 0; b < blocks; ++b) {
    ag::Var qb = blocks == 1 ? q : ag::slice_rows(q, b * tq, tq);
    ag::Var kb = blocks == 1 ? k : ag::slice_rows(k, b * tk, tk);
    ag::Var vb = blocks == 1 ? v : ag::slice_rows(v, b * tk, tk);
    heads.clear();
    for (int h = 0; h < heads_; ++h) {
      ag::Var qh = heads_ == 1 ? qb : ag::slice_cols(qb, h * dh, dh);
      ag::Var kh = heads_ == 1 ? kb : ag::slice_cols(kb, h * dh, dh);
      ag::Var vh = heads_ == 1 ? vb : ag::slice_cols(vb, h * dh, dh);
      ag::Var attn = ag::softmax_rows(ag::scale(ag::matmul_nt(qh, kh), inv));
      heads.push_back(ag::matmul(attn, vh));
    }
    per_block.push_back(heads.size() == 1 ? heads[0] : ag::concat_cols(heads));
  }
  return out_(per_block.size() == 1 ? per_block[0] : ag::concat_rows(per_block));
}

TransformerBlock::TransformerBlock(ParameterGroup &group, const std::string &name, int dim, int heads,
                                   int ffn_dim, Rng &rng)
    : norm_attn_(group, name + ".norm_attn", dim),
      norm_ffn_(group, name + ".norm_ffn", dim),
      attn_(group, name + ".attn", dim, dim, dim, heads, rng),
      ffn_(group, name + ".ffn", dim, ffn_dim, rng) {}

ag::Var TransformerBlock::operator()(const ag::Var &x, int blocks, Axis axis) const {
  ag::Var h = norm_attn_(x);
  ag::Var y = ag::add(x, attn_(h, h, blocks, axis));
  return ag::add(y, ffn_(norm_ffn_(y)));
}

ConformerBlock::ConformerBlock(ParameterGroup &group, const std::string &name, int dim, int heads,
                               int ffn_dim, int kernel, Axis axis, Rng &rng)
    : axis_(axis),
      norm_ff1_(group, name + ".norm_ff1", dim),
      norm_attn_(group, name + ".norm_attn", dim),
      norm_conv_(group, name + ".norm_conv", dim),
      norm_ff2_(group, name + ".norm_ff2", dim),
      norm_out_(group, name + ".norm_out", dim),
      norm_dw_(group, name + ".norm_dw", dim),
      ff1_(group, name + ".ff1", dim, ffn_dim, rng),
      ff2_(group, name + ".ff2", dim, ffn_dim, rng),
      attn_(group, name + ".attn", dim, dim, dim, heads, rng),
      pw1_(group, name + ".pw1", dim, 2 * dim, rng),
      pw2_(group, name + ".pw2", dim, dim, rng) {
  const int k = axis == Axis::kSpeaker ? 1 : kernel;
  if (k % 2 == 0) throw Error("conformer: depthwise kernel must be odd");
  dw_weight_ = group.uniform(name + ".dw.weight", k, dim, std::sqrt(Real(3) / static_cast<Real>(k)), rng);
  dw_bias_ = group.zeros(name + ".dw.bias", 1, dim);
}

ag::Var ConformerBlock::operator()(const ag::Var &x, int blocks) const {
  ag::Var y = ag::add(x, ag::scale(ff1_(norm_ff1_(x)), Real(0.5)));
  ag::Var h = norm_attn_(y);
  y = ag::add(y, attn_(h, h, blocks, axis_));

  const Eigen::Index dim = x.cols();
  ag::Var c = pw1_(norm_conv_(y));
  c = ag::mul(ag::slice_cols(c, 0, dim), ag::sigmoid(ag::slice_cols(c, dim, dim)));  // GLU
  c = ag::depthwise_conv1d(c, dw_weight_, dw_bias_, blocks);
  c = pw2_(ag::silu(norm_dw_(c)));
  y = ag::add(y, c);

  y = ag::add(y, ag::scale(ff2_(norm_ff2_(y)), Real(0.5)));
  return norm_out_(y);
}

Lstm::Lstm(ParameterGroup &group, const std::string &name, int in, int hidden, Rng &rng) : hidden_(hidden) {
  const Real bound = Real(1) / std::sqrt(static_cast<Real>(hidden));
  w_in_ = group.uniform(name + ".w_in", in, 4 * hidden, bound, rng);
  w_rec_ = group.uniform(name + ".w_rec", hidden, 4 * hidden, bound, rng);
  Matrix b = Matrix::Zero(1, 4 * hidden);
  b.middleCols(hidden, hidden).setOnes();  // forget-gate bias
  bias_ = group.create(name + ".bias", std::move(b));
}

ag::Var Lstm::operator()(const ag::Var &x, bool reverse, int blocks) const {
  return ag::lstm(x, w_in_, w_rec_, bias_, reverse, blocks);
}

Conv1d::Conv1d(ParameterGroup &group, const std::string &name, int in, int out, int kernel, Rng &rng)
    : kernel_(kernel) {
  if (kernel % 2 == 0) throw Error("conv1d: kernel must be odd");
  const Real bound = std::sqrt(Real(6) / static_cast<Real>(kernel * in + out));
  weight_ = group.uniform(name + ".weight", kernel * in, out, bound, rng);
  bias_ = group.zeros(name + ".bias", 1, out);
}

ag::Var Conv1d::operator()(const ag::Var &x, int blocks) const {
  return ag::conv1d(x, weight_, bias_, kernel_, blocks);
}

Matrix sinusoidal_encoding(int positions, int dim) {
  Matrix pe(positions, dim);
  for (int t = 0; t < positions; ++t)
    for (int i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / dim);
      pe(t, i) = static_cast<Real>(i % 2 == 0 ? std::sin(t * rate) : std::cos(t * rate));
    }
  return pe;
}

}  // namespace avsd::nn
