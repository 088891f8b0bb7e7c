// src/autograd.cc

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

#include "avsd/autograd.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

namespace avsd::ag {

namespace {

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<Node>;

Var make(Matrix value, std::vector<Var> inputs, std::function<void(Node &)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled)
    for (const auto &in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto &in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(backward_fn);
  }
  return Var(std::move(node));
}

void push(const NodePtr &n, const Matrix &g) {
  if (n->requires_grad) n->accumulate(g);
}

void check_same(const Var &a, const Var &b, const char *op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.value()) + " vs " +
                     shape_str(b.value()));
}

// Kept inside the open interval (0, 1) in single precision.
inline Real sigm(Real x) {
  constexpr Real lo = 1e-30f, hi = 1.0f - 5.9604645e-8f;
  return std::clamp(Real(1) / (Real(1) + std::exp(-x)), lo, hi);
}

}  // namespace

void Node::accumulate(const Matrix &g) {
  if (grad.size() == 0)
    grad = g;
  else
    grad += g;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Var constant(Matrix m) {
  auto node = std::make_shared<Node>();
  node->value = std::move(m);
  return Var(std::move(node));
}

Var leaf(Matrix m, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(m);
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

void backward(const Var &loss) {
  if (loss.rows() != 1 || loss.cols() != 1) throw ShapeError("backward: loss must be 1x1");
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node *> order;
  std::unordered_set<Node *> seen;
  std::vector<std::pair<Node *, size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto &[node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node *child = node->inputs[next++].get();
      if (child->requires_grad && child->backward && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node *n = *it;
    if (n->grad.size() == 0) continue;
    n->backward(*n);
    // Interior gradients are not needed once propagated.
    if (n != loss.node().get()) n->grad.resize(0, 0);
  }
}

// ---------------------------------------------------------------- algebra

Var matmul(const Var &a, const Var &b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: " + shape_str(a.value()) + " x " + shape_str(b.value()));
  Matrix out = a.value() * b.value();
  return make(std::move(out), {a, b}, [](Node &n) {
    const auto &A = n.inputs[0], &B = n.inputs[1];
    if (A->requires_grad) A->accumulate(n.grad * B->value.transpose());
    if (B->requires_grad) B->accumulate(A->value.transpose() * n.grad);
  });
}

Var matmul_nt(const Var &a, const Var &b) {
  if (a.cols() != b.cols())
    throw ShapeError("matmul_nt: " + shape_str(a.value()) + " x " + shape_str(b.value()) + "^T");
  Matrix out = a.value() * b.value().transpose();
  return make(std::move(out), {a, b}, [](Node &n) {
    const auto &A = n.inputs[0], &B = n.inputs[1];
    if (A->requires_grad) A->accumulate(n.grad * B->value);
    if (B->requires_grad) B->accumulate(n.grad.transpose() * A->value);
  });
}

Var add(const Var &a, const Var &b) {
  check_same(a, b, "add");
  return make(a.value() + b.value(), {a, b}, [](Node &n) {
    push(n.inputs[0], n.grad);
    push(n.inputs[1], n.grad);
  });
}

Var sub(const Var &a, const Var &b) {
  check_same(a, b, "sub");
  return make(a.value() - b.value(), {a, b}, [](Node &n) {
    push(n.inputs[0], n.grad);
    if (n.inputs[1]->requires_grad) n.inputs[1]->accumulate(-n.grad);
  });
}

Var mul(const Var &a, const Var &b) {
  check_same(a, b, "mul");
  return make(a.value().cwiseProduct(b.value()), {a, b}, [](Node &n) {
    const auto &A = n.inputs[0], &B = n.inputs[1];
    if (A->requires_grad) A->accumulate(n.grad.cwiseProduct(B->value));
    if (B->requires_grad) B->accumulate(n.grad.cwiseProduct(A->value));
  });
}

Var scale(const Var &a, Real s) {
  return make(a.value() * s, {a}, [s](Node &n) { n.inputs[0]->accumulate(n.grad * s); });
}

Var add_row(const Var &a, const Var &row) {
  if (row.rows() != 1 || row.cols() != a.cols())
    throw ShapeError("add_row: " + shape_str(a.value()) + " + " + shape_str(row.value()));
  Matrix out = a.value().rowwise() + row.value().row(0);
  return make(std::move(out), {a, row}, [](Node &n) {
    push(n.inputs[0], n.grad);
    if (n.inputs[1]->requires_grad) n.inputs[1]->accumulate(n.grad.colwise().sum());
  });
}

Var mul_row(const Var &a, const Var &row) {
  if (row.rows() != 1 || row.cols() != a.cols())
    throw ShapeError("mul_row: " + shape_str(a.value()) + " * " + shape_str(row.value()));
  Matrix out = a.value().array().rowwise() * row.value().row(0).array();
  return make(std::move(out), {a, row}, [](Node &n) {
    const auto &A = n.inputs[0], &R = n.inputs[1];
    if (A->requires_grad) A->accumulate(n.grad.array().rowwise() * R->value.row(0).array());
    if (R->requires_grad) R->accumulate(n.grad.cwiseProduct(A->value).colwise().sum());
  });
}

Var mul_col(const Var &a, const Var &col) {
  if (col.cols() != 1 || col.rows() != a.rows())
    throw ShapeError("mul_col: " + shape_str(a.value()) + " * " + shape_str(col.value()));
  Matrix out = a.value().array().colwise() * col.value().col(0).array();
  return make(std::move(out), {a, col}, [](Node &n) {
    const auto &A = n.inputs[0], &C = n.inputs[1];
    if (A->requires_grad) A->accumulate(n.grad.array().colwise() * C->value.col(0).array());
    if (C->requires_grad) C->accumulate(n.grad.cwiseProduct(A->value).rowwise().sum());
  });
}

// ---------------------------------------------------------- nonlinearity

Var relu(const Var &a) {
  return make(a.value().cwiseMax(Real(0)), {a}, [](Node &n) {
    Matrix g = (n.inputs[0]->value.array() > 0).select(n.grad, Real(0));
    n.inputs[0]->accumulate(g);
  });
}

Var sigmoid(const Var &a) {
  Matrix y = a.value().unaryExpr([](Real x) { return sigm(x); });
  return make(std::move(y), {a}, [](Node &n) {
    Matrix g = n.grad.array() * n.value.array() * (Real(1) - n.value.array());
    n.inputs[0]->accumulate(g);
  });
}

Var tanh(const Var &a) {
  Matrix y = a.value().array().tanh();
  return make(std::move(y), {a}, [](Node &n) {
    Matrix g = n.grad.array() * (Real(1) - n.value.array().square());
    n.inputs[0]->accumulate(g);
  });
}

Var silu(const Var &a) {
  Matrix y = a.value().unaryExpr([](Real x) { return x * sigm(x); });
  return make(std::move(y), {a}, [](Node &n) {
    const Matrix &x = n.inputs[0]->value;
    Matrix g = x.binaryExpr(n.grad, [](Real xv, Real gv) {
      Real s = sigm(xv);
      return gv * (s + xv * s * (Real(1) - s));
    });
    n.inputs[0]->accumulate(g);
  });
}

// ------------------------------------------------------------- row-wise

Var softmax_rows(const Var &a) {
  Matrix y = a.value();
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    Real mx = y.row(r).maxCoeff();
    y.row(r) = (y.row(r).array() - mx).exp();
    y.row(r) /= y.row(r).sum();
  }
  return make(std::move(y), {a}, [](Node &n) {
    Eigen::Matrix<Real, Eigen::Dynamic, 1> dot = n.grad.cwiseProduct(n.value).rowwise().sum();
    Matrix g = n.value.array() * (n.grad.colwise() - dot).array();
    n.inputs[0]->accumulate(g);
  });
}

Var layer_norm(const Var &a, const Var &gamma, const Var &beta, Real eps) {
  const Matrix &x = a.value();
  const Eigen::Index R = x.rows(), C = x.cols();
  if (gamma.cols() != C || beta.cols() != C) throw ShapeError("layer_norm: width mismatch");
  Matrix xhat(R, C);
  Eigen::Matrix<Real, Eigen::Dynamic, 1> inv_std(R);
  for (Eigen::Index r = 0; r < R; ++r) {
    Real mu = x.row(r).mean();
    Real var = (x.row(r).array() - mu).square().mean();
    inv_std(r) = Real(1) / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mu) * inv_std(r);
  }
  Matrix y = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
             beta.value().row(0).array();
  return make(std::move(y), {a, gamma, beta}, [xhat, inv_std](Node &n) {
    const auto &A = n.inputs[0], &G = n.inputs[1], &B = n.inputs[2];
    if (G->requires_grad) G->accumulate(n.grad.cwiseProduct(xhat).colwise().sum());
    if (B->requires_grad) B->accumulate(n.grad.colwise().sum());
    if (A->requires_grad) {
      Matrix dxhat = n.grad.array().rowwise() * G->value.row(0).array();
      const Real C = static_cast<Real>(dxhat.cols());
      Matrix dx(dxhat.rows(), dxhat.cols());
      for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
        Real m1 = dxhat.row(r).sum() / C;
        Real m2 = dxhat.row(r).dot(xhat.row(r)) / C;
        dx.row(r) = (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std(r);
      }
      A->accumulate(dx);
    }
  });
}

Var row_sum(const Var &a) {
  Matrix y = a.value().rowwise().sum();
  return make(std::move(y), {a}, [](Node &n) {
    const Eigen::Index C = n.inputs[0]->value.cols();
    n.inputs[0]->accumulate(n.grad.replicate(1, C));
  });
}

Var l2_normalize_rows(const Var &a, Real eps) {
  const Matrix &x = a.value();
  Eigen::Matrix<Real, Eigen::Dynamic, 1> norm =
      (x.rowwise().squaredNorm().array() + eps).sqrt();
  Matrix y = x.array().colwise() / norm.array();
  return make(std::move(y), {a}, [norm](Node &n) {
    Eigen::Matrix<Real, Eigen::Dynamic, 1> dot = n.grad.cwiseProduct(n.value).rowwise().sum();
    Matrix proj = n.value.array().colwise() * dot.array();
    Matrix g = (n.grad - proj).array().colwise() / norm.array();
    n.inputs[0]->accumulate(g);
  });
}

// ------------------------------------------------------------ reductions

Var mean_rows(const Var &a) {
  Matrix y = a.value().colwise().mean();
  return make(std::move(y), {a}, [](Node &n) {
    const Eigen::Index R = n.inputs[0]->value.rows();
    n.inputs[0]->accumulate(n.grad.replicate(R, 1) / static_cast<Real>(R));
  });
}

Var sum_all(const Var &a) {
  Matrix y(1, 1);
  y(0, 0) = a.value().sum();
  return make(std::move(y), {a}, [](Node &n) {
    const auto &A = n.inputs[0];
    A->accumulate(Matrix::Constant(A->value.rows(), A->value.cols(), n.grad(0, 0)));
  });
}

Var mean_all(const Var &a) {
  return scale(sum_all(a), Real(1) / static_cast<Real>(std::max<Eigen::Index>(1, a.value().size())));
}

// ---------------------------------------------------------------- layout

Var concat_cols(const std::vector<Var> &parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Eigen::Index R = parts[0].rows();
  Eigen::Index C = 0;
  for (const auto &p : parts) {
    if (p.rows() != R) throw ShapeError("concat_cols: row mismatch");
    C += p.cols();
  }
  Matrix y(R, C);
  Eigen::Index off = 0;
  for (const auto &p : parts) {
    y.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return make(std::move(y), parts, [](Node &n) {
    Eigen::Index off = 0;
    for (const auto &in : n.inputs) {
      if (in->requires_grad) in->accumulate(n.grad.middleCols(off, in->value.cols()));
      off += in->value.cols();
    }
  });
}

Var concat_rows(const std::vector<Var> &parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const Eigen::Index C = parts[0].cols();
  Eigen::Index R = 0;
  for (const auto &p : parts) {
    if (p.cols() != C) throw ShapeError("concat_rows: column mismatch");
    R += p.rows();
  }
  Matrix y(R, C);
  Eigen::Index off = 0;
  for (const auto &p : parts) {
    y.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return make(std::move(y), parts, [](Node &n) {
    Eigen::Index off = 0;
    for (const auto &in : n.inputs) {
      if (in->requires_grad) in->accumulate(n.grad.middleRows(off, in->value.rows()));
      off += in->value.rows();
    }
  });
}

Var slice_cols(const Var &a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols: out of range");
  return make(a.value().middleCols(start, count), {a}, [start, count](Node &n) {
    const auto &A = n.inputs[0];
    Matrix g = Matrix::Zero(A->value.rows(), A->value.cols());
    g.middleCols(start, count) = n.grad;
    A->accumulate(g);
  });
}

Var slice_rows(const Var &a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("slice_rows: out of range");
  return make(a.value().middleRows(start, count), {a}, [start, count](Node &n) {
    const auto &A = n.inputs[0];
    Matrix g = Matrix::Zero(A->value.rows(), A->value.cols());
    g.middleRows(start, count) = n.grad;
    A->accumulate(g);
  });
}

Var gather_rows(const Var &a, const std::vector<Eigen::Index> &rows) {
  Matrix y(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) throw ShapeError("gather_rows: index out of range");
    y.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  return make(std::move(y), {a}, [rows](Node &n) {
    const auto &A = n.inputs[0];
    Matrix g = Matrix::Zero(A->value.rows(), A->value.cols());
    for (size_t i = 0; i < rows.size(); ++i) g.row(rows[i]) += n.grad.row(static_cast<Eigen::Index>(i));
    A->accumulate(g);
  });
}

Var reshape(const Var &a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.value().size()) throw ShapeError("reshape: size mismatch");
  Matrix y = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  return make(std::move(y), {a}, [](Node &n) {
    const auto &A = n.inputs[0];
    A->accumulate(Eigen::Map<const Matrix>(n.grad.data(), A->value.rows(), A->value.cols()));
  });
}

Var tile_rows(const Var &a, int times) {
  return make(a.value().replicate(times, 1), {a}, [times](Node &n) {
    const auto &A = n.inputs[0];
    const Eigen::Index R = A->value.rows();
    Matrix g = Matrix::Zero(R, A->value.cols());
    for (int k = 0; k < times; ++k) g += n.grad.middleRows(k * R, R);
    A->accumulate(g);
  });
}

Var repeat_rows(const Var &a, int times) {
  const Eigen::Index R = a.rows();
  Matrix y(R * times, a.cols());
  for (Eigen::Index r = 0; r < R; ++r) y.middleRows(r * times, times) = a.value().row(r).replicate(times, 1);
  return make(std::move(y), {a}, [times](Node &n) {
    const auto &A = n.inputs[0];
    Matrix g(A->value.rows(), A->value.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) g.row(r) = n.grad.middleRows(r * times, times).colwise().sum();
    A->accumulate(g);
  });
}

Var pool_time(const Var &a, int blocks, int stride) {
  if (stride <= 0 || blocks <= 0 || a.rows() % blocks != 0) throw ShapeError("pool_time: bad blocks/stride");
  const int T = static_cast<int>(a.rows() / blocks);
  const int Tp = (T + stride - 1) / stride;
  Matrix y(static_cast<Eigen::Index>(blocks) * Tp, a.cols());
  for (int b = 0; b < blocks; ++b)
    for (int j = 0; j < Tp; ++j) {
      int lo = j * stride, hi = std::min(T, lo + stride);
      y.row(b * Tp + j) = a.value().middleRows(b * T + lo, hi - lo).colwise().mean();
    }
  return make(std::move(y), {a}, [blocks, stride, T, Tp](Node &n) {
    const auto &A = n.inputs[0];
    Matrix g(A->value.rows(), A->value.cols());
    for (int b = 0; b < blocks; ++b)
      for (int j = 0; j < Tp; ++j) {
        int lo = j * stride, hi = std::min(T, lo + stride);
        for (int t = lo; t < hi; ++t) g.row(b * T + t) = n.grad.row(b * Tp + j) / static_cast<Real>(hi - lo);
      }
    A->accumulate(g);
  });
}

Var unpool_time(const Var &a, int blocks, int frames, int stride) {
  const int Tp = (frames + stride - 1) / stride;
  if (a.rows() != static_cast<Eigen::Index>(blocks) * Tp) throw ShapeError("unpool_time: bad input rows");
  Matrix y(static_cast<Eigen::Index>(blocks) * frames, a.cols());
  for (int b = 0; b < blocks; ++b)
    for (int t = 0; t < frames; ++t) y.row(b * frames + t) = a.value().row(b * Tp + t / stride);
  return make(std::move(y), {a}, [blocks, frames, stride, Tp](Node &n) {
    const auto &A = n.inputs[0];
    Matrix g = Matrix::Zero(A->value.rows(), A->value.cols());
    for (int b = 0; b < blocks; ++b)
      for (int t = 0; t < frames; ++t) g.row(b * Tp + t / stride) += n.grad.row(b * frames + t);
    A->accumulate(g);
  });
}

// -------------------------------------------------------------- sequence

Var conv1d(const Var &x, const Var &weight, const Var &bias, int kernel, int blocks) {
  const Eigen::Index cin = x.cols();
  if (kernel % 2 == 0 || weight.rows() != kernel * cin || bias.cols() != weight.cols() ||
      x.rows() % blocks != 0)
    throw ShapeError("conv1d: bad shapes x" + shape_str(x.value()) + " w" + shape_str(weight.value()));
  const int T = static_cast<int>(x.rows() / blocks);
  const int half = kernel / 2;
  Matrix cols = Matrix::Zero(x.rows(), kernel * cin);
  for (int b = 0; b < blocks; ++b)
    for (int t = 0; t < T; ++t)
      for (int j = 0; j < kernel; ++j) {
        int src = t + j - half;
        if (src >= 0 && src < T) cols.block(b * T + t, j * cin, 1, cin) = x.value().row(b * T + src);
      }
  Matrix y = (cols * weight.value()).rowwise() + bias.value().row(0);
  return make(std::move(y), {x, weight, bias}, [cols, kernel, T, blocks, half](Node &n) {
    const auto &X = n.inputs[0], &W = n.inputs[1], &B = n.inputs[2];
    if (W->requires_grad) W->accumulate(cols.transpose() * n.grad);
    if (B->requires_grad) B->accumulate(n.grad.colwise().sum());
    if (X->requires_grad) {
      const Eigen::Index cin = X->value.cols();
      Matrix dcols = n.grad * W->value.transpose();
      Matrix dx = Matrix::Zero(X->value.rows(), cin);
      for (int b = 0; b < blocks; ++b)
        for (int t = 0; t < T; ++t)
          for (int j = 0; j < kernel; ++j) {
            int src = t + j - half;
            if (src >= 0 && src < T) dx.row(b * T + src) += dcols.block(b * T + t, j * cin, 1, cin);
          }
      X->accumulate(dx);
    }
  });
}

Var depthwise_conv1d(const Var &x, const Var &weight, const Var &bias, int blocks) {
  const int kernel = static_cast<int>(weight.rows());
  if (kernel % 2 == 0 || weight.cols() != x.cols() || bias.cols() != x.cols() || x.rows() % blocks != 0)
    throw ShapeError("depthwise_conv1d: bad shapes");
  const int T = static_cast<int>(x.rows() / blocks);
  const int half = kernel / 2;
  Matrix y = bias.value().replicate(x.rows(), 1);
  for (int b = 0; b < blocks; ++b)
    for (int t = 0; t < T; ++t)
      for (int j = 0; j < kernel; ++j) {
        int src = t + j - half;
        if (src >= 0 && src < T)
          y.row(b * T + t).array() += weight.value().row(j).array() * x.value().row(b * T + src).array();
      }
  return make(std::move(y), {x, weight, bias}, [T, blocks, half, kernel](Node &n) {
    const auto &X = n.inputs[0], &W = n.inputs[1], &B = n.inputs[2];
    Matrix dx = Matrix::Zero(X->value.rows(), X->value.cols());
    Matrix dw = Matrix::Zero(W->value.rows(), W->value.cols());
    for (int b = 0; b < blocks; ++b)
      for (int t = 0; t < T; ++t)
        for (int j = 0; j < kernel; ++j) {
          int src = t + j - half;
          if (src < 0 || src >= T) continue;
          dw.row(j).array() += n.grad.row(b * T + t).array() * X->value.row(b * T + src).array();
          dx.row(b * T + src).array() += n.grad.row(b * T + t).array() * W->value.row(j).array();
        }
    if (X->requires_grad) X->accumulate(dx);
    if (W->requires_grad) W->accumulate(dw);
    if (B->requires_grad) B->accumulate(n.grad.colwise().sum());
  });
}

Var lstm(const Var &x, const Var &w_in, const Var &w_rec, const Var &bias, bool reverse, int blocks) {
  const Eigen::Index H = w_rec.rows();
  if (w_in.rows() != x.cols() || w_in.cols() != 4 * H || w_rec.cols() != 4 * H || bias.cols() != 4 * H ||
      x.rows() % blocks != 0)
    throw ShapeError("lstm: bad shapes x" + shape_str(x.value()) + " w_in" + shape_str(w_in.value()));
  const int T = static_cast<int>(x.rows() / blocks);
  Matrix pre = (x.value() * w_in.value()).rowwise() + bias.value().row(0);
  Matrix gates(x.rows(), 4 * H);  // i, f, g, o after activation
  Matrix cell(x.rows(), H);
  Matrix out(x.rows(), H);
  Matrix h = Matrix::Zero(blocks, H), c = Matrix::Zero(blocks, H);
  for (int s = 0; s < T; ++s) {
    const int t = reverse ? T - 1 - s : s;
    Matrix z = h * w_rec.value();
    for (int b = 0; b < blocks; ++b) {
      const Eigen::Index r = b * T + t;
      z.row(b) += pre.row(r);
      auto zi = z.row(b).segment(0, H), zf = z.row(b).segment(H, H);
      auto zg = z.row(b).segment(2 * H, H), zo = z.row(b).segment(3 * H, H);
      for (Eigen::Index k = 0; k < H; ++k) {
        Real i = sigm(zi(k)), f = sigm(zf(k)), g = std::tanh(zg(k)), o = sigm(zo(k));
        gates(r, k) = i;
        gates(r, H + k) = f;
        gates(r, 2 * H + k) = g;
        gates(r, 3 * H + k) = o;
        c(b, k) = f * c(b, k) + i * g;
        h(b, k) = o * std::tanh(c(b, k));
      }
      cell.row(r) = c.row(b);
      out.row(r) = h.row(b);
    }
  }
  return make(std::move(out), {x, w_in, w_rec, bias}, [gates, cell, T, blocks, H, reverse](Node &n) {
    const auto &X = n.inputs[0], &Win = n.inputs[1], &Wrec = n.inputs[2], &B = n.inputs[3];
    Matrix dpre(X->value.rows(), 4 * H);
    Matrix dwrec = Matrix::Zero(H, 4 * H);
    Matrix dh_next = Matrix::Zero(blocks, H), dc_next = Matrix::Zero(blocks, H);
    Matrix dz(blocks, 4 * H), h_prev(blocks, H);
    for (int s = T - 1; s >= 0; --s) {
      const int t = reverse ? T - 1 - s : s;
      const int tp = reverse ? t + 1 : t - 1;  // previous step in processing order
      const bool has_prev = s > 0;
      for (int b = 0; b < blocks; ++b) {
        const Eigen::Index r = b * T + t;
        const Eigen::Index rp = b * T + tp;
        for (Eigen::Index k = 0; k < H; ++k) {
          Real i = gates(r, k), f = gates(r, H + k), g = gates(r, 2 * H + k), o = gates(r, 3 * H + k);
          Real ct = cell(r, k), tc = std::tanh(ct);
          Real c_prev = has_prev ? cell(rp, k) : Real(0);
          Real dh = n.grad(r, k) + dh_next(b, k);
          Real dc = dh * o * (Real(1) - tc * tc) + dc_next(b, k);
          dz(b, k) = dc * g * i * (Real(1) - i);
          dz(b, H + k) = dc * c_prev * f * (Real(1) - f);
          dz(b, 2 * H + k) = dc * i * (Real(1) - g * g);
          dz(b, 3 * H + k) = dh * tc * o * (Real(1) - o);
          dc_next(b, k) = dc * f;
          // h_{prev} = o_prev * tanh(c_prev); recover from stored gates/cell.
          h_prev(b, k) = has_prev ? gates(rp, 3 * H + k) * std::tanh(c_prev) : Real(0);
        }
        dpre.row(r) = dz.row(b);
      }
      dwrec.noalias() += h_prev.transpose() * dz;
      dh_next = dz * Wrec->value.transpose();
    }
    if (Wrec->requires_grad) Wrec->accumulate(dwrec);
    if (B->requires_grad) B->accumulate(dpre.colwise().sum());
    if (Win->requires_grad) Win->accumulate(X->value.transpose() * dpre);
    if (X->requires_grad) X->accumulate(dpre * Win->value.transpose());
  });
}

Var frame_pooling(const Var &x, int segment_len, int blocks) {
  if (segment_len < 1 || segment_len % 2 == 0)
    throw Error("frame_level_pooling: segment_len must be odd and >= 1, got " + std::to_string(segment_len));
  if (blocks <= 0 || x.rows() % blocks != 0 || x.rows() == 0) throw ShapeError("frame_pooling: bad blocks");
  const int T = static_cast<int>(x.rows() / blocks);
  const Eigen::Index D = x.cols();
  const int half = segment_len / 2;
  const Matrix &in = x.value();
  Matrix y(x.rows(), 2 * D);
  std::vector<double> mu(D), acc(D);
  for (int b = 0; b < blocks; ++b)
    for (int t = 0; t < T; ++t) {
      std::fill(mu.begin(), mu.end(), 0.0);
      for (int j = -half; j <= half; ++j) {
        const Eigen::Index r = b * T + std::clamp(t + j, 0, T - 1);
        for (Eigen::Index d = 0; d < D; ++d) mu[d] += in(r, d);
      }
      for (auto &m : mu) m /= segment_len;
      std::fill(acc.begin(), acc.end(), 0.0);
      for (int j = -half; j <= half; ++j) {
        const Eigen::Index r = b * T + std::clamp(t + j, 0, T - 1);
        for (Eigen::Index d = 0; d < D; ++d) {
          double dev = in(r, d) - mu[d];
          acc[d] += dev * dev;
        }
      }
      for (Eigen::Index d = 0; d < D; ++d) {
        y(b * T + t, d) = static_cast<Real>(mu[d]);
        y(b * T + t, D + d) = static_cast<Real>(std::sqrt(acc[d] / segment_len));
      }
    }
  return make(std::move(y), {x}, [T, D, half, segment_len, blocks](Node &n) {
    const auto &X = n.inputs[0];
    const Matrix &in = X->value;
    Matrix dx = Matrix::Zero(in.rows(), D);
    const Real inv_len = Real(1) / static_cast<Real>(segment_len);
    for (int b = 0; b < blocks; ++b)
      for (int t = 0; t < T; ++t) {
        const Eigen::Index o = b * T + t;
        for (Eigen::Index d = 0; d < D; ++d) {
          const Real mu = n.value(o, d);
          // Floor keeps the gradient finite on zero-variance windows.
          const Real sigma = std::max(n.value(o, D + d), Real(1e-4));
          const Real gmu = n.grad(o, d) * inv_len;
          const Real gsd = n.grad(o, D + d) * inv_len / sigma;
          for (int j = -half; j <= half; ++j) {
            const Eigen::Index r = b * T + std::clamp(t + j, 0, T - 1);
            dx(r, d) += gmu + gsd * (in(r, d) - mu);
          }
        }
      }
    X->accumulate(dx);
  });
}

Var block_axis_attention(const Var &q, const Var &k, const Var &v, int blocks) {
  check_same(q, k, "block_axis_attention");
  check_same(q, v, "block_axis_attention");
  if (blocks <= 0 || q.rows() % blocks != 0) throw ShapeError("block_axis_attention: bad blocks");
  const int T = static_cast<int>(q.rows() / blocks);
  const Eigen::Index D = q.cols();
  const Real inv = Real(1) / std::sqrt(static_cast<Real>(D));
  // attn[t] is a blocks x blocks row-stochastic matrix.
  std::vector<Matrix> attn(T, Matrix(blocks, blocks));
  Matrix y = Matrix::Zero(q.rows(), D);
  for (int t = 0; t < T; ++t) {
    Matrix &a = attn[t];
    for (int n = 0; n < blocks; ++n)
      for (int m = 0; m < blocks; ++m) a(n, m) = q.value().row(n * T + t).dot(k.value().row(m * T + t)) * inv;
    for (int n = 0; n < blocks; ++n) {
      Real mx = a.row(n).maxCoeff();
      a.row(n) = (a.row(n).array() - mx).exp();
      a.row(n) /= a.row(n).sum();
      for (int m = 0; m < blocks; ++m) y.row(n * T + t) += a(n, m) * v.value().row(m * T + t);
    }
  }
  return make(std::move(y), {q, k, v}, [attn = std::move(attn), T, blocks, inv](Node &n) {
    const auto &Q = n.inputs[0], &K = n.inputs[1], &V = n.inputs[2];
    Matrix dq = Matrix::Zero(Q->value.rows(), Q->value.cols());
    Matrix dk = Matrix::Zero(dq.rows(), dq.cols()), dv = Matrix::Zero(dq.rows(), dq.cols());
    Matrix da(blocks, blocks);
    for (int t = 0; t < T; ++t) {
      const Matrix &a = attn[t];
      for (int i = 0; i < blocks; ++i)
        for (int m = 0; m < blocks; ++m) {
          da(i, m) = n.grad.row(i * T + t).dot(V->value.row(m * T + t));
          dv.row(m * T + t) += a(i, m) * n.grad.row(i * T + t);
        }
      for (int i = 0; i < blocks; ++i) {
        Real s = a.row(i).dot(da.row(i));
        for (int m = 0; m < blocks; ++m) {
          Real ds = a(i, m) * (da(i, m) - s) * inv;
          dq.row(i * T + t) += ds * K->value.row(m * T + t);
          dk.row(m * T + t) += ds * Q->value.row(i * T + t);
        }
      }
    }
    if (Q->requires_grad) Q->accumulate(dq);
    if (K->requires_grad) K->accumulate(dk);
    if (V->requires_grad) V->accumulate(dv);
  });
}

// ----------------------------------------------------------------- losses

Var binary_cross_entropy(const Var &probs, const Matrix &target, Real clamp) {
  if (probs.rows() != target.rows() || probs.cols() != target.cols())
    throw ShapeError("diarization_loss: probs " + shape_str(probs.value()) + " vs target " + shape_str(target));
  const double lo = clamp, hi = 1.0 - static_cast<double>(clamp);
  double total = 0.0;
  const Matrix &p = probs.value();
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    double pc = std::clamp(static_cast<double>(p.data()[i]), lo, hi);
    double y = target.data()[i];
    total -= y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc);
  }
  const double count = static_cast<double>(std::max<Eigen::Index>(1, p.size()));
  Matrix out(1, 1);
  out(0, 0) = static_cast<Real>(total / count);
  return make(std::move(out), {probs}, [target, lo, hi, count](Node &n) {
    const auto &P = n.inputs[0];
    Matrix g(P->value.rows(), P->value.cols());
    const double scale = n.grad(0, 0) / count;
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      // Gradient taken at the clamped point so saturated cells still push back.
      double p = std::clamp(static_cast<double>(P->value.data()[i]), lo, hi), y = target.data()[i];
      g.data()[i] = static_cast<Real>(scale * (-y / p + (1.0 - y) / (1.0 - p)));
    }
    P->accumulate(g);
  });
}

Var aam_softmax_loss(const Var &cosines, const std::vector<int> &labels, Real margin, Real scale_s) {
  const Matrix &cs = cosines.value();
  if (static_cast<Eigen::Index>(labels.size()) != cs.rows()) throw ShapeError("aam_softmax_loss: label count");
  const double m = margin, s = scale_s;
  const double cos_m = std::cos(m), sin_m = std::sin(m);
  const double th = std::cos(M_PI - m), mm = std::sin(M_PI - m) * m;
  Matrix prob(cs.rows(), cs.cols());
  std::vector<double> dphi(labels.size());
  double total = 0.0;
  for (Eigen::Index r = 0; r < cs.rows(); ++r) {
    const int y = labels[r];
    if (y < 0 || y >= cs.cols()) throw Error("aam_softmax_loss: label out of range");
    std::vector<double> logit(cs.cols());
    for (Eigen::Index c = 0; c < cs.cols(); ++c) logit[c] = s * cs(r, c);
    double cy = std::clamp(static_cast<double>(cs(r, y)), -1.0 + 1e-7, 1.0 - 1e-7);
    double sin_t = std::sqrt(1.0 - cy * cy);
    if (cy > th) {
      logit[y] = s * (cy * cos_m - sin_t * sin_m);
      dphi[r] = cos_m + cy * sin_m / sin_t;
    } else {
      logit[y] = s * (cy - mm);
      dphi[r] = 1.0;
    }
    double mx = *std::max_element(logit.begin(), logit.end());
    double z = 0.0;
    for (double l : logit) z += std::exp(l - mx);
    total += -(logit[y] - mx - std::log(z));
    for (Eigen::Index c = 0; c < cs.cols(); ++c) prob(r, c) = static_cast<Real>(std::exp(logit[c] - mx) / z);
  }
  const double count = static_cast<double>(std::max<Eigen::Index>(1, cs.rows()));
  Matrix out(1, 1);
  out(0, 0) = static_cast<Real>(total / count);
  return make(std::move(out), {cosines}, [prob, labels, dphi, s, count](Node &n) {
    Matrix g = prob;
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      g(r, labels[r]) -= 1;
      g.row(r) *= static_cast<Real>(s);
      g(r, labels[r]) *= static_cast<Real>(dphi[r]);
    }
    n.inputs[0]->accumulate(g * static_cast<Real>(n.grad(0, 0) / count));
  });
}

}  // namespace avsd::ag
