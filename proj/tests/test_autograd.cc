// tests/test_autograd.cc

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

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "avsd/autograd.h"
#include "test_util.h"

namespace avsd {
namespace {

using ag::Var;
using Fn = std::function<Var(const std::vector<Var> &)>;

// Compares backprop against central differences of sum(f(x) .* R) for a
// fixed random R, on every input element (or a strided subset of large ones).
void check_gradients(const Fn &f, std::vector<Matrix> inputs, uint64_t seed = 1, double eps = 1e-3,
                     double atol = 5e-3, double rtol = 2e-2) {
  std::mt19937_64 rng(seed);
  std::vector<Var> leaves;
  for (auto &m : inputs) leaves.push_back(ag::leaf(m, true));
  Var out = f(leaves);
  const Matrix R = testing::random_matrix(rng, out.rows(), out.cols());
  Var loss = ag::sum_all(ag::mul(out, ag::constant(R)));
  ag::backward(loss);

  auto eval = [&](const std::vector<Matrix> &xs) {
    ag::NoGradGuard guard;
    std::vector<Var> vs;
    for (const auto &m : xs) vs.push_back(ag::constant(m));
    const Matrix y = f(vs).value();
    return (y.cast<double>().array() * R.cast<double>().array()).sum();
  };

  for (size_t i = 0; i < inputs.size(); ++i) {
    ASSERT_TRUE(leaves[i].has_grad()) << "input " << i << " received no gradient";
    const Eigen::Index n = inputs[i].size();
    const Eigen::Index step = std::max<Eigen::Index>(1, n / 40);
    for (Eigen::Index j = 0; j < n; j += step) {
      auto plus = inputs, minus = inputs;
      plus[i].data()[j] += static_cast<Real>(eps);
      minus[i].data()[j] -= static_cast<Real>(eps);
      const double numeric = (eval(plus) - eval(minus)) / (2 * eps);
      const double analytic = leaves[i].grad().data()[j];
      EXPECT_NEAR(analytic, numeric, atol + rtol * std::abs(numeric)) << "input " << i << " element " << j;
    }
  }
}

Matrix rnd(Eigen::Index r, Eigen::Index c, uint64_t seed, double lo = -1, double hi = 1) {
  std::mt19937_64 rng(seed);
  return testing::random_matrix(rng, r, c, lo, hi);
}

TEST(Gradients, Matmul) {
  check_gradients([](auto &v) { return ag::matmul(v[0], v[1]); }, {rnd(3, 4, 1), rnd(4, 5, 2)});
  check_gradients([](auto &v) { return ag::matmul_nt(v[0], v[1]); }, {rnd(3, 4, 3), rnd(5, 4, 4)});
}

TEST(Gradients, Elementwise) {
  check_gradients([](auto &v) { return ag::add(v[0], v[1]); }, {rnd(3, 4, 1), rnd(3, 4, 2)});
  check_gradients([](auto &v) { return ag::sub(v[0], v[1]); }, {rnd(3, 4, 1), rnd(3, 4, 2)});
  check_gradients([](auto &v) { return ag::mul(v[0], v[1]); }, {rnd(3, 4, 1), rnd(3, 4, 2)});
  check_gradients([](auto &v) { return ag::scale(v[0], 2.5f); }, {rnd(3, 4, 1)});
}

TEST(Gradients, Broadcasts) {
  check_gradients([](auto &v) { return ag::add_row(v[0], v[1]); }, {rnd(5, 3, 1), rnd(1, 3, 2)});
  check_gradients([](auto &v) { return ag::mul_row(v[0], v[1]); }, {rnd(5, 3, 1), rnd(1, 3, 2)});
  check_gradients([](auto &v) { return ag::mul_col(v[0], v[1]); }, {rnd(5, 3, 1), rnd(5, 1, 2)});
}

TEST(Gradients, Nonlinearities) {
  check_gradients([](auto &v) { return ag::relu(v[0]); }, {rnd(6, 5, 7)});
  check_gradients([](auto &v) { return ag::sigmoid(v[0]); }, {rnd(6, 5, 8, -3, 3)});
  check_gradients([](auto &v) { return ag::tanh(v[0]); }, {rnd(6, 5, 9, -2, 2)});
  check_gradients([](auto &v) { return ag::silu(v[0]); }, {rnd(6, 5, 10, -3, 3)});
}

TEST(Gradients, RowWise) {
  check_gradients([](auto &v) { return ag::softmax_rows(v[0]); }, {rnd(4, 6, 1, -2, 2)});
  check_gradients([](auto &v) { return ag::layer_norm(v[0], v[1], v[2]); }, {rnd(4, 6, 2), rnd(1, 6, 3), rnd(1, 6, 4)});
  check_gradients([](auto &v) { return ag::row_sum(v[0]); }, {rnd(4, 6, 5)});
  check_gradients([](auto &v) { return ag::l2_normalize_rows(v[0]); }, {rnd(4, 6, 6)});
}

TEST(Gradients, Reductions) {
  check_gradients([](auto &v) { return ag::mean_rows(v[0]); }, {rnd(4, 6, 1)});
  check_gradients([](auto &v) { return ag::sum_all(v[0]); }, {rnd(4, 6, 2)});
  check_gradients([](auto &v) { return ag::mean_all(v[0]); }, {rnd(4, 6, 3)});
}

TEST(Gradients, Layout) {
  check_gradients([](auto &v) { return ag::concat_cols({v[0], v[1]}); }, {rnd(3, 2, 1), rnd(3, 4, 2)});
  check_gradients([](auto &v) { return ag::concat_rows({v[0], v[1]}); }, {rnd(2, 3, 1), rnd(4, 3, 2)});
  check_gradients([](auto &v) { return ag::slice_cols(v[0], 1, 2); }, {rnd(3, 5, 3)});
  check_gradients([](auto &v) { return ag::slice_rows(v[0], 2, 2); }, {rnd(5, 3, 4)});
  check_gradients([](auto &v) { return ag::gather_rows(v[0], {3, 0, 3, 1}); }, {rnd(4, 3, 5)});
  check_gradients([](auto &v) { return ag::reshape(v[0], 2, 6); }, {rnd(4, 3, 6)});
  check_gradients([](auto &v) { return ag::tile_rows(v[0], 3); }, {rnd(2, 3, 7)});
  check_gradients([](auto &v) { return ag::repeat_rows(v[0], 3); }, {rnd(2, 3, 8)});
  check_gradients([](auto &v) { return ag::pool_time(v[0], 2, 4); }, {rnd(2 * 10, 3, 9)});
  check_gradients([](auto &v) { return ag::unpool_time(v[0], 2, 10, 4); }, {rnd(2 * 3, 3, 10)});
}

TEST(Gradients, Sequence) {
  check_gradients([](auto &v) { return ag::conv1d(v[0], v[1], v[2], 3, 2); },
                  {rnd(2 * 7, 3, 1), rnd(3 * 3, 4, 2), rnd(1, 4, 3)});
  check_gradients([](auto &v) { return ag::depthwise_conv1d(v[0], v[1], v[2], 2); },
                  {rnd(2 * 7, 3, 4), rnd(5, 3, 5), rnd(1, 3, 6)});
  for (bool reverse : {false, true})
    check_gradients([reverse](auto &v) { return ag::lstm(v[0], v[1], v[2], v[3], reverse, 2); },
                    {rnd(2 * 6, 3, 7), rnd(3, 4 * 4, 8, -0.5, 0.5), rnd(4, 4 * 4, 9, -0.5, 0.5), rnd(1, 16, 10)});
  check_gradients([](auto &v) { return ag::frame_pooling(v[0], 5, 2); }, {rnd(2 * 9, 3, 11)});
  check_gradients([](auto &v) { return ag::block_axis_attention(v[0], v[1], v[2], 3); },
                  {rnd(3 * 4, 5, 12), rnd(3 * 4, 5, 13), rnd(3 * 4, 5, 14)});
}

TEST(Gradients, Losses) {
  Matrix target = (rnd(4, 5, 1, 0, 1).array() > 0.5f).cast<Real>();
  check_gradients([target](auto &v) { return ag::binary_cross_entropy(v[0], target); }, {rnd(4, 5, 2, 0.05, 0.95)},
                  1, 1e-4);
  const std::vector<int> labels{0, 2, 1, 2};
  check_gradients([labels](auto &v) { return ag::aam_softmax_loss(v[0], labels, 0.2f, 4.0f); },
                  {rnd(4, 3, 3, -0.9, 0.9)}, 1, 1e-4);
}

TEST(Ops, PoolTimeMeansPerBlock) {
  Matrix x(2 * 6, 1);
  for (int i = 0; i < 12; ++i) x(i, 0) = static_cast<Real>(i);
  Matrix y = ag::pool_time(ag::constant(x), 2, 4).value();
  ASSERT_EQ(y.rows(), 4);
  EXPECT_FLOAT_EQ(y(0, 0), 1.5f);   // 0..3
  EXPECT_FLOAT_EQ(y(1, 0), 4.5f);   // 4..5
  EXPECT_FLOAT_EQ(y(2, 0), 7.5f);   // 6..9
  EXPECT_FLOAT_EQ(y(3, 0), 10.5f);  // 10..11
  Matrix back = ag::unpool_time(ag::constant(y), 2, 6, 4).value();
  EXPECT_FLOAT_EQ(back(5, 0), 4.5f);
  EXPECT_FLOAT_EQ(back(6, 0), 7.5f);
}

TEST(Ops, FramePoolingMatchesDirectStatistics) {
  const Matrix x = rnd(11, 2, 3);
  const int L = 5;
  Matrix y = ag::frame_pooling(ag::constant(x), L, 1).value();
  for (int t = 0; t < 11; ++t)
    for (int d = 0; d < 2; ++d) {
      double s = 0, ss = 0;
      for (int j = -2; j <= 2; ++j) s += x(std::clamp(t + j, 0, 10), d);
      const double mu = s / L;
      for (int j = -2; j <= 2; ++j) ss += std::pow(x(std::clamp(t + j, 0, 10), d) - mu, 2);
      EXPECT_NEAR(y(t, d), mu, 1e-6);
      EXPECT_NEAR(y(t, 2 + d), std::sqrt(ss / L), 1e-6);
    }
  EXPECT_THROW(ag::frame_pooling(ag::constant(x), 4, 1), Error);
}

TEST(Ops, BlockAttentionMatchesNaiveSoftmax) {
  const int B = 3, T = 2, D = 4;
  const Matrix q = rnd(B * T, D, 1), k = rnd(B * T, D, 2), v = rnd(B * T, D, 3);
  Matrix y = ag::block_axis_attention(ag::constant(q), ag::constant(k), ag::constant(v), B).value();
  for (int t = 0; t < T; ++t)
    for (int n = 0; n < B; ++n) {
      std::vector<double> w(B);
      double z = 0;
      for (int m = 0; m < B; ++m) z += w[m] = std::exp(q.row(n * T + t).dot(k.row(m * T + t)) / 2.0);
      for (int d = 0; d < D; ++d) {
        double e = 0;
        for (int m = 0; m < B; ++m) e += w[m] / z * v(m * T + t, d);
        EXPECT_NEAR(y(n * T + t, d), e, 1e-5);
      }
    }
}

TEST(Ops, ConvBlocksDoNotMix) {
  // Changing block 1 must leave block 0's outputs untouched.
  Matrix x = rnd(2 * 5, 2, 1);
  const Var w = ag::constant(rnd(3 * 2, 3, 2)), b = ag::constant(rnd(1, 3, 3));
  Matrix y1 = ag::conv1d(ag::constant(x), w, b, 3, 2).value();
  x.bottomRows(5).setRandom();
  Matrix y2 = ag::conv1d(ag::constant(x), w, b, 3, 2).value();
  EXPECT_EQ(y1.topRows(5), y2.topRows(5));
}

TEST(Ops, ShapeErrorsNameShapes) {
  try {
    ag::matmul(ag::constant(Matrix::Zero(2, 3)), ag::constant(Matrix::Zero(2, 3)));
    FAIL();
  } catch (const ShapeError &e) {
    EXPECT_NE(std::string(e.what()).find("(2, 3)"), std::string::npos) << e.what();
  }
}

TEST(Graph, NoGradGuardStopsRecording) {
  Var a = ag::leaf(rnd(2, 2, 1), true);
  {
    ag::NoGradGuard g;
    EXPECT_FALSE(ag::grad_enabled());
    EXPECT_FALSE(ag::relu(a).requires_grad());
  }
  EXPECT_TRUE(ag::grad_enabled());
  EXPECT_TRUE(ag::relu(a).requires_grad());
}

TEST(Graph, SharedInputsAccumulate) {
  Var a = ag::leaf(Matrix::Constant(1, 1, 3.0f), true);
  ag::backward(ag::sum_all(ag::mul(a, a)));
  EXPECT_FLOAT_EQ(a.grad()(0, 0), 6.0f);
}

TEST(Graph, BceSaturatedCellsKeepGradient) {
  Var p = ag::leaf(Matrix::Constant(1, 1, 1.0f), true);
  Matrix y = Matrix::Zero(1, 1);
  Var loss = ag::binary_cross_entropy(p, y);
  EXPECT_NEAR(loss.item(), -std::log(1e-7), 1e-3);
  ag::backward(loss);
  EXPECT_GT(p.grad()(0, 0), 0.0f);
}

}  // namespace
}  // namespace avsd
