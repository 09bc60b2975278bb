#include <gtest/gtest.h>

#include <cmath>

#include "common.hpp"
#include "dsaa/ops.hpp"

using namespace dsaa;
using dsaa::testing::grad_check;
using dsaa::testing::random_tensor;

namespace {

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) out[i * n + j] += a.at(i, p) * b.at(p, j);
  return Tensor::matrix(m, n, out);
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Rng rng(1);
  Tensor b = random_tensor(rng, {3, 5}, 1.0, false);
  Tensor eye = Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor y = ops::matmul(eye, b);
  for (std::size_t i = 0; i < b.numel(); ++i) EXPECT_EQ(y[i], b[i]);
}

TEST(Matmul, OneByOne) {
  EXPECT_EQ(ops::matmul(Tensor::matrix(1, 1, {2}), Tensor::matrix(1, 1, {3})).item(), 6.0);
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(2);
  Tensor a = random_tensor(rng, {4, 5}, 1.0, false), b = random_tensor(rng, {5, 3}, 1.0, false);
  Tensor y = ops::matmul(a, b), ref = naive_matmul(a, b);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  try {
    ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x2]"), std::string::npos) << msg;
  }
}

TEST(Matmul, Associative) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    const std::size_t m = 1 + rng.index(5), k = 1 + rng.index(5), n = 1 + rng.index(5), p = 1 + rng.index(5);
    Tensor a = random_tensor(rng, {m, k}, 1.0, false), b = random_tensor(rng, {k, n}, 1.0, false),
           c = random_tensor(rng, {n, p}, 1.0, false);
    Tensor l = ops::matmul(ops::matmul(a, b), c), r = ops::matmul(a, ops::matmul(b, c));
    for (std::size_t i = 0; i < l.numel(); ++i) EXPECT_NEAR(l[i], r[i], 1e-9);
  }
}

TEST(Gelu, Anchors) {
  EXPECT_EQ(ops::gelu(Tensor::vector({0.0})).item(), 0.0);
  EXPECT_NEAR(ops::gelu(Tensor::vector({10.0})).item(), 10.0, 1e-9);
  EXPECT_NEAR(ops::gelu(Tensor::vector({1.0})).item(), 0.841345, 1e-5);
}

TEST(LayerNorm, ConstantRowMapsToZero) {
  Tensor y = ops::layer_norm(Tensor::vector({5, 5, 5, 5}), 1e-5);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(y[i], 0.0);
}

TEST(LayerNorm, TwoElementClosedForm) {
  Tensor y = ops::layer_norm(Tensor::vector({1, 3}), 1e-5);
  const double expect = 1.0 / std::sqrt(1.0 + 1e-5);
  EXPECT_NEAR(y[0], -expect, 1e-12);
  EXPECT_NEAR(y[1], expect, 1e-12);
}

TEST(LayerNorm, RowMeansVanish) {
  Rng rng(4);
  Tensor x = random_tensor(rng, {6, 9}, 3.0, false);
  Tensor y = ops::layer_norm(x, 1e-5);
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 9; ++c) s += y.at(r, c);
    EXPECT_NEAR(s / 9, 0.0, 1e-10);
  }
}

TEST(Softmax, Anchors) {
  Tensor a = ops::softmax_lastaxis(Tensor::vector({0, 0}));
  EXPECT_EQ(a[0], 0.5);
  EXPECT_EQ(a[1], 0.5);
  Tensor b = ops::softmax_lastaxis(Tensor::vector({1000, 0}));
  EXPECT_NEAR(b[0], 1.0, 1e-12);
  EXPECT_NEAR(b[1], 0.0, 1e-12);
  Tensor c = ops::softmax_lastaxis(Tensor::vector({1, 2, 3}));
  EXPECT_NEAR(c[0], 0.09003, 1e-5);
  EXPECT_NEAR(c[1], 0.24473, 1e-5);
  EXPECT_NEAR(c[2], 0.66524, 1e-5);
}

TEST(Softmax, RowsSumToOne) {
  Rng rng(5);
  Tensor y = ops::softmax_lastaxis(random_tensor(rng, {7, 11}, 5.0, false));
  for (std::size_t r = 0; r < 7; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 11; ++c) s += y.at(r, c);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Backward, LinearMapGradientIsOuterProduct) {
  Tensor w = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}, true);
  Tensor x = Tensor::matrix(3, 1, {0.5, -1, 2});
  Tape tape;
  tape.backward(ops::sum(ops::matmul(w, x)));
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(w.grad()[r * 3 + c], x[c]);
}

TEST(Backward, DisjointUsesAccumulate) {
  Tensor a = Tensor::vector({1.5, -2.0}, true);
  Tape tape;
  tape.backward(ops::add(ops::sum(ops::scale(a, 3.0)), ops::sum(ops::mul(a, a))));
  EXPECT_DOUBLE_EQ(a.grad()[0], 3.0 + 2 * 1.5);
  EXPECT_DOUBLE_EQ(a.grad()[1], 3.0 - 4.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  Tensor a = Tensor::vector({1, 2}, true);
  Tape tape;
  Tensor y = ops::scale(a, 2.0);
  EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(Backward, RejectsSecondCall) {
  Tensor a = Tensor::vector({1, 2}, true);
  Tape tape;
  Tensor y = ops::sum(a);
  tape.backward(y);
  EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(Backward, RejectsLossFromAnotherTape) {
  Tensor a = Tensor::vector({1, 2}, true);
  Tape first;
  Tensor y = ops::sum(a);
  Tape second;
  EXPECT_THROW(second.backward(y), ContractError);
}

TEST(Backward, NoGradGuardSkipsRecording) {
  Tensor a = Tensor::vector({1, 2}, true);
  Tape tape;
  {
    NoGradGuard g;
    ops::sum(a);
  }
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Tensor, DefaultHandleIsUndefined) {
  Tensor t;
  EXPECT_FALSE(t.defined());
  EXPECT_EQ(t.numel(), 0u);
  EXPECT_THROW(t.mutable_data(), ContractError);
}

// Finite-difference agreement per primitive on random shapes.
class PrimitiveGrad : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGrad, MatchesCentralDifferences) {
  Rng rng(100 + GetParam());
  const std::size_t m = 1 + rng.index(4), n = 1 + rng.index(5), k = 1 + rng.index(4);
  Tensor a = random_tensor(rng, {m, n}), b = random_tensor(rng, {m, n}), w = random_tensor(rng, {n, k});
  Tensor v = random_tensor(rng, {n}), s = random_tensor(rng, {1});
  Tensor pos = Tensor::from({m, n}, std::vector<double>(m * n, 0.0));
  {
    auto p = pos.mutable_data();
    for (auto& x : p) x = rng.uniform(0.5, 2.0);
  }
  Tensor g = random_tensor(rng, {n}), be = random_tensor(rng, {n});
  // Fixed, shape-derived weights turn any output into a scalar with a
  // non-trivial gradient.
  auto readout = [](const Tensor& t) {
    std::vector<double> wv(t.numel());
    for (std::size_t i = 0; i < wv.size(); ++i) wv[i] = std::sin(1.0 + double(i));
    return ops::sum(ops::mul(t, Tensor::from(t.shape(), wv)));
  };

  EXPECT_TRUE(grad_check([&](auto in) { return readout(ops::add(in[0], in[1])); }, {a, b}).ok());
  EXPECT_TRUE(grad_check([&](auto in) { return readout(ops::sub(in[0], in[1])); }, {a, b}).ok());
  EXPECT_TRUE(grad_check([&](auto in) { return readout(ops::mul(in[0], in[1])); }, {a, b}).ok());
  EXPECT_TRUE(grad_check([&](auto in) { return readout(ops::div(in[0], in[1])); }, {a, pos}).ok());
  EXPECT_TRUE(grad_check([&](auto in) { return ops::sum(ops::matmul(in[0], in[1])); }, {a, w}).ok());
  EXPECT_TRUE(grad_check([&](auto in) { return readout(ops::transpose(ops::transpose(in[0]))); }, {a}).ok());
  EXPECT_TRUE(grad_check([&](auto in) { return readout(ops::add_row(in[0], in[1])); }, {a, v}).ok());
  EXPECT_TRUE(grad_check([&](auto in) { return readout(ops::mul_row(in[0], in[1])); }, {a, v}).ok());
  EXPECT_TRUE(grad_check([&](auto in) { return readout(ops::mul_scalar(in[0], in[1])); }, {a, s}).ok());
  EXPECT_TRUE(grad_check([&](auto in) { return readout(ops::div_scalar(in[0], ops::add_scalar(ops::abs(in[1]), 0.5))); },
                         {a, s}).ok());
  EXPECT_TRUE(grad_check([&](auto in) { return readout(ops::gelu(in[0])); }, {a}).ok());
  EXPECT_TRUE(grad_check([&](auto in) { return readout(ops::tanh(in[0])); }, {a}).ok());
  EXPECT_TRUE(grad_check([&](auto in) { return readout(ops::exp(in[0])); }, {a}).ok());
  EXPECT_TRUE(grad_check([&](auto in) { return readout(ops::log(in[0])); }, {pos}).ok());
  EXPECT_TRUE(grad_check([&](auto in) { return readout(ops::abs(in[0])); }, {pos}).ok());
  EXPECT_TRUE(grad_check([&](auto in) { return ops::mean(ops::mul(in[0], in[0])); }, {a}).ok());
  EXPECT_TRUE(grad_check([&](auto in) { return ops::sum(ops::mul(ops::mean_rows(in[0]), in[1])); }, {a, v}).ok());
  EXPECT_TRUE(grad_check([&](auto in) { return ops::l2_norm(in[0]); }, {a}).ok());
  EXPECT_TRUE(grad_check([&](auto in) { return readout(ops::layer_norm(in[0], in[1], in[2], 1e-5)); }, {a, g, be}).ok());
  EXPECT_TRUE(grad_check([&](auto in) { return readout(ops::softmax_lastaxis(in[0])); }, {a}).ok());
  EXPECT_TRUE(grad_check([&](auto in) { return readout(ops::log_softmax_lastaxis(in[0])); }, {a}).ok());
  EXPECT_TRUE(grad_check([&](auto in) { return ops::sum(ops::mul(ops::concat_rows({in[0], in[1]}),
                                                                 ops::concat_rows({in[1], in[0]}))); },
                         {a, b}).ok());
  EXPECT_TRUE(grad_check([&](auto in) { return ops::sum(ops::mul(ops::concat_cols({in[0], in[1]}),
                                                                 ops::concat_cols({in[1], in[0]}))); },
                         {a, b}).ok());
  EXPECT_TRUE(grad_check([&](auto in) { return ops::sum(ops::mul(ops::gather_rows(in[0], {0, std::size_t(m - 1), 0}),
                                                                 ops::gather_rows(in[0], {0, 0, 0}))); },
                         {a}).ok());
  EXPECT_TRUE(grad_check([&](auto in) { return ops::sum(ops::mul(ops::row(in[0], m - 1), in[1])); }, {a, v}).ok());
  EXPECT_TRUE(grad_check([&](auto in) { return readout(ops::modulate_rows(in[0], {0}, in[1])); }, {a, v}).ok());
  EXPECT_TRUE(grad_check([&](auto in) { return ops::cosine(in[0], in[1]); }, {a, b}).ok());
  EXPECT_TRUE(grad_check([&](auto in) { return ops::dot(in[0], in[1]); }, {a, b}).ok());
  EXPECT_TRUE(grad_check([&](auto in) { return ops::bce_with_logits(in[0], Tensor::full(in[0].shape(), 1.0)); },
                         {a}).ok());
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveGrad, ::testing::Range(0, 10));

TEST(Clamp, GradientOnlyInside) {
  Tensor x = Tensor::vector({-2.0, 0.5, 3.0}, true);
  Tape tape;
  tape.backward(ops::sum(ops::clamp(x, -1.0, 1.0)));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 1.0);
  EXPECT_EQ(x.grad()[2], 0.0);
}

TEST(ModulateRows, UntouchedRowsBitIdentical) {
  Rng rng(9);
  Tensor x = random_tensor(rng, {4, 3}, 1.0, false);
  Tensor y = ops::modulate_rows(x, {1, 3}, Tensor::vector({2, 3, 4}));
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(y.at(0, c), x.at(0, c));
    EXPECT_EQ(y.at(2, c), x.at(2, c));
    EXPECT_EQ(y.at(1, c), x.at(1, c) * double(c + 2));
  }
}
