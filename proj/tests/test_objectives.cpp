#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>

#include "common.hpp"
#include "dsaa/objectives.hpp"
#include "dsaa/ops.hpp"

using namespace dsaa;
using dsaa::testing::grad_check;
using dsaa::testing::random_tensor;

namespace {

double naive_bce(double z, double y) {
  const double p = 1.0 / (1.0 + std::exp(-z));
  return -(y * std::log(p) + (1 - y) * std::log(1 - p));
}

double naive_info_nce(const Tensor& s, double tau) {
  const std::size_t n = s.rows();
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double z = 0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(s.at(i, j) / tau);
    total += -std::log(std::exp(s.at(i, i) / tau) / z);
  }
  return total / double(n);
}

// Minimum over all injective assignments of min(n, m) rows or columns.
double brute_force_min(const Tensor& c) {
  const std::size_t n = c.rows(), m = c.cols();
  const bool rows_small = n <= m;
  const std::size_t k = rows_small ? n : m, big = rows_small ? m : n;
  std::vector<std::size_t> perm(big);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0;
    for (std::size_t i = 0; i < k; ++i) s += rows_small ? c.at(i, perm[i]) : c.at(perm[i], i);
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

double assignment_cost(const Tensor& c, const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  double s = 0;
  for (auto [i, j] : pairs) s += c.at(i, j);
  return s;
}

Tensor one(double v, bool grad = false) { return Tensor::vector({v}, grad); }

}  // namespace

TEST(Bce, SaturatedCorrectIsNearZero) {
  EXPECT_LT(bce_loss(Tensor::vector({30}), Tensor::vector({1})).item(), 1e-12);
}

TEST(Bce, ZeroLogitIsLn2) {
  EXPECT_NEAR(bce_loss(Tensor::vector({0}), Tensor::vector({1})).item(), std::log(2.0), 1e-6);
}

TEST(Bce, MatchesNaiveFormula) {
  Rng rng(1);
  Tensor z = random_tensor(rng, {12}, 3.0, false);
  std::vector<double> y(12);
  for (auto& v : y) v = double(rng.index(2));
  double ref = 0;
  for (std::size_t i = 0; i < 12; ++i) ref += naive_bce(z[i], y[i]);
  EXPECT_NEAR(bce_loss(z, Tensor::vector(y)).item(), ref / 12, 1e-10);
}

TEST(Bce, RejectsNonBinaryTargets) {
  EXPECT_THROW(bce_loss(Tensor::vector({0.0}), Tensor::vector({0.5})), std::invalid_argument);
}

TEST(InfoNce, SingleClassIsExactlyZero) {
  EXPECT_EQ(info_nce(Tensor::matrix(1, 1, {0.37}), 0.1).item(), 0.0);
}

TEST(InfoNce, SaturatedDiagonal) {
  EXPECT_LT(info_nce(Tensor::matrix(2, 2, {30, 0, 0, 30}), 1.0).item(), 1e-12);
}

TEST(InfoNce, TwoByTwoIdentity) {
  EXPECT_NEAR(info_nce(Tensor::matrix(2, 2, {1, 0, 0, 1}), 1.0).item(), std::log1p(std::exp(-1.0)), 1e-12);
}

TEST(InfoNce, MatchesNaiveAndIsNonNegative) {
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 1 + rng.index(6);
    Tensor s = random_tensor(rng, {n, n}, 1.0, false);
    const double tau = rng.uniform(0.05, 2.0);
    const double v = info_nce(s, tau).item();
    EXPECT_GE(v, 0.0);
    EXPECT_NEAR(v, naive_info_nce(s, tau), 1e-10);
  }
}

TEST(InfoNce, TemperatureHomogeneity) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    Tensor s = random_tensor(rng, {4, 4}, 1.0, false);
    const double c = rng.uniform(0.1, 10);
    EXPECT_NEAR(info_nce(s, 0.3).item(), info_nce(ops::scale(s, c), 0.3 * c).item(), 1e-10);
  }
}

TEST(InfoNce, RejectsNonSquare) {
  EXPECT_THROW(info_nce(Tensor::zeros({2, 3}), 1.0), DimensionError);
  EXPECT_THROW(info_nce(Tensor::zeros({2, 2}), 0.0), std::invalid_argument);
}

TEST(ClsLoss, ZeroAlphaIsBce) {
  Rng rng(4);
  LossWeights lw;
  lw.alpha_nce = 0;
  Tensor z = random_tensor(rng, {6}, 1.0, false), y = Tensor::vector({1, 0, 0, 1, 0, 0});
  EXPECT_EQ(cls_loss(z, y, random_tensor(rng, {2, 2}, 1.0, false), lw).item(), bce_loss(z, y).item());
}

TEST(ClsLoss, SaturatedSingleIsNearZero) {
  LossWeights lw;
  EXPECT_LT(cls_loss(Tensor::vector({30}), Tensor::vector({1}), Tensor::matrix(1, 1, {0.9}), lw).item(), 1e-12);
}

TEST(ClsLoss, SumOfIndependentTerms) {
  Rng rng(5);
  LossWeights lw;
  lw.alpha_nce = 0.7;
  lw.tau_cls = 0.2;
  Tensor z = random_tensor(rng, {4}, 2.0, false), y = Tensor::vector({1, 0, 1, 0});
  Tensor s = random_tensor(rng, {3, 3}, 1.0, false);
  double ref = 0;
  for (std::size_t i = 0; i < 4; ++i) ref += naive_bce(z[i], y[i]);
  ref = ref / 4 + 0.7 * naive_info_nce(s, 0.2);
  EXPECT_NEAR(cls_loss(z, y, s, lw).item(), ref, 1e-12);
}

TEST(Hungarian, OneByOne) {
  auto p = hungarian_match(Tensor::matrix(1, 1, {5}));
  ASSERT_EQ(p.size(), 1u);
  EXPECT_EQ(p[0], std::make_pair(std::size_t{0}, std::size_t{0}));
}

TEST(Hungarian, IdentityFavouringCost) {
  auto p = hungarian_match(Tensor::matrix(3, 3, {0, 1, 1, 1, 0, 1, 1, 1, 0}));
  ASSERT_EQ(p.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(p[i], std::make_pair(i, i));
}

TEST(Hungarian, MatchesBruteForce) {
  Rng rng(6);
  for (int t = 0; t < 300; ++t) {
    const std::size_t n = 1 + rng.index(6), m = 1 + rng.index(6);
    Tensor c = random_tensor(rng, {n, m}, 1.0, false);
    auto p = hungarian_match(c);
    ASSERT_EQ(p.size(), std::min(n, m));
    std::vector<bool> used_r(n), used_c(m);
    for (auto [i, j] : p) {
      EXPECT_FALSE(used_r[i]);
      EXPECT_FALSE(used_c[j]);
      used_r[i] = used_c[j] = true;
    }
    EXPECT_NEAR(assignment_cost(c, p), brute_force_min(c), 1e-12) << n << "x" << m;
  }
}

TEST(Hungarian, NoWorseThanSampledPermutations) {
  Rng rng(7);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng.index(8);
    Tensor c = random_tensor(rng, {n, n}, 1.0, false);
    const double best = assignment_cost(c, hungarian_match(c));
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (int k = 0; k < 20; ++k) {
      std::shuffle(perm.begin(), perm.end(), rng.engine());
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) s += c.at(i, perm[i]);
      EXPECT_LE(best, s + 1e-12);
    }
  }
}

TEST(Hungarian, TiesResolveToLexicographicallySmallest) {
  auto p = hungarian_match(Tensor::matrix(2, 2, {1, 1, 1, 1}));
  EXPECT_EQ(p[0].second, 0u);
  EXPECT_EQ(p[1].second, 1u);
}

TEST(DetLoss, PerfectMatchIsNearZero) {
  PredBoxes pred{Tensor::matrix(1, 4, {0.1, 0.2, 0.5, 0.6}), Tensor::vector({30})};
  EXPECT_LT(det_loss(pred, {Box{0.1, 0.2, 0.5, 0.6}}, LossWeights{}).item(), 1e-12);
}

TEST(DetLoss, ShiftedMinCornerIsMeanL1) {
  PredBoxes pred{Tensor::matrix(1, 4, {0.1, 0, 1, 1}), Tensor::vector({30})};
  const double cls = std::log1p(std::exp(-30.0));
  EXPECT_NEAR(det_loss(pred, {Box{0, 0, 1, 1}}, LossWeights{}).item() - cls, 0.1 / 4, 1e-12);
}

TEST(DetLoss, TwoByTwoTakesBestPairing) {
  Rng rng(8);
  for (int t = 0; t < 50; ++t) {
    std::vector<Box> gt;
    std::vector<double> coords;
    for (int i = 0; i < 2; ++i) {
      const double x = rng.uniform(0, 0.5), y = rng.uniform(0, 0.5);
      gt.push_back({x, y, x + rng.uniform(0.1, 0.5), y + rng.uniform(0.1, 0.5)});
      for (int d = 0; d < 4; ++d) coords.push_back(rng.uniform(0, 1));
    }
    PredBoxes pred{Tensor::matrix(2, 4, coords), Tensor::vector({rng.normal(), rng.normal()})};
    auto l1 = [&](int i, int j) {
      double s = 0;
      for (int d = 0; d < 4; ++d) s += std::abs(coords[i * 4 + d] - gt[j].coords()[d]);
      return s;
    };
    const double best = std::min(l1(0, 0) + l1(1, 1), l1(0, 1) + l1(1, 0)) / 8.0;
    const double cls = (naive_bce(pred.logits[0], 1) + naive_bce(pred.logits[1], 1)) / 2;
    EXPECT_NEAR(det_loss(pred, gt, LossWeights{}).item(), best + cls, 1e-12);
  }
}

TEST(DetLoss, EmptyPredictionsCountEachGtAsLn2) {
  PredBoxes none{Tensor::zeros({0, 4}), Tensor::zeros({0})};
  EXPECT_NEAR(det_loss(none, {Box{0, 0, 1, 1}}, LossWeights{}).item(), std::log(2.0), 1e-15);
  EXPECT_EQ(det_loss(none, {}, LossWeights{}).item(), 0.0);
}

TEST(AttrContrastive, NoNegativesIsZero) {
  AttrLogitSet s{{one(0.3), one(-0.1)}, {{}, {}}};
  EXPECT_EQ(attr_contrastive(s, 0.1).item(), 0.0);
  EXPECT_EQ(attr_contrastive(AttrLogitSet{}, 0.1).item(), 0.0);
}

TEST(AttrContrastive, HandCase) {
  AttrLogitSet s{{one(1.0)}, {{one(0.0)}}};
  EXPECT_NEAR(attr_contrastive(s, 0.1).item(), std::log1p(std::exp(-10.0)), 1e-12);
}

TEST(AttrContrastive, EqualLogitsGiveLn2) {
  for (double tau : {0.05, 0.1, 1.0, 7.0}) {
    AttrLogitSet s{{one(0.42)}, {{one(0.42)}}};
    EXPECT_NEAR(attr_contrastive(s, tau).item(), std::log(2.0), 1e-12);
  }
}

TEST(AttrContrastive, MonotoneInEachLogit) {
  Rng rng(9);
  for (int t = 0; t < 50; ++t) {
    const std::size_t M = 1 + rng.index(3);
    std::vector<double> pos(M);
    std::vector<std::vector<double>> neg(M);
    for (std::size_t m = 0; m < M; ++m) {
      pos[m] = rng.normal(0, 0.5);
      neg[m].resize(1 + rng.index(3));
      for (auto& v : neg[m]) v = rng.normal(0, 0.5);
    }
    auto eval = [&](const std::vector<double>& p, const std::vector<std::vector<double>>& n) {
      AttrLogitSet s;
      for (std::size_t m = 0; m < M; ++m) {
        s.positives.push_back(one(p[m]));
        s.negatives.emplace_back();
        for (double v : n[m]) s.negatives.back().push_back(one(v));
      }
      return attr_contrastive(s, 0.1).item();
    };
    const double base = eval(pos, neg);
    const std::size_t m = rng.index(M);
    auto p2 = pos;
    p2[m] += 0.05;
    EXPECT_LT(eval(p2, neg), base);
    auto n2 = neg;
    n2[m][rng.index(n2[m].size())] += 0.05;
    EXPECT_GT(eval(pos, n2), base);
  }
}

TEST(AttrContrastive, TemperatureHomogeneity) {
  Rng rng(10);
  const double a = rng.normal(), b = rng.normal(), c = rng.normal();
  for (double k : {0.3, 2.0, 11.0}) {
    AttrLogitSet s1{{one(a)}, {{one(b), one(c)}}};
    AttrLogitSet s2{{one(a * k)}, {{one(b * k), one(c * k)}}};
    EXPECT_NEAR(attr_contrastive(s1, 0.1).item(), attr_contrastive(s2, 0.1 * k).item(), 1e-10);
  }
}

TEST(TotalLoss, GateClosedBeforeWarmup) {
  LossWeights lw;
  lw.det_warmup_steps = 100;
  LossParts p{Tensor::scalar(1.0), Tensor::scalar(2.0), Tensor::scalar(5.0)};
  EXPECT_NEAR(total_loss(p, lw, 0).item(), 2.0, 1e-15);
  EXPECT_FALSE(det_gate_open(lw, 99));
}

TEST(TotalLoss, GateOpensAtWarmupInclusive) {
  LossWeights lw;
  lw.det_warmup_steps = 100;
  LossParts p{Tensor::scalar(1.0), Tensor::scalar(2.0), Tensor::scalar(5.0)};
  EXPECT_TRUE(det_gate_open(lw, 100));
  EXPECT_NEAR(total_loss(p, lw, 100).item(), 7.0, 1e-15);
}

TEST(TotalLoss, MissingTermsCountAsZero) {
  LossParts p{Tensor::scalar(1.5), Tensor{}, Tensor{}};
  EXPECT_EQ(total_loss(p, LossWeights{}, 10000).item(), 1.5);
}

TEST(LossWeights, Validation) {
  LossWeights lw;
  lw.tau_attr = 0;
  EXPECT_THROW(lw.validate(), std::invalid_argument);
  lw = LossWeights{};
  lw.lambda_attr = -1;
  EXPECT_THROW(lw.validate(), std::invalid_argument);
}

TEST(LossLog, RoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "dsaa_losslog_test.jsonl";
  {
    LossLog log(path);
    log.write(0, {{"cls", 1.25}, {"total", 1.5}}, false);
    log.write(1, {{"cls", 1.0}, {"total", 1.2}}, true);
  }
  auto rows = LossLog::read(path);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1]["step"], 1);
  EXPECT_EQ(rows[1]["det_gate"], true);
  EXPECT_EQ(rows[0]["cls"].get<double>(), 1.25);
  std::filesystem::remove(path);
}

class LossGrad : public ::testing::TestWithParam<int> {};

TEST_P(LossGrad, AllLossesMatchFiniteDifferences) {
  Rng rng(100 + GetParam());
  const std::size_t n = 2 + rng.index(4);

  Tensor z = random_tensor(rng, {n}, 2.0);
  std::vector<double> y(n);
  for (auto& v : y) v = double(rng.index(2));
  Tensor yt = Tensor::vector(y);
  EXPECT_TRUE(grad_check([&](const std::vector<Tensor>& in) { return bce_loss(in[0], yt); }, {z}).ok());

  Tensor s = random_tensor(rng, {n, n});
  const double tau = rng.uniform(0.2, 1.0);
  EXPECT_TRUE(grad_check([&](const std::vector<Tensor>& in) { return info_nce(in[0], tau); }, {s}).ok());

  LossWeights lw;
  lw.tau_cls = tau;
  EXPECT_TRUE(
      grad_check([&](const std::vector<Tensor>& in) { return cls_loss(in[0], yt, in[1], lw); }, {z, s}).ok());

  Tensor boxes = random_tensor(rng, {n, 4}, 0.3), logits = random_tensor(rng, {n});
  std::vector<Box> gt = {{0.1, 0.1, 0.4, 0.5}, {0.5, 0.2, 0.9, 0.8}};
  EXPECT_TRUE(grad_check([&](const std::vector<Tensor>& in) { return det_loss(PredBoxes{in[0], in[1]}, gt, lw); },
                         {boxes, logits})
                  .ok());

  std::vector<Tensor> leaves;
  AttrLogitSet a;
  for (std::size_t m = 0; m < 2; ++m) {
    a.positives.push_back(one(rng.normal(0, 0.3), true));
    leaves.push_back(a.positives.back());
    a.negatives.emplace_back();
    for (std::size_t k = 0; k < 1 + rng.index(3); ++k) {
      a.negatives.back().push_back(one(rng.normal(0, 0.3), true));
      leaves.push_back(a.negatives.back().back());
    }
  }
  EXPECT_TRUE(grad_check([&](const std::vector<Tensor>&) { return attr_contrastive(a, 0.1); }, leaves).ok());
}

INSTANTIATE_TEST_SUITE_P(Seeds, LossGrad, ::testing::Range(0, 10));
