#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "support.hpp"

using namespace itta;
using namespace itta::testing;

namespace {

double direct_ce(const Array& logits, std::span<const int> labels) {
  const std::size_t n = logits.shape[0], c = logits.shape[1];
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double m = -INFINITY;
    for (std::size_t k = 0; k < c; ++k) m = std::max(m, logits[i * c + k]);
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += std::exp(logits[i * c + k] - m);
    total += m + std::log(s) - logits[i * c + static_cast<std::size_t>(labels[i])];
  }
  return total / static_cast<double>(n);
}

double align_of(Graph& g, const Array& a, const Array& b) {
  return align_loss(std::vector<Tensor>{g.constant(a)}, std::vector<Tensor>{g.constant(b)}).item();
}

}  // namespace

TEST(MainLoss, UniformLogits) {
  Graph g;
  const std::vector<int> labels{0, 3};
  Tensor z = g.constant(Array::zeros({2, 4}));
  EXPECT_NEAR(main_loss(z, z, labels).item(), 2 * std::log(4.0), 1e-12);
}

TEST(MainLoss, SaturatesWithLargeMargin) {
  Graph g;
  const std::vector<int> labels{1};
  Tensor z = g.constant(Array({1, 2}, {0, 20}));
  EXPECT_LT(main_loss(z, z, labels).item(), 2 * 5e-9);
}

TEST(MainLoss, MatchesDirectLogSumExp) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 10; ++t) {
    const Array a = uniform_array({5, 4}, rng, -5, 5), b = uniform_array({5, 4}, rng, -5, 5);
    const std::vector<int> labels{0, 1, 2, 3, 1};
    Graph g;
    EXPECT_NEAR(main_loss(g.constant(a), g.constant(b), labels).item(), direct_ce(a, labels) + direct_ce(b, labels), 1e-10);
  }
}

TEST(MainLoss, LabelOutOfRangeThrows) {
  Graph g;
  const std::vector<int> labels{4};
  Tensor z = g.constant(Array::zeros({1, 4}));
  EXPECT_THROW(main_loss(z, z, labels), std::out_of_range);
}

TEST(ConsistencyLoss, Examples) {
  Graph g;
  LayerStack init = constant_stack(g, Array::filled({10, 2}, 1.0), Array::zeros({10, 2}));
  Tensor z = g.constant(Array({1, 2}, {0.3, 0.9}));
  EXPECT_EQ(consistency_loss(z, z, init).item(), 0.0);
  Tensor zp = g.constant(Array({1, 2}, {0.0, 0.0}));
  Tensor d = g.constant(Array({1, 2}, {3, -4}));
  EXPECT_DOUBLE_EQ(consistency_loss(d, zp, init).item(), 3.0);
  LayerStack bias = constant_stack(g, Array::filled({1, 2}, 1.0), Array::filled({1, 2}, 1.0));
  EXPECT_NEAR(consistency_loss(zp, zp, bias).item(), std::sqrt(2.0), 1e-15);
}

TEST(ConsistencyLoss, InitReducesToNormOfRelu) {
  std::mt19937_64 rng(2);
  Graph g;
  LayerStack init = constant_stack(g, Array::filled({10, 6}, 1.0), Array::zeros({10, 6}));
  const Array z = uniform_array({4, 6}, rng, 0, 1), zp = uniform_array({4, 6}, rng, 0, 1);
  double expected = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 6; ++j) s += std::pow(std::max(0.0, z[i * 6 + j] - zp[i * 6 + j]), 2);
    expected += std::sqrt(s) / 4.0;
  }
  EXPECT_NEAR(consistency_loss(g.constant(z), g.constant(zp), init).item(), expected, 1e-14);
}

TEST(JointLoss, EqualsMainPlusAlphaCont) {
  Graph g;
  Tensor a = g.constant(1.25), b = g.constant(0.5);
  EXPECT_NEAR(joint_loss(a, b, 0.3).item(), 1.25 + 0.3 * 0.5, 1e-12);
}

TEST(JointLoss, GradientIsAdditive) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 10; ++t) {
    Graph g;
    Tensor w = g.leaf(uniform_array({4, 3}, rng, -1, 1), true);
    Tensor x = g.constant(uniform_array({5, 4}, rng, -1, 1)), xp = g.constant(uniform_array({5, 4}, rng, -1, 1));
    Tensor z = relu(matmul(x, w)), zp = relu(matmul(xp, w));
    LayerStack fw = constant_stack(g, uniform_array({2, 3}, rng, 0.5, 1.5), uniform_array({2, 3}, rng, -0.1, 0.1));
    const std::vector<int> labels{0, 1, 2, 0, 1};
    Tensor lm = main_loss(z, zp, labels), lw = consistency_loss(z, zp, fw);
    const double alpha = 0.7;
    const auto joint = grad(joint_loss(lm, lw, alpha), {w}).at(w).value();
    const auto gm = grad(lm, {w}).at(w).value(), gw = grad(lw, {w}).at(w).value();
    for (std::size_t i = 0; i < joint.size(); ++i) EXPECT_NEAR(joint[i], gm[i] + alpha * gw[i], 1e-10);
  }
}

TEST(Standardize, SymmetricTriple) {
  Graph g;
  StandardizedGrad s = standardize({g.constant(Array({3}, {1, 2, 3}))});
  const double r = std::sqrt(1.5);
  EXPECT_NEAR(s.flat.data()[0], -r, 1e-12);
  EXPECT_NEAR(s.flat.data()[1], 0.0, 1e-12);
  EXPECT_NEAR(s.flat.data()[2], r, 1e-12);
}

TEST(Standardize, AffineInvarianceAndMoments) {
  std::mt19937_64 rng(4);
  Graph g;
  const Array a = uniform_array({7}, rng, -2, 2), b = uniform_array({2, 3}, rng, -2, 2);
  Array a2 = a, b2 = b;
  for (double& v : a2.data) v = 5 * v + 7;
  for (double& v : b2.data) v = 5 * v + 7;
  StandardizedGrad s1 = standardize({g.constant(a), g.constant(b)});
  StandardizedGrad s2 = standardize({g.constant(a2), g.constant(b2)});
  double m = 0.0, v = 0.0;
  for (std::size_t i = 0; i < 13; ++i) {
    EXPECT_NEAR(s1.flat.data()[i], s2.flat.data()[i], 1e-12);
    m += s1.flat.data()[i] / 13.0;
  }
  for (std::size_t i = 0; i < 13; ++i) v += std::pow(s1.flat.data()[i] - m, 2) / 13.0;
  EXPECT_NEAR(m, 0.0, 1e-12);
  EXPECT_NEAR(std::sqrt(v), 1.0, 1e-12);
}

TEST(Standardize, DegenerateAndTooSmall) {
  Graph g;
  EXPECT_THROW(standardize({g.constant(Array::filled({5}, 2.0))}), DegenerateGradient);
  EXPECT_THROW(standardize({g.constant(Array({1}, {2.0}))}), std::invalid_argument);
}

TEST(AlignLoss, IdenticalAndScaledVectorsGiveZero) {
  std::mt19937_64 rng(5);
  Graph g;
  const Array a = uniform_array({20}, rng, -1, 1);
  Array scaled = a;
  for (double& v : scaled.data) v *= 3.5;
  EXPECT_LE(align_of(g, a, a), 1e-12);
  EXPECT_LE(align_of(g, a, scaled), 1e-12);
}

TEST(AlignLoss, PositiveAffineInvariance) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> scale_d(0.01, 100.0), shift_d(-50.0, 50.0);
  for (int t = 0; t < 100; ++t) {
    Graph g;
    const Array gm = uniform_array({30}, rng, -1, 1), gw = uniform_array({30}, rng, -1, 1);
    Array moved = gm;
    const double a = scale_d(rng), b = shift_d(rng);
    for (double& v : moved.data) v = a * v + b;
    EXPECT_NEAR(align_of(g, moved, gw), align_of(g, gm, gw), 1e-10);
  }
}

TEST(AlignLoss, GradientFlowsOnlyIntoTheWcontSide) {
  Graph g;
  Tensor gm = g.leaf(Array({4}, {1, -2, 0.5, 3}), true);
  Tensor gw = g.leaf(Array({4}, {0.2, 1, -1, 2}), true);
  GradMap d = grad(align_loss(std::vector<Tensor>{gm}, std::vector<Tensor>{gw}), {gm, gw});
  for (double v : d.at(gm).data()) EXPECT_EQ(v, 0.0);
  double norm = 0.0;
  for (double v : d.at(gw).data()) norm += v * v;
  EXPECT_GT(norm, 0.0);
}

TEST(AlignLoss, SecondOrderWGradientMatchesFiniteDifferences) {
  TinyAlignProblem problem(4);
  static_assert(TinyAlignProblem::parameter_count() <= 50);
  std::mt19937_64 rng(9);
  for (int t = 0; t < 20; ++t) EXPECT_LE(fd_check(problem, TinyAlignProblem::w_point(rng), 1e-5), 1e-4);
}

TEST(Entropy, UniformAndPeaked) {
  Graph g;
  EXPECT_NEAR(entropy_objective(g.constant(Array::zeros({3, 4}))).item(), std::log(4.0), 1e-12);
  EXPECT_LT(entropy_objective(g.constant(Array({1, 3}, {30, 0, 0}))).item(), 1e-11);
}

TEST(Entropy, MatchesDirectSum) {
  std::mt19937_64 rng(7);
  const Array l = uniform_array({6, 5}, rng, -4, 4);
  double expected = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < 5; ++k) s += std::exp(l[i * 5 + k]);
    for (std::size_t k = 0; k < 5; ++k) {
      const double p = std::exp(l[i * 5 + k]) / s;
      expected -= p * std::log(p) / 6.0;
    }
  }
  Graph g;
  EXPECT_NEAR(entropy_objective(g.constant(l)).item(), expected, 1e-10);
}

TEST(Rotation, QuarterTurnsCompose) {
  std::vector<double> img(9);
  for (std::size_t i = 0; i < 9; ++i) img[i] = static_cast<double>(i);
  EXPECT_EQ(rotate90(img, 3, 1), (std::vector<double>{2, 5, 8, 1, 4, 7, 0, 3, 6}));
  EXPECT_EQ(rotate90(rotate90(img, 3, 1), 3, 3), img);
  EXPECT_EQ(rotate90(img, 3, 4), img);
  EXPECT_THROW(rotate90(img, 4, 1), ShapeError);
}

TEST(Rotation, ZeroHeadGivesLogFour) {
  std::mt19937_64 rng(8);
  Graph g;
  RotationBatch rb = make_rotation_batch(uniform_array({2, 16}, rng, 0, 1), 4);
  ASSERT_EQ(rb.labels.size(), 8u);
  Linear head{g.constant(Array::zeros({16, 4})), g.constant(Array::zeros({4}))};
  EXPECT_NEAR(rotation_objective(g.constant(rb.images), rb.labels, head).item(), std::log(4.0), 1e-12);
}

TEST(Rotation, ConstantImageViewsAreIdentical) {
  RotationBatch rb = make_rotation_batch(Array::filled({1, 16}, 0.4), 4);
  for (std::size_t k = 1; k < 4; ++k)
    for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(rb.images[k * 16 + j], rb.images[j]);
}

TEST(Rotation, HeadOverfitsOneImage) {
  std::mt19937_64 rng(10);
  const Array img = uniform_array({1, 16}, rng, 0, 1);
  RotationBatch rb = make_rotation_batch(img, 4);
  Array w = Array::zeros({16, 4}), b = Array::zeros({4});
  double loss = 0.0;
  for (int step = 0; step < 100; ++step) {
    Graph g;
    Tensor wt = g.leaf(w, true), bt = g.leaf(b, true);
    Tensor l = rotation_objective(g.constant(rb.images), rb.labels, {wt, bt});
    loss = l.item();
    GradMap d = grad(l, {wt, bt});
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= 5.0 * d.at(wt).data()[i];
    for (std::size_t i = 0; i < b.size(); ++i) b[i] -= 5.0 * d.at(bt).data()[i];
  }
  EXPECT_LT(loss, 0.05);
}

TEST(Rotation, LabelsOutsideRangeThrow) {
  Graph g;
  const std::vector<int> labels{4};
  Linear head{g.constant(Array::zeros({2, 4})), g.constant(Array::zeros({4}))};
  EXPECT_THROW(rotation_objective(g.constant(Array::zeros({1, 2})), labels, head), std::out_of_range);
}
