#include "ntkstop/kernel.hpp"
#include "ntkstop/network.hpp"
#include "ntkstop/spectral.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

namespace ntkstop {
namespace {

UnitPoint e(Index d, Index k) {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(d);
  v(k) = 1.0;
  return UnitPoint(v);
}

// Unit vector at a prescribed cosine to e_0 in the (e_0, e_1) plane.
UnitPoint at_cosine(Index d, double c) {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(d);
  v(0) = c;
  v(1) = std::sqrt(1.0 - c * c);
  return UnitPoint(v);
}

TEST(UnitPoint, RenormalizesOnConstruction) {
  UnitPoint p(Eigen::Vector3d(3.0, -4.0, 12.0));
  EXPECT_NEAR(p.coords().norm(), 1.0, 1e-12);
  EXPECT_THROW(UnitPoint(Eigen::Vector3d::Zero()), std::invalid_argument);
}

TEST(NtkEval, ClosedFormIdentities) {
  const auto u = sample_sphere(1, 5, 3).point(0);
  EXPECT_NEAR(ntk_eval(u, u), 0.5, 1e-15);
  EXPECT_NEAR(ntk_eval(u, -u), 0.0, 1e-15);
  EXPECT_NEAR(ntk_eval(e(4, 0), e(4, 2)), 0.0, 1e-15);
  EXPECT_NEAR(ntk_eval(e(3, 0), at_cosine(3, 0.5)), 1.0 / 6.0, 1e-15);
}

TEST(NtkEval, ClampsCosinesOutsideUnitInterval) {
  EXPECT_DOUBLE_EQ(ntk_from_cosine(1.0 + 1e-15), 0.5);
  EXPECT_DOUBLE_EQ(ntk_from_cosine(-1.0 - 1e-15), 0.0);
  EXPECT_FALSE(std::isnan(ntk_from_cosine(1.0000001)));
}

TEST(NtkEval, MatchesWideNetworkAverage) {
  // h-hat over 10^6 Gaussian neurons is an unbiased estimate of K.
  const NetworkState state = init_network(1'000'000, 3, 1.0, 17);
  const UnitPoint u = e(3, 0);
  const UnitPoint v = at_cosine(3, 0.5);
  EXPECT_NEAR(h_hat(state, u, v), 1.0 / 6.0, 3e-3);
}

TEST(NtkEval, RangeOnRandomPairs) {
  const PointSet p = sample_sphere(200, 4, 11);
  for (Index i = 0; i + 1 < p.size(); ++i) {
    const double k = ntk_eval(p.point(i), p.point(i + 1));
    const double c = p.point(i).dot(p.point(i + 1));
    if (c >= 0.0) {
      EXPECT_GE(k, 0.0);
      EXPECT_LE(k, 0.5);
    } else {
      EXPECT_LE(k, 0.0);
    }
  }
}

TEST(KintEval, SingleNodeCases) {
  const UnitPoint u = e(3, 0);
  QuadratureSample same(PointSet::single(u), 0);
  EXPECT_NEAR(kint_eval_mc(u, u, same), 0.25, 1e-15);
  QuadratureSample orth(PointSet::single(e(3, 1)), 0);
  EXPECT_NEAR(kint_eval_mc(u, -u, orth), 0.0, 1e-15);
}

TEST(KintEval, AgreesWithLargerIndependentQuadrature) {
  const UnitPoint u = e(3, 0);
  const UnitPoint v = at_cosine(3, 0.3);
  const Index n_small = 20000;
  const auto small = QuadratureSample::draw(n_small, 3, 5);
  const auto large = QuadratureSample::draw(10 * n_small, 3, 6);
  // Standard error of the small estimate from its own summands.
  const Eigen::VectorXd cu = small.points().matrix() * u.coords();
  const Eigen::VectorXd cv = small.points().matrix() * v.coords();
  Eigen::ArrayXd terms(n_small);
  for (Index i = 0; i < n_small; ++i) terms(i) = ntk_from_cosine(cu(i)) * ntk_from_cosine(cv(i));
  const double se = std::sqrt((terms - terms.mean()).square().sum() / (n_small - 1) / n_small);
  EXPECT_NEAR(kint_eval_mc(u, v, small), kint_eval_mc(u, v, large), 3.0 * se * std::sqrt(1.1));
}

TEST(KintEval, VarianceDecaysInverselyWithSampleSize) {
  const UnitPoint u = e(3, 0);
  const UnitPoint v = at_cosine(3, 0.2);
  std::vector<double> scaled_var;
  for (Index n_q : {50, 200, 800}) {
    Eigen::ArrayXd est(100);
    for (Index rep = 0; rep < 100; ++rep) {
      est(rep) = kint_eval_mc(u, v, QuadratureSample::draw(n_q, 3, 1000 * n_q + rep));
    }
    const double var = (est - est.mean()).square().sum() / 99.0;
    scaled_var.push_back(var * static_cast<double>(n_q));
  }
  const auto [lo, hi] = std::minmax_element(scaled_var.begin(), scaled_var.end());
  EXPECT_LE(*hi / *lo, 2.0);
}

TEST(Gram, SinglePointAndTrace) {
  const PointSet one = sample_sphere(1, 3, 1);
  const Gram g1 = gram(one, NtkKernel{});
  EXPECT_EQ(g1.size(), 1);
  EXPECT_DOUBLE_EQ(g1.matrix(0, 0), 0.5);

  for (Index n : {2, 17, 150}) {
    const Gram g = gram(sample_sphere(n, 4, 100 + n), NtkKernel{});
    EXPECT_NEAR(g.scaled().matrix.trace(), 0.5, 1e-12);
    EXPECT_LE((g.matrix - g.matrix.transpose()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(g.matrix.diagonal(), Eigen::VectorXd::Constant(n, 0.5));
  }
}

TEST(Gram, RejectsDuplicatePoints) {
  Eigen::MatrixXd rows = sample_sphere(5, 3, 2).matrix();
  rows.row(3) = rows.row(1);
  EXPECT_THROW(gram(PointSet(rows), NtkKernel{}), DuplicatePoints);
  // Nearby but distinct points are fine.
  rows.row(3) = rows.row(1) + Eigen::RowVector3d(1e-6, 0.0, 0.0);
  EXPECT_NO_THROW(gram(PointSet(rows), NtkKernel{}));
}

TEST(Gram, IntegratedWithTrainingQuadratureIsSquaredScaledGram) {
  const PointSet s = sample_sphere(60, 3, 9);
  const IntegratedKernel kint(QuadratureSample(s, 0));
  const Eigen::MatrixXd lhs = gram(s, kint).matrix / 60.0;
  const Eigen::MatrixXd kn = gram(s, NtkKernel{}).scaled().matrix;
  EXPECT_LE((lhs - kn * kn).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Gram, NtkGramIsPositiveDefinite) {
  for (Index d : {3, 5}) {
    const Gram g = gram(sample_sphere(300, d, 40 + d), NtkKernel{});
    const Eigen::VectorXd ev = eigenvalues(g.scaled().matrix);
    EXPECT_GT(ev.minCoeff(), 0.0) << "d=" << d;
    EXPECT_GT(ev(0), 0.0);
    EXPECT_LE(ev(0), 0.5);
  }
}

TEST(CrossGram, MatchesGramAndPointwise) {
  const PointSet a = sample_sphere(12, 3, 21);
  EXPECT_EQ(cross_gram(a, a, NtkKernel{}), gram(a, NtkKernel{}).matrix);

  const PointSet one = sample_sphere(1, 3, 22);
  const PointSet other = sample_sphere(1, 3, 23);
  EXPECT_DOUBLE_EQ(cross_gram(one, other, NtkKernel{})(0, 0),
                   ntk_eval(one.point(0), other.point(0)));
}

TEST(CrossGram, FrobeniusBound) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const PointSet a = sample_sphere(40, 3, seed);
    const PointSet q = sample_sphere(70, 3, seed + 100);
    const double fro = cross_gram(a, q, NtkKernel{}).norm();
    EXPECT_LE(fro, std::sqrt(40.0 * 70.0) * 0.5);
  }
}

TEST(CrossGram, IntegratedKernelPointwiseAgreement) {
  const IntegratedKernel kint(QuadratureSample::draw(300, 3, 8));
  const PointSet a = sample_sphere(4, 3, 30);
  const PointSet b = sample_sphere(3, 3, 31);
  const Eigen::MatrixXd c = cross_gram(a, b, kint);
  for (Index i = 0; i < a.size(); ++i) {
    for (Index j = 0; j < b.size(); ++j) {
      EXPECT_NEAR(c(i, j), kint(a.point(i), b.point(j)), 1e-14);
    }
  }
}

}  // namespace
}  // namespace ntkstop
