#include "ntkstop/spectral.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

namespace ntkstop {
namespace {

// Direct evaluation of R(eps) without prefix sums.
double complexity_oracle(const Eigen::VectorXd& lambda, Index n, double eps) {
  double acc = 0.0;
  for (double l : lambda) acc += std::min(l, eps * eps);
  return std::sqrt(acc / static_cast<double>(n));
}

// Stopping time by direct scan of the defining inequality.
std::int64_t stopping_oracle(const Eigen::VectorXd& lambda, Index n, double sigma, double eta) {
  for (std::int64_t t = 1;; ++t) {
    const double eta_t = eta * static_cast<double>(t);
    if (complexity_oracle(lambda, n, std::sqrt(1.0 / eta_t)) > 1.0 / (sigma * eta_t)) return t - 1;
  }
}

double ols_slope(const std::vector<double>& x, const std::vector<double>& y) {
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(y.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxy / sxx;
}

Spectrum ntk_spectrum(Index n, Index d, std::uint64_t seed) {
  return eigen(gram(sample_sphere(n, d, seed), NtkKernel{}));
}

TEST(Eigen, SmallExamples) {
  const Spectrum one = eigen(Gram{Eigen::MatrixXd::Constant(1, 1, 0.5), GramScale::Raw});
  ASSERT_EQ(one.size(), 1);
  EXPECT_DOUBLE_EQ(one[0], 0.5);

  Eigen::MatrixXd x(2, 3);
  x << 1, 0, 0, 0, 1, 0;
  const Spectrum two = eigen(gram(PointSet(x), NtkKernel{}));
  EXPECT_NEAR(two[0], 0.25, 1e-15);
  EXPECT_NEAR(two[1], 0.25, 1e-15);
}

TEST(Eigen, TraceIdentityAndOrdering) {
  for (Index n : {5, 64, 200}) {
    const Spectrum s = ntk_spectrum(n, 3, 7 * n);
    EXPECT_NEAR(s.sum(), 0.5, 1e-12);
    for (Index i = 1; i < s.size(); ++i) EXPECT_GE(s[i - 1], s[i]);
    EXPECT_GT(s.top(), 0.0);
    EXPECT_LE(s.top(), 0.5);
  }
}

TEST(Eigen, DecompositionReconstructs) {
  const Gram g = gram(sample_sphere(30, 3, 4), NtkKernel{}).scaled();
  const EigenDecomposition ed = eigen_decompose(g.matrix);
  const Eigen::MatrixXd back = ed.vectors * ed.values.asDiagonal() * ed.vectors.transpose();
  EXPECT_LE((back - g.matrix).cwiseAbs().maxCoeff(), 1e-13);
  for (Index i = 1; i < ed.values.size(); ++i) EXPECT_GE(ed.values(i - 1), ed.values(i));
}

TEST(Eigen, RejectsIndefiniteMatrices) {
  Eigen::MatrixXd a(2, 2);
  a << 0.0, 1.0, 1.0, 0.0;  // eigenvalues -1, 1
  EXPECT_THROW(eigen(Gram{a, GramScale::Scaled}), NotPSD);
  // Tiny negatives within the slack are clipped to zero.
  const Spectrum s(Eigen::Vector2d(0.3, -5e-9));
  EXPECT_EQ(s[1], 0.0);
}

TEST(KernelComplexity, Examples) {
  const ComplexityProfile single(Spectrum(Eigen::VectorXd::Constant(1, 0.5)), 1, 1.0);
  EXPECT_EQ(kernel_complexity(single, 0.0), 0.0);
  EXPECT_NEAR(kernel_complexity(single, 0.3), 0.3, 1e-15);

  const Index n = 80;
  const ComplexityProfile p(ntk_spectrum(n, 3, 2), n, 0.25);
  EXPECT_NEAR(kernel_complexity(p, 1.0), std::sqrt(1.0 / (2.0 * n)), 1e-12);
}

TEST(KernelComplexity, MatchesDirectSum) {
  const Index n = 120;
  const Spectrum s = ntk_spectrum(n, 3, 12);
  const ComplexityProfile p(s, n, 0.5);
  for (double eps = 0.0; eps < 0.8; eps += 0.0137) {
    EXPECT_NEAR(kernel_complexity(p, eps), complexity_oracle(s.values(), n, eps), 1e-14);
  }
}

TEST(KernelComplexity, IsSubRoot) {
  const Index n = 150;
  const ComplexityProfile p(ntk_spectrum(n, 3, 13), n, 0.25);
  double prev_r = 0.0;
  double prev_ratio = std::numeric_limits<double>::infinity();
  for (double eps = 1e-4; eps < 1.0; eps *= 1.1) {
    const double r = kernel_complexity(p, eps);
    EXPECT_GE(r, prev_r);
    EXPECT_LE(r / eps, prev_ratio * (1.0 + 1e-12));
    prev_r = r;
    prev_ratio = r / eps;
  }
}

TEST(CriticalRadius, SingleEigenvalueClosedForm) {
  const ComplexityProfile p(Spectrum(Eigen::VectorXd::Constant(1, 0.5)), 1, 0.3);
  EXPECT_NEAR(critical_radius(p), 0.09, 0.09 * 1e-9);
}

TEST(CriticalRadius, SolvesFixedPointAndShrinksWithNoise) {
  const Index n = 200;
  const Spectrum s = ntk_spectrum(n, 3, 14);
  double prev = std::numeric_limits<double>::infinity();
  for (double sigma : {1.0, 0.5, 0.25, 0.125, 0.0625}) {
    const ComplexityProfile p(s, n, sigma);
    const double r = critical_radius(p);
    EXPECT_NEAR(sigma * kernel_complexity(p, std::sqrt(r)), r, 1e-9 * r);
    EXPECT_LT(r, prev);
    prev = r;
  }
}

TEST(CriticalRadius, ZeroSpectrumHasNoBracket) {
  const ComplexityProfile p(Spectrum(Eigen::VectorXd::Zero(4)), 4, 0.5);
  EXPECT_THROW(critical_radius(p), BracketFailure);
}

TEST(CriticalRadius, ModelSpectrumRate) {
  // lambda_j = j^{-1.5}: eps^2 should scale as n^{-2a/(2a+1)} = n^{-0.6}.
  const Spectrum s = model_spectrum(1.5);
  EXPECT_NEAR(s.sum(), 0.5, 1e-12);
  std::vector<double> ln, lr;
  for (Index n : {256, 1024, 4096}) {
    ln.push_back(std::log(static_cast<double>(n)));
    lr.push_back(std::log(critical_radius(ComplexityProfile(s, n, 0.25))));
  }
  EXPECT_NEAR(ols_slope(ln, lr), -0.6, 0.05);
}

TEST(CriticalRadius, EmpiricalAgreesWithModelWithinFactorFour) {
  const Spectrum model = model_spectrum(1.5);
  for (Index n : {256, 512}) {
    const double emp = critical_radius(ComplexityProfile(ntk_spectrum(n, 3, 50 + n), n, 0.25));
    const double pop = critical_radius(ComplexityProfile(model, n, 0.25));
    EXPECT_GT(emp / pop, 0.25) << n;
    EXPECT_LT(emp / pop, 4.0) << n;
  }
}

TEST(StoppingTime, SingleEigenvalueClosedForm) {
  const Eigen::VectorXd lambda = Eigen::VectorXd::Constant(1, 0.5);
  const ComplexityProfile p(Spectrum(lambda), 1, 1.0);
  const StoppingTime st = stopping_time(p, 0.5);
  EXPECT_EQ(st.steps, 2);
  EXPECT_FALSE(st.capped);
  EXPECT_EQ(st.steps, stopping_oracle(lambda, 1, 1.0, 0.5));
}

TEST(StoppingTime, MatchesScanOracleAndIsMonotoneInNoise) {
  const Index n = 100;
  const Spectrum s = ntk_spectrum(n, 3, 15);
  const double eta = 0.9 / s.top();
  std::int64_t prev = std::numeric_limits<std::int64_t>::max();
  for (double sigma : {0.1, 0.2, 0.4, 0.8}) {
    const StoppingTime st = stopping_time(ComplexityProfile(s, n, sigma), eta);
    EXPECT_EQ(st.steps, stopping_oracle(s.values(), n, sigma, eta));
    EXPECT_LE(st.steps, prev);
    prev = st.steps;
  }
}

TEST(StoppingTime, ScanCrossesOnce) {
  const Index n = 64;
  const ComplexityProfile p(ntk_spectrum(n, 3, 16), n, 0.25);
  const double eta = 1.0;
  const StoppingTime st = stopping_time(p, eta);
  for (std::int64_t t = 1; t < 4 * (st.steps + 1); ++t) {
    const double eta_t = eta * static_cast<double>(t);
    const bool violated = kernel_complexity(p, std::sqrt(1.0 / eta_t)) * p.sigma * eta_t > 1.0;
    EXPECT_EQ(violated, t > st.steps) << t;
  }
}

TEST(StoppingTime, CapIsReported) {
  const ComplexityProfile p(Spectrum(Eigen::VectorXd::Constant(1, 0.5)), 1, 1e-4);
  const StoppingTime st = stopping_time(p, 1e-3, 100);
  EXPECT_TRUE(st.capped);
  EXPECT_EQ(st.steps, 100);
}

TEST(StoppingTime, MatchesCriticalRadiusScale) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Index n = 64 + 40 * static_cast<Index>(seed);
    const Spectrum s = ntk_spectrum(n, 3, 300 + seed);
    const ComplexityProfile p(s, n, 0.25);
    const double eta = 0.9 / s.top();
    const double prod = eta * static_cast<double>(stopping_time(p, eta).steps) * critical_radius(p);
    EXPECT_GE(prod, 0.25);
    EXPECT_LE(prod, 4.0);
  }
}

// Population eigenvalues of K on S^2: mu_l = (1/2) int_0^pi K(cos t) P_l(cos t) sin t dt
// with multiplicity 2l + 1, by Simpson's rule in the angle.
std::vector<double> population_spectrum(int max_degree) {
  const int steps = 20000;
  const double h = std::numbers::pi / steps;
  std::vector<double> mu(static_cast<std::size_t>(max_degree + 1), 0.0);
  for (int k = 0; k <= steps; ++k) {
    const double t = k * h;
    const double c = std::cos(t);
    const double kern = c * (std::numbers::pi - t) / (2.0 * std::numbers::pi);
    const double w = (k == 0 || k == steps) ? 1.0 : (k % 2 ? 4.0 : 2.0);
    double p0 = 1.0, p1 = c;
    for (int l = 0; l <= max_degree; ++l) {
      const double pl = l == 0 ? p0 : p1;
      mu[static_cast<std::size_t>(l)] += w * kern * pl * std::sin(t);
      if (l >= 1) {
        const double next = ((2 * l + 1) * c * p1 - l * p0) / (l + 1);
        p0 = p1;
        p1 = next;
      }
    }
  }
  std::vector<double> lambda;
  for (int l = 0; l <= max_degree; ++l) {
    const double value = 0.5 * mu[static_cast<std::size_t>(l)] * h / 3.0;
    for (int r = 0; r < 2 * l + 1; ++r) lambda.push_back(value);
  }
  std::sort(lambda.begin(), lambda.end(), std::greater<>());
  return lambda;
}

TEST(EigenDecay, EmpiricalSpectrumMatchesPopulation) {
  const std::vector<double> pop = population_spectrum(12);
  EXPECT_NEAR(pop[0], 1.0 / 12.0, 1e-9);  // degree 1, triple
  EXPECT_NEAR(pop[3], 1.0 / 16.0, 1e-9);  // degree 0
  const Spectrum s = ntk_spectrum(2000, 3, 77);
  // Degrees 0, 1, 2, 4, 6, 8 fill the first 48 slots.
  for (Index j = 0; j < 48; ++j) {
    EXPECT_NEAR(s[j] / pop[static_cast<std::size_t>(j)], 1.0, 0.2) << "j=" << j + 1;
  }
}

}  // namespace
}  // namespace ntkstop
