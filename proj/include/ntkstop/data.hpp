#pragma once

// Spherical regression data: RKHS targets built from kernel sections,
// noisy labels, and Monte-Carlo risk.

#include <Eigen/Dense>

#include <cmath>
#include <concepts>
#include <cstdint>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>

#include "ntkstop/errors.hpp"
#include "ntkstop/kernel.hpp"
#include "ntkstop/rng.hpp"
#include "ntkstop/spectral.hpp"
#include "ntkstop/sphere.hpp"

namespace ntkstop {

/// RKHS the target lives in: H_K or H_{K^int} (through a fixed quadrature).
enum class TargetSpace { Ntk, Integrated };

inline std::string to_string(TargetSpace space) {
  return space == TargetSpace::Ntk ? "H_K" : "H_Kint";
}

/// f*(x) = sum_j c_j Ker(x, z_j) with Ker = K or K̂int over a fixed sample.
class TargetFunction {
 public:
  TargetFunction(PointSet centers, Eigen::VectorXd coeffs, TargetSpace space, double f0,
                 std::shared_ptr<const QuadratureSample> quadrature = nullptr)
      : centers_(std::move(centers)),
        coeffs_(std::move(coeffs)),
        space_(space),
        f0_(f0),
        quadrature_(std::move(quadrature)) {
    if (centers_.size() != coeffs_.size()) throw std::invalid_argument("TargetFunction: size mismatch");
    if (space_ == TargetSpace::Integrated) {
      if (!quadrature_) throw std::invalid_argument("TargetFunction: H_Kint needs a quadrature");
      // f*(x) = K(x, Q) beta with beta = K(Q, Z) c / N
      beta_ = ntk_cross(quadrature_->points(), centers_) * coeffs_;
      beta_ /= static_cast<double>(quadrature_->size());
    }
  }

  TargetSpace space() const noexcept { return space_; }
  double f0() const noexcept { return f0_; }
  Index dim() const noexcept { return centers_.dim(); }
  const PointSet& centers() const noexcept { return centers_; }
  const Eigen::VectorXd& coeffs() const noexcept { return coeffs_; }
  const std::shared_ptr<const QuadratureSample>& quadrature() const noexcept { return quadrature_; }

  Eigen::VectorXd operator()(const PointSet& x) const {
    if (space_ == TargetSpace::Ntk) return ntk_cross(x, centers_) * coeffs_;
    return ntk_cross(x, quadrature_->points()) * beta_;
  }

  double operator()(const UnitPoint& x) const { return (*this)(PointSet::single(x))(0); }

  /// Gram of the target's kernel on the centers.
  Eigen::MatrixXd center_gram() const {
    if (space_ == TargetSpace::Ntk) return gram(centers_, NtkKernel{}).matrix;
    return gram(centers_, IntegratedKernel(quadrature_)).matrix;
  }

  /// c^T G_ZZ c.
  double rkhs_norm_squared() const { return coeffs_.dot(center_gram() * coeffs_); }

 private:
  PointSet centers_;
  Eigen::VectorXd coeffs_;
  TargetSpace space_;
  double f0_;
  std::shared_ptr<const QuadratureSample> quadrature_;
  Eigen::VectorXd beta_;
};

inline constexpr double kSingularGramTolerance = 1e-12;

/// k uniform centers and Gaussian coefficients, rescaled to RKHS norm f0.
inline TargetFunction make_target(TargetSpace space, Index k, double f0, Index d,
                                  std::uint64_t seed,
                                  std::shared_ptr<const QuadratureSample> quadrature = nullptr) {
  if (k < 1) throw std::invalid_argument("make_target: k must be >= 1");
  if (!(f0 > 0.0)) throw std::invalid_argument("make_target: f0 must be > 0");
  if (space == TargetSpace::Integrated && !quadrature) {
    throw std::invalid_argument("make_target: H_Kint target needs a fixed quadrature sample");
  }
  PointSet centers = sample_sphere(k, d, derive_seed(seed, Stream::Target, 1));
  Engine engine = make_engine(derive_seed(seed, Stream::Target, 2));
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd c(k);
  for (Index j = 0; j < k; ++j) c(j) = normal(engine);

  TargetFunction unscaled(std::move(centers), c, space, f0, quadrature);
  const Eigen::MatrixXd g = unscaled.center_gram();
  const double min_eig = eigenvalues(g).minCoeff();
  if (min_eig < kSingularGramTolerance) {
    throw SingularGram("center gram has eigenvalue " + std::to_string(min_eig));
  }
  const double norm = std::sqrt(c.dot(g * c));
  return TargetFunction(unscaled.centers(), c * (f0 / norm), space, f0, std::move(quadrature));
}

/// Training sample with y = f*(x) + noise, noise ~ N(0, sigma^2).
struct Dataset {
  PointSet x;
  Eigen::VectorXd fstar;
  Eigen::VectorXd noise;
  Eigen::VectorXd y;
  double sigma = 0.0;
  std::uint64_t seed = 0;

  Index size() const noexcept { return x.size(); }
};

inline Dataset make_dataset(const TargetFunction& target, Index n, double sigma,
                            std::uint64_t seed) {
  if (sigma < 0.0) throw std::invalid_argument("make_dataset: sigma must be >= 0");
  Dataset data;
  data.seed = seed;
  data.sigma = sigma;
  data.x = sample_sphere(n, target.dim(), derive_seed(seed, Stream::Data));
  data.fstar = target(data.x);
  Engine engine = make_engine(derive_seed(seed, Stream::Noise));
  std::normal_distribution<double> normal(0.0, 1.0);
  data.noise.resize(n);
  for (Index i = 0; i < n; ++i) data.noise(i) = sigma * normal(engine);
  data.y = data.fstar + data.noise;
  return data;
}

struct RiskEstimate {
  double risk = 0.0;
  double standard_error = 0.0;
  Index samples = 0;
};

template <class P>
concept Predictor = requires(const P& p, const PointSet& x) {
  { p(x) } -> std::convertible_to<Eigen::VectorXd>;
};

/// Monte-Carlo estimate of E[(f-hat - f*)^2] on fresh uniform points.
template <Predictor P>
RiskEstimate risk(const P& predictor, const TargetFunction& target, Index n_test,
                  std::uint64_t seed) {
  if (n_test < 1) throw std::invalid_argument("risk: n_test must be >= 1");
  const PointSet test = sample_sphere(n_test, target.dim(), derive_seed(seed, Stream::Test));
  const Eigen::VectorXd predicted = predictor(test);
  const Eigen::ArrayXd sq = (predicted - target(test)).array().square();
  RiskEstimate out;
  out.samples = n_test;
  out.risk = sq.mean();
  if (n_test > 1) {
    const double var = (sq - out.risk).square().sum() / static_cast<double>(n_test - 1);
    out.standard_error = std::sqrt(var / static_cast<double>(n_test));
  }
  return out;
}

}  // namespace ntkstop
