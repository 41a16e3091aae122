#pragma once

// Neural tangent kernel of the two-layer ReLU network, its Monte-Carlo
// integrated version, and gram / cross-gram construction.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <memory>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "ntkstop/errors.hpp"
#include "ntkstop/sphere.hpp"

namespace ntkstop {

/// K as a function of the cosine between two unit vectors:
/// c (pi - arccos c) / (2 pi), with c clamped to [-1, 1].
inline double ntk_from_cosine(double c) {
  c = std::clamp(c, -1.0, 1.0);
  return c * (std::numbers::pi - std::acos(c)) / (2.0 * std::numbers::pi);
}

namespace detail {

// Near-parallel or near-antipodal pairs lose the angle to cancellation in
// arccos; recover it from the chord lengths instead.
inline constexpr double kNearParallel = 1.0 - 1e-6;

inline double ntk_from_pair(const Eigen::Ref<const Eigen::RowVectorXd>& u,
                            const Eigen::Ref<const Eigen::RowVectorXd>& v) {
  const double theta = 2.0 * std::atan2((u - v).norm(), (u + v).norm());
  return std::cos(theta) * (std::numbers::pi - theta) / (2.0 * std::numbers::pi);
}

}  // namespace detail

inline double ntk_eval(const UnitPoint& u, const UnitPoint& v) {
  const double c = u.dot(v);
  if (std::abs(c) > detail::kNearParallel) {
    return detail::ntk_from_pair(u.coords().transpose(), v.coords().transpose());
  }
  return ntk_from_cosine(c);
}

/// Fixed i.i.d. uniform sample on the sphere used for every evaluation of
/// the integrated kernel.
class QuadratureSample {
 public:
  QuadratureSample(PointSet points, std::uint64_t seed) : points_(std::move(points)), seed_(seed) {
    if (points_.empty()) throw std::invalid_argument("QuadratureSample: N must be >= 1");
  }

  static QuadratureSample draw(Index count, Index dim, std::uint64_t seed) {
    if (count < 1) throw std::invalid_argument("QuadratureSample: N must be >= 1");
    return QuadratureSample(sample_sphere(count, dim, seed), seed);
  }

  const PointSet& points() const noexcept { return points_; }
  Index size() const noexcept { return points_.size(); }
  Index dim() const noexcept { return points_.dim(); }
  std::uint64_t seed() const noexcept { return seed_; }

 private:
  PointSet points_;
  std::uint64_t seed_;
};

/// K̂int(u, v) = (1/N) sum_i K(u, q_i) K(q_i, v).
inline double kint_eval_mc(const UnitPoint& u, const UnitPoint& v, const QuadratureSample& q) {
  const Eigen::MatrixXd& qm = q.points().matrix();
  const Eigen::VectorXd cu = qm * u.coords();
  const Eigen::VectorXd cv = qm * v.coords();
  double acc = 0.0;
  for (Index i = 0; i < q.size(); ++i) acc += ntk_from_cosine(cu(i)) * ntk_from_cosine(cv(i));
  return acc / static_cast<double>(q.size());
}

/// Entrywise NTK between the rows of two point sets.
inline Eigen::MatrixXd ntk_cross(const PointSet& a, const PointSet& b) {
  Eigen::MatrixXd c = a.matrix() * b.matrix().transpose();
  for (Index j = 0; j < c.cols(); ++j) {
    for (Index i = 0; i < c.rows(); ++i) {
      const double x = c(i, j);
      c(i, j) = std::abs(x) > detail::kNearParallel
                    ? detail::ntk_from_pair(a.matrix().row(i), b.matrix().row(j))
                    : ntk_from_cosine(x);
    }
  }
  return c;
}

struct NtkKernel {
  double operator()(const UnitPoint& u, const UnitPoint& v) const { return ntk_eval(u, v); }
  Eigen::MatrixXd cross(const PointSet& a, const PointSet& b) const { return ntk_cross(a, b); }
};

/// Monte-Carlo integrated kernel bound to one quadrature sample. Copies share
/// the sample.
class IntegratedKernel {
 public:
  explicit IntegratedKernel(QuadratureSample q)
      : q_(std::make_shared<const QuadratureSample>(std::move(q))) {}
  explicit IntegratedKernel(std::shared_ptr<const QuadratureSample> q) : q_(std::move(q)) {
    if (!q_) throw std::invalid_argument("IntegratedKernel: null quadrature");
  }

  double operator()(const UnitPoint& u, const UnitPoint& v) const { return kint_eval_mc(u, v, *q_); }

  /// Rows F with F F^T equal to the integrated gram: F = K_{A,Q} / sqrt(N).
  Eigen::MatrixXd feature_map(const PointSet& a) const {
    Eigen::MatrixXd f = ntk_cross(a, q_->points());
    f /= std::sqrt(static_cast<double>(q_->size()));
    return f;
  }

  Eigen::MatrixXd cross(const PointSet& a, const PointSet& b) const {
    const Eigen::MatrixXd fa = feature_map(a);
    if (&a == &b) {
      Eigen::MatrixXd g = Eigen::MatrixXd::Zero(fa.rows(), fa.rows());
      g.selfadjointView<Eigen::Lower>().rankUpdate(fa);
      return g.selfadjointView<Eigen::Lower>();
    }
    return fa * feature_map(b).transpose();
  }

  const QuadratureSample& quadrature() const noexcept { return *q_; }
  const std::shared_ptr<const QuadratureSample>& shared_quadrature() const noexcept { return q_; }

 private:
  std::shared_ptr<const QuadratureSample> q_;
};

template <class K>
concept PointKernel = requires(const K& k, const UnitPoint& u, const PointSet& a) {
  { k(u, u) } -> std::convertible_to<double>;
  { k.cross(a, a) } -> std::convertible_to<Eigen::MatrixXd>;
};

enum class GramScale { Raw, Scaled };

/// Symmetric kernel gram. Scaled means divided by the number of points.
struct Gram {
  Eigen::MatrixXd matrix;
  GramScale scale = GramScale::Raw;

  Index size() const noexcept { return matrix.rows(); }

  Gram scaled() const {
    if (scale == GramScale::Scaled) return *this;
    return Gram{matrix / static_cast<double>(matrix.rows()), GramScale::Scaled};
  }
};

inline constexpr double kDuplicateTolerance = 1e-12;

/// Throws DuplicatePoints if two rows are within kDuplicateTolerance.
inline void check_distinct(const PointSet& points) {
  const Eigen::MatrixXd& x = points.matrix();
  const Eigen::MatrixXd cosines = x * x.transpose();
  for (Index j = 0; j < x.rows(); ++j) {
    for (Index i = j + 1; i < x.rows(); ++i) {
      // Only near-parallel pairs can be duplicates; confirm with the exact distance.
      if (cosines(i, j) > 1.0 - 1e-6 && (x.row(i) - x.row(j)).norm() < kDuplicateTolerance) {
        std::ostringstream msg;
        msg << "points " << j << " and " << i << " coincide";
        throw DuplicatePoints(msg.str());
      }
    }
  }
}

template <PointKernel K>
Eigen::MatrixXd cross_gram(const PointSet& a, const PointSet& b, const K& kernel) {
  if (a.dim() != b.dim()) throw std::invalid_argument("cross_gram: dimension mismatch");
  return kernel.cross(a, b);
}

/// Raw gram of the kernel over distinct points, symmetrized as (A + A^T)/2.
template <PointKernel K>
Gram gram(const PointSet& points, const K& kernel) {
  check_distinct(points);
  Eigen::MatrixXd m = kernel.cross(points, points);
  Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  return Gram{std::move(sym), GramScale::Raw};
}

}  // namespace ntkstop
