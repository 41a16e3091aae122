#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>

#include "ntkstop/rng.hpp"

namespace ntkstop {

using Index = Eigen::Index;

/// A point on the unit sphere S^{d-1}. Coordinates are renormalized on
/// construction, so |‖coords‖ - 1| is at rounding level.
class UnitPoint {
 public:
  explicit UnitPoint(Eigen::VectorXd coords) : coords_(std::move(coords)) {
    const double norm = coords_.norm();
    if (!(norm > 0.0) || !std::isfinite(norm)) {
      throw std::invalid_argument("UnitPoint: zero or non-finite vector");
    }
    coords_ /= norm;
  }

  const Eigen::VectorXd& coords() const noexcept { return coords_; }
  Index dim() const noexcept { return coords_.size(); }

  double dot(const UnitPoint& other) const { return coords_.dot(other.coords_); }

  UnitPoint operator-() const { return UnitPoint(-coords_); }

 private:
  Eigen::VectorXd coords_;
};

/// A set of unit points stored as the rows of an n x d matrix.
class PointSet {
 public:
  PointSet() = default;

  /// Takes arbitrary nonzero rows and projects each onto the sphere.
  explicit PointSet(Eigen::MatrixXd rows) : rows_(std::move(rows)) {
    for (Index i = 0; i < rows_.rows(); ++i) {
      const double norm = rows_.row(i).norm();
      if (!(norm > 0.0) || !std::isfinite(norm)) {
        throw std::invalid_argument("PointSet: zero or non-finite row " + std::to_string(i));
      }
      rows_.row(i) /= norm;
    }
  }

  Index size() const noexcept { return rows_.rows(); }
  Index dim() const noexcept { return rows_.cols(); }
  bool empty() const noexcept { return rows_.rows() == 0; }

  const Eigen::MatrixXd& matrix() const noexcept { return rows_; }

  UnitPoint point(Index i) const { return UnitPoint(rows_.row(i).transpose()); }

  static PointSet single(const UnitPoint& p) {
    return PointSet(Eigen::MatrixXd(p.coords().transpose()));
  }

 private:
  Eigen::MatrixXd rows_;
};

/// n i.i.d. uniform points on S^{d-1}: normalized standard Gaussian vectors.
inline PointSet sample_sphere(Index n, Index d, std::uint64_t seed) {
  if (d < 2) throw std::invalid_argument("sample_sphere: d must be >= 2");
  if (n < 0) throw std::invalid_argument("sample_sphere: negative n");
  Engine engine = make_engine(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd rows(n, d);
  for (Index i = 0; i < n; ++i) {
    double norm2 = 0.0;
    do {
      norm2 = 0.0;
      for (Index k = 0; k < d; ++k) {
        rows(i, k) = normal(engine);
        norm2 += rows(i, k) * rows(i, k);
      }
    } while (norm2 == 0.0);
  }
  return PointSet(std::move(rows));
}

}  // namespace ntkstop
