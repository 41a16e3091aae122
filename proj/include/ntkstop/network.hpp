#pragma once

// Two-layer ReLU network f(W, x) = (1/sqrt m) sum_r a_r max(w_r^T x, 0) with
// a fixed second layer, its gradient features, and the finite-width kernel
// statistics h-hat and v-hat.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <utility>

#include "ntkstop/errors.hpp"
#include "ntkstop/rng.hpp"
#include "ntkstop/sphere.hpp"

namespace ntkstop {

/// First-layer weights W (m x d, row r = w_r) and fixed output signs a.
class NetworkState {
 public:
  NetworkState(Eigen::MatrixXd weights, Eigen::VectorXd signs, double kappa = 1.0)
      : weights_(std::move(weights)), signs_(std::move(signs)), kappa_(kappa) {
    if (weights_.rows() != signs_.size()) {
      throw std::invalid_argument("NetworkState: weights/signs size mismatch");
    }
  }

  Index width() const noexcept { return weights_.rows(); }
  Index dim() const noexcept { return weights_.cols(); }
  double kappa() const noexcept { return kappa_; }

  const Eigen::MatrixXd& weights() const noexcept { return weights_; }
  Eigen::MatrixXd& weights() noexcept { return weights_; }
  const Eigen::VectorXd& signs() const noexcept { return signs_; }

 private:
  Eigen::MatrixXd weights_;
  Eigen::VectorXd signs_;
  double kappa_;
};

/// Symmetric initialization: pairs (2p, 2p+1) share w ~ N(0, kappa^2 I) and
/// carry opposite signs, so the network output is identically zero.
inline NetworkState init_network(Index m, Index d, double kappa, std::uint64_t seed) {
  if (m % 2 != 0 || m < 2) throw OddWidth("network width must be even and positive");
  if (!(kappa > 0.0 && kappa <= 1.0)) throw std::invalid_argument("kappa must lie in (0, 1]");
  if (d < 1) throw std::invalid_argument("dimension must be >= 1");
  Engine engine = make_engine(seed);
  std::normal_distribution<double> normal(0.0, kappa);
  std::bernoulli_distribution coin(0.5);
  Eigen::MatrixXd w(m, d);
  Eigen::VectorXd a(m);
  for (Index p = 0; p < m / 2; ++p) {
    for (Index k = 0; k < d; ++k) w(2 * p + 1, k) = normal(engine);
    w.row(2 * p) = w.row(2 * p + 1);
    const double s = coin(engine) ? 1.0 : -1.0;
    a(2 * p + 1) = s;
    a(2 * p) = -s;
  }
  return NetworkState(std::move(w), std::move(a), kappa);
}

namespace detail {

// Neuron tile height so that a tile x cols block stays around 1 MiB.
inline Index neuron_tile(Index cols) {
  return std::clamp<Index>((Index{1} << 17) / std::max<Index>(cols, 1), 8, 1024);
}

// y_i = (1/sqrt m) sum_r a_r relu(w_r . x_i)
inline Eigen::VectorXd relu_readout(const Eigen::MatrixXd& w, const Eigen::VectorXd& a,
                                    const Eigen::MatrixXd& x) {
  const Index m = w.rows();
  Eigen::VectorXd out = Eigen::VectorXd::Zero(x.rows());
  const Index tile = neuron_tile(x.rows());
  Eigen::MatrixXd pre;
  for (Index r0 = 0; r0 < m; r0 += tile) {
    const Index b = std::min(tile, m - r0);
    pre.noalias() = w.middleRows(r0, b) * x.transpose();
    out.noalias() += pre.cwiseMax(0.0).transpose() * a.segment(r0, b);
  }
  return out / std::sqrt(static_cast<double>(m));
}

// Z u as an m x d matrix: row r = (a_r/sqrt m) sum_i 1{w_r . x_i >= 0} u_i x_i
inline Eigen::MatrixXd masked_feature_sum(const Eigen::MatrixXd& w, const Eigen::VectorXd& a,
                                          const Eigen::MatrixXd& x, const Eigen::VectorXd& u) {
  const Index m = w.rows();
  Eigen::MatrixXd out(m, w.cols());
  const Index tile = neuron_tile(x.rows());
  const Eigen::RowVectorXd u_row = u.transpose();
  Eigen::MatrixXd pre;
  Eigen::MatrixXd weighted;
  for (Index r0 = 0; r0 < m; r0 += tile) {
    const Index b = std::min(tile, m - r0);
    pre.noalias() = w.middleRows(r0, b) * x.transpose();
    weighted = (pre.array() >= 0.0).select(u_row.replicate(b, 1), 0.0);
    out.middleRows(r0, b).noalias() = weighted * x;
  }
  out.array().colwise() *= a.array() / std::sqrt(static_cast<double>(m));
  return out;
}

// Z^T vect(G): entry i = sum_r (a_r/sqrt m) 1{w_r . x_i >= 0} g_r . x_i
inline Eigen::VectorXd masked_feature_dot(const Eigen::MatrixXd& w, const Eigen::VectorXd& a,
                                          const Eigen::MatrixXd& x, const Eigen::MatrixXd& g) {
  const Index m = w.rows();
  Eigen::VectorXd out = Eigen::VectorXd::Zero(x.rows());
  const Index tile = neuron_tile(x.rows());
  Eigen::MatrixXd pre;
  Eigen::MatrixXd proj;
  Eigen::MatrixXd masked;
  for (Index r0 = 0; r0 < m; r0 += tile) {
    const Index b = std::min(tile, m - r0);
    pre.noalias() = w.middleRows(r0, b) * x.transpose();
    proj.noalias() = g.middleRows(r0, b) * x.transpose();
    masked = (pre.array() >= 0.0).select(proj, 0.0);
    out.noalias() += masked.transpose() * a.segment(r0, b);
  }
  return out / std::sqrt(static_cast<double>(m));
}

}  // namespace detail

inline double forward(const NetworkState& state, const UnitPoint& x) {
  const Eigen::VectorXd pre = state.weights() * x.coords();
  return pre.cwiseMax(0.0).dot(state.signs()) / std::sqrt(static_cast<double>(state.width()));
}

inline Eigen::VectorXd forward(const NetworkState& state, const PointSet& x) {
  return detail::relu_readout(state.weights(), state.signs(), x.matrix());
}

/// Gradient feature matrix Z (md x n) of the network at a fixed weight
/// snapshot: column i, block r is (a_r/sqrt m) 1{w_r^T x_i >= 0} x_i.
/// Stored factored as (weights, signs, points); never formed densely except
/// through `dense()` for small checks. The block layout of vect(W) is the
/// row-major flattening of the m x d weight matrix, so md-vectors are passed
/// around as m x d matrices.
class FeatureMatrix {
 public:
  FeatureMatrix(const NetworkState& state, PointSet points)
      : weights_(state.weights()), signs_(state.signs()), points_(std::move(points)) {
    if (points_.dim() != weights_.cols()) {
      throw std::invalid_argument("FeatureMatrix: dimension mismatch");
    }
  }

  Index width() const noexcept { return weights_.rows(); }
  Index dim() const noexcept { return weights_.cols(); }
  Index cols() const noexcept { return points_.size(); }
  const PointSet& points() const noexcept { return points_; }
  const Eigen::MatrixXd& weights() const noexcept { return weights_; }

  bool active(Index r, Index i) const {
    return weights_.row(r).dot(points_.matrix().row(i)) >= 0.0;
  }

  /// Z u, returned as m x d.
  Eigen::MatrixXd apply(const Eigen::VectorXd& u) const {
    if (u.size() != cols()) throw std::invalid_argument("FeatureMatrix::apply: size mismatch");
    return detail::masked_feature_sum(weights_, signs_, points_.matrix(), u);
  }

  /// Z^T vect(g) for an m x d matrix g.
  Eigen::VectorXd apply_transpose(const Eigen::MatrixXd& g) const {
    if (g.rows() != width() || g.cols() != dim()) {
      throw std::invalid_argument("FeatureMatrix::apply_transpose: shape mismatch");
    }
    return detail::masked_feature_dot(weights_, signs_, points_.matrix(), g);
  }

  /// Z^T Z: entry (i, j) = (1/m) x_i^T x_j #{r : both active}.
  Eigen::MatrixXd inner_gram() const {
    const Eigen::MatrixXd& x = points_.matrix();
    const Index m = width();
    const Index n = cols();
    Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(n, n);
    const Index tile = detail::neuron_tile(n);
    Eigen::MatrixXd pre;
    Eigen::MatrixXd mask;
    for (Index r0 = 0; r0 < m; r0 += tile) {
      const Index b = std::min(tile, m - r0);
      pre.noalias() = weights_.middleRows(r0, b) * x.transpose();
      mask = (pre.array() >= 0.0).cast<double>();
      counts.noalias() += mask.transpose() * mask;
    }
    Eigen::MatrixXd dots = x * x.transpose();
    return (counts.array() * dots.array()).matrix() / static_cast<double>(m);
  }

  /// Z^T Z' for another feature matrix of the same width (possibly at other
  /// weights and points): entry (i, j) = (1/m) x_i^T x'_j sum_r a_r a'_r 1{..}1{..}.
  Eigen::MatrixXd cross_inner(const FeatureMatrix& other) const {
    if (other.width() != width() || other.dim() != dim()) {
      throw std::invalid_argument("FeatureMatrix::cross_inner: shape mismatch");
    }
    const Eigen::MatrixXd& x = points_.matrix();
    const Eigen::MatrixXd& y = other.points_.matrix();
    const Index m = width();
    const Eigen::VectorXd sign_product = signs_.cwiseProduct(other.signs_);
    Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(cols(), other.cols());
    const Index tile = detail::neuron_tile(std::max(cols(), other.cols()));
    Eigen::MatrixXd mask_x;
    Eigen::MatrixXd mask_y;
    for (Index r0 = 0; r0 < m; r0 += tile) {
      const Index b = std::min(tile, m - r0);
      mask_x = ((weights_.middleRows(r0, b) * x.transpose()).array() >= 0.0).cast<double>();
      mask_y = ((other.weights_.middleRows(r0, b) * y.transpose()).array() >= 0.0).cast<double>();
      mask_y.array().colwise() *= sign_product.segment(r0, b).array();
      counts.noalias() += mask_x.transpose() * mask_y;
    }
    Eigen::MatrixXd dots = x * y.transpose();
    return (counts.array() * dots.array()).matrix() / static_cast<double>(m);
  }

  /// Dense md x n matrix; only for small sizes.
  Eigen::MatrixXd dense() const {
    const Index m = width();
    const Index d = dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(m));
    Eigen::MatrixXd z = Eigen::MatrixXd::Zero(m * d, cols());
    for (Index i = 0; i < cols(); ++i) {
      for (Index r = 0; r < m; ++r) {
        if (active(r, i)) {
          z.block(r * d, i, d, 1) = signs_(r) * scale * points_.matrix().row(i).transpose();
        }
      }
    }
    return z;
  }

 private:
  Eigen::MatrixXd weights_;
  Eigen::VectorXd signs_;
  PointSet points_;
};

inline FeatureMatrix features(const NetworkState& state, const PointSet& x) {
  return FeatureMatrix(state, x);
}

/// h-hat(W, x, y) = (1/m) sum_r x^T y 1{w_r^T x >= 0} 1{w_r^T y >= 0}.
inline double h_hat(const NetworkState& state, const UnitPoint& x, const UnitPoint& y) {
  const Eigen::VectorXd px = state.weights() * x.coords();
  const Eigen::VectorXd py = state.weights() * y.coords();
  Index both = 0;
  for (Index r = 0; r < px.size(); ++r) both += (px(r) >= 0.0 && py(r) >= 0.0) ? 1 : 0;
  return x.dot(y) * static_cast<double>(both) / static_cast<double>(state.width());
}

/// h-hat over all pairs of a point set; equals Z^T Z at the same weights.
inline Eigen::MatrixXd h_hat_gram(const NetworkState& state, const PointSet& x) {
  return FeatureMatrix(state, x).inner_gram();
}

/// Fraction of neurons whose pre-activation at x lies in [-R, R].
inline double v_hat(const NetworkState& state, const UnitPoint& x, double radius) {
  if (radius < 0.0) throw std::invalid_argument("v_hat: radius must be >= 0");
  const Eigen::VectorXd px = state.weights() * x.coords();
  const auto inside = (px.array().abs() <= radius).count();
  return static_cast<double>(inside) / static_cast<double>(state.width());
}

/// Limit of v-hat for Gaussian weights and small R: 2R / (sqrt(2 pi) kappa).
inline double v_hat_limit(double radius, double kappa) {
  return 2.0 * radius / (std::sqrt(2.0 * std::numbers::pi) * kappa);
}

}  // namespace ntkstop
