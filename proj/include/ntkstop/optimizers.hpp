#pragma once

// Gradient descent and preconditioned gradient descent on the first layer,
// the factored preconditioner, kernel gradient-descent reference dynamics,
// and the early-stopped training loop.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "ntkstop/errors.hpp"
#include "ntkstop/kernel.hpp"
#include "ntkstop/network.hpp"
#include "ntkstop/spectral.hpp"

namespace ntkstop {

/// M = (1/N) Z_Q(0) Z_Q(0)^T for a uniform sample Q, held as the
/// initialization features on Q. M is only ever applied, never formed.
class Preconditioner {
 public:
  Preconditioner(const NetworkState& init_state, QuadratureSample q)
      : quadrature_(std::move(q)), features_(init_state, quadrature_.points()) {
    if (quadrature_.dim() != init_state.dim()) {
      throw std::invalid_argument("Preconditioner: dimension mismatch");
    }
  }

  static Preconditioner build(const NetworkState& init_state, Index count, std::uint64_t seed) {
    return Preconditioner(init_state, QuadratureSample::draw(count, init_state.dim(), seed));
  }

  Index size() const noexcept { return quadrature_.size(); }
  const QuadratureSample& quadrature() const noexcept { return quadrature_; }
  const FeatureMatrix& features() const noexcept { return features_; }

  /// Z_Q(0)^T vect(g), length N.
  Eigen::VectorXd project(const Eigen::MatrixXd& g) const { return features_.apply_transpose(g); }

  /// M vect(g) as an m x d matrix.
  Eigen::MatrixXd apply(const Eigen::MatrixXd& g) const {
    return features_.apply(project(g)) / static_cast<double>(size());
  }

 private:
  QuadratureSample quadrature_;
  FeatureMatrix features_;
};

namespace detail {

inline void check_training_inputs(const NetworkState& state, const PointSet& x,
                                  const Eigen::VectorXd& y) {
  if (x.size() != y.size()) throw std::invalid_argument("training: |X| != |y|");
  if (x.dim() != state.dim()) throw std::invalid_argument("training: dimension mismatch");
  if (x.empty()) throw std::invalid_argument("training: empty data");
}

inline void gd_update(NetworkState& state, const PointSet& x, const Eigen::VectorXd& residual,
                      double eta) {
  const double n = static_cast<double>(x.size());
  const Eigen::MatrixXd g =
      masked_feature_sum(state.weights(), state.signs(), x.matrix(), residual);
  state.weights() -= (eta / n) * g;
}

inline void pgd_update(NetworkState& state, const PointSet& x, const Eigen::VectorXd& residual,
                       double eta, const Preconditioner& precond) {
  const double n = static_cast<double>(x.size());
  const Eigen::MatrixXd g =
      masked_feature_sum(state.weights(), state.signs(), x.matrix(), residual);
  state.weights() -= (eta / n) * precond.apply(g);
}

}  // namespace detail

/// One GD step on L(W) = (1/2n) sum_i (f(W, x_i) - y_i)^2:
/// vect(W') = vect(W) - (eta/n) Z_S(t) (y-hat(t) - y).
inline NetworkState gd_step(const NetworkState& state, const PointSet& x, const Eigen::VectorXd& y,
                            double eta) {
  detail::check_training_inputs(state, x, y);
  NetworkState next = state;
  detail::gd_update(next, x, forward(state, x) - y, eta);
  return next;
}

/// One PGD step: vect(W') = vect(W) - (eta/n) M Z_S(t) (y-hat(t) - y).
inline NetworkState pgd_step(const NetworkState& state, const PointSet& x, const Eigen::VectorXd& y,
                             double eta, const Preconditioner& precond) {
  detail::check_training_inputs(state, x, y);
  NetworkState next = state;
  detail::pgd_update(next, x, forward(state, x) - y, eta, precond);
  return next;
}

/// Kernel gradient descent on a scaled gram G, the infinite-width limit of
/// the training dynamics: u(t) = -(I - eta G)^t y, evaluated in the
/// eigenbasis of G.
class KernelGdOracle {
 public:
  struct ResidualParts {
    Eigen::VectorXd signal;  // -(I - eta G)^t f*(S)
    Eigen::VectorXd noise;   // -(I - eta G)^t eps
  };

  KernelGdOracle(const Gram& gram, double eta) : eta_(eta) {
    if (!(eta > 0.0)) throw std::invalid_argument("KernelGdOracle: eta must be > 0");
    decomposition_ = eigen_decompose(gram.scaled().matrix);
    const double top = decomposition_.values.size() ? decomposition_.values(0) : 0.0;
    if (eta * top >= 1.0) {
      throw StepSizeTooLarge("eta * lambda_1 = " + std::to_string(eta * top) + " >= 1");
    }
  }

  double eta() const noexcept { return eta_; }
  const EigenDecomposition& decomposition() const noexcept { return decomposition_; }

  Eigen::VectorXd contraction(std::int64_t t) const {
    return (1.0 - eta_ * decomposition_.values.array()).pow(static_cast<double>(t)).matrix();
  }

  Eigen::VectorXd residual(const Eigen::VectorXd& y, std::int64_t t) const {
    const Eigen::MatrixXd& u = decomposition_.vectors;
    const Eigen::VectorXd coeffs = (u.transpose() * y).cwiseProduct(contraction(t));
    return -(u * coeffs);
  }

  ResidualParts residual_parts(const Eigen::VectorXd& fstar, const Eigen::VectorXd& noise,
                               std::int64_t t) const {
    return ResidualParts{residual(fstar, t), residual(noise, t)};
  }

  /// ||u(t)||^2 = sum_i (1 - eta lambda_i)^{2t} [U^T y]_i^2.
  double residual_norm_squared(const Eigen::VectorXd& y, std::int64_t t) const {
    const Eigen::VectorXd coeffs =
        (decomposition_.vectors.transpose() * y).cwiseProduct(contraction(t));
    return coeffs.squaredNorm();
  }

  Eigen::VectorXd predictions(const Eigen::VectorXd& y, std::int64_t t) const {
    return y + residual(y, t);
  }

 private:
  double eta_;
  EigenDecomposition decomposition_;
};

/// Kernel GD run by direct iteration. The predictor after `steps` steps is
/// f(x) = sum_i coefficients_i Ker(x, x_i); `fitted` is its value on the
/// training points.
struct KernelGdFit {
  Eigen::VectorXd coefficients;
  Eigen::VectorXd fitted;
  std::int64_t steps = 0;
};

/// `observe(t, fit)` is called after every step t = 1..steps.
template <class Observer>
KernelGdFit kernel_gd_fit(const Gram& gram, const Eigen::VectorXd& y, double eta,
                          std::int64_t steps, Observer&& observe) {
  const Index n = gram.size();
  if (y.size() != n) throw std::invalid_argument("kernel_gd_fit: size mismatch");
  const double dn = static_cast<double>(n);
  const Eigen::MatrixXd raw = gram.scale == GramScale::Raw ? gram.matrix : gram.matrix * dn;
  KernelGdFit fit{Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n), 0};
  Eigen::VectorXd residual(n);
  for (std::int64_t t = 1; t <= steps; ++t) {
    residual = fit.fitted - y;
    fit.coefficients -= (eta / dn) * residual;
    fit.fitted.noalias() -= (eta / dn) * (raw * residual);
    fit.steps = t;
    observe(t, static_cast<const KernelGdFit&>(fit));
  }
  return fit;
}

inline KernelGdFit kernel_gd_fit(const Gram& gram, const Eigen::VectorXd& y, double eta,
                                 std::int64_t steps) {
  return kernel_gd_fit(gram, y, eta, steps, [](std::int64_t, const KernelGdFit&) {});
}

enum class OptimizerKind { GradientDescent, Preconditioned };

enum class StopReason {
  ReachedStoppingTime,  // ran to the supplied early-stopping time
  Cap,                  // ran the requested number of steps
};

struct Snapshot {
  std::int64_t step = 0;
  Eigen::MatrixXd weights;
};

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::GradientDescent;
  double eta = 0.0;
  std::int64_t steps = 0;
  std::optional<std::int64_t> stopping_time;
  std::vector<std::int64_t> snapshot_steps;
  bool record_predictions = false;
};

struct TrainTrace {
  std::vector<double> residual_norms;  // ||u(t)|| / sqrt(n), t = 0..used_steps
  std::int64_t requested_steps = 0;
  std::int64_t used_steps = 0;
  StopReason stop_reason = StopReason::Cap;
  std::vector<Snapshot> snapshots;
  std::vector<Eigen::VectorXd> predictions;  // y-hat(t), when recorded
};

struct TrainResult {
  NetworkState state;
  TrainTrace trace;
};

/// Runs min(steps, stopping_time) GD or PGD steps from `state`.
inline TrainResult train(NetworkState state, const PointSet& x, const Eigen::VectorXd& y,
                         const TrainConfig& config, const Preconditioner* precond = nullptr) {
  detail::check_training_inputs(state, x, y);
  if (!(config.eta > 0.0)) throw std::invalid_argument("train: eta must be > 0");
  if (config.steps < 0) throw std::invalid_argument("train: negative step count");
  if (config.optimizer == OptimizerKind::Preconditioned && precond == nullptr) {
    throw std::invalid_argument("train: PGD requires a preconditioner");
  }

  TrainTrace trace;
  trace.requested_steps = config.steps;
  trace.used_steps = config.steps;
  if (config.stopping_time && *config.stopping_time <= config.steps) {
    trace.used_steps = std::max<std::int64_t>(*config.stopping_time, 0);
    trace.stop_reason = StopReason::ReachedStoppingTime;
  }
  trace.residual_norms.reserve(static_cast<std::size_t>(trace.used_steps) + 1);

  std::vector<std::int64_t> wanted = config.snapshot_steps;
  std::sort(wanted.begin(), wanted.end());
  auto next_snapshot = wanted.begin();

  const double root_n = std::sqrt(static_cast<double>(x.size()));
  for (std::int64_t t = 0;; ++t) {
    const Eigen::VectorXd yhat = forward(state, x);
    const Eigen::VectorXd u = yhat - y;
    if (!u.allFinite()) throw NonFiniteResidual(t);
    trace.residual_norms.push_back(u.norm() / root_n);
    if (config.record_predictions) trace.predictions.push_back(yhat);
    while (next_snapshot != wanted.end() && *next_snapshot < t) ++next_snapshot;
    if (next_snapshot != wanted.end() && *next_snapshot == t) {
      trace.snapshots.push_back(Snapshot{t, state.weights()});
      ++next_snapshot;
    }
    if (t == trace.used_steps) break;
    if (config.optimizer == OptimizerKind::GradientDescent) {
      detail::gd_update(state, x, u, config.eta);
    } else {
      detail::pgd_update(state, x, u, config.eta, *precond);
    }
  }
  return TrainResult{std::move(state), std::move(trace)};
}

}  // namespace ntkstop
