#pragma once

// Gram spectra, kernel complexity, critical radii and early-stopping times.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <utility>
#include <vector>

#include "ntkstop/errors.hpp"
#include "ntkstop/kernel.hpp"

extern "C" {
void dsyevd_(const char* jobz, const char* uplo, const int* n, double* a, const int* lda,
             double* w, double* work, const int* lwork, int* iwork, const int* liwork, int* info);
}

namespace ntkstop {

inline constexpr double kPsdSlack = 1e-8;

/// Eigenpairs of a symmetric matrix, eigenvalues nonincreasing and the
/// columns of `vectors` in matching order.
struct EigenDecomposition {
  Eigen::VectorXd values;
  Eigen::MatrixXd vectors;
};

namespace detail {

// LAPACK divide-and-conquer; `a` is overwritten with eigenvectors when wanted.
inline Eigen::VectorXd syevd(Eigen::MatrixXd& a, bool want_vectors) {
  const int n = static_cast<int>(a.rows());
  if (a.cols() != a.rows()) throw std::invalid_argument("eigen: matrix is not square");
  Eigen::VectorXd w(n);
  if (n == 0) return w;
  const char jobz = want_vectors ? 'V' : 'N';
  const char uplo = 'L';
  int info = 0;
  int lwork = -1;
  int liwork = -1;
  double work_query = 0.0;
  int iwork_query = 0;
  dsyevd_(&jobz, &uplo, &n, a.data(), &n, w.data(), &work_query, &lwork, &iwork_query, &liwork,
          &info);
  if (info != 0) throw Error("dsyevd workspace query failed");
  lwork = static_cast<int>(work_query);
  liwork = iwork_query;
  std::vector<double> work(static_cast<std::size_t>(std::max(lwork, 1)));
  std::vector<int> iwork(static_cast<std::size_t>(std::max(liwork, 1)));
  dsyevd_(&jobz, &uplo, &n, a.data(), &n, w.data(), work.data(), &lwork, iwork.data(), &liwork,
          &info);
  if (info != 0) throw Error("dsyevd failed to converge (info=" + std::to_string(info) + ")");
  return w;
}

}  // namespace detail

/// Full symmetric eigendecomposition, nonincreasing order.
inline EigenDecomposition eigen_decompose(const Eigen::MatrixXd& symmetric) {
  Eigen::MatrixXd a = symmetric;
  Eigen::VectorXd w = detail::syevd(a, true);
  return EigenDecomposition{w.reverse(), a.rowwise().reverse()};
}

/// Eigenvalues only, nonincreasing.
inline Eigen::VectorXd eigenvalues(const Eigen::MatrixXd& symmetric) {
  Eigen::MatrixXd a = symmetric;
  return detail::syevd(a, false).reverse();
}

enum class SpectrumSource { Empirical, Model };

/// Nonincreasing, nonnegative eigenvalues with prefix sums for fast
/// evaluation of sum_i min(lambda_i, r).
class Spectrum {
 public:
  Spectrum() = default;

  /// Sorts, clips values in [-kPsdSlack, 0) to zero, rejects anything lower.
  explicit Spectrum(Eigen::VectorXd values, SpectrumSource source = SpectrumSource::Empirical)
      : values_(std::move(values)), source_(source) {
    std::sort(values_.begin(), values_.end(), std::greater<>());
    for (double& v : values_) {
      if (!std::isfinite(v)) throw NotPSD("non-finite eigenvalue");
      if (v < -kPsdSlack) {
        std::ostringstream msg;
        msg << "eigenvalue " << v << " below PSD slack";
        throw NotPSD(msg.str());
      }
      if (v < 0.0) v = 0.0;
    }
    tail_.assign(static_cast<std::size_t>(values_.size()) + 1, 0.0);
    for (Index i = values_.size() - 1; i >= 0; --i) {
      tail_[static_cast<std::size_t>(i)] = tail_[static_cast<std::size_t>(i) + 1] + values_(i);
    }
  }

  const Eigen::VectorXd& values() const noexcept { return values_; }
  Index size() const noexcept { return values_.size(); }
  SpectrumSource source() const noexcept { return source_; }
  double top() const { return values_.size() ? values_(0) : 0.0; }
  double sum() const { return tail_.empty() ? 0.0 : tail_.front(); }
  double operator[](Index i) const { return values_(i); }

  /// sum_i min(lambda_i, r) in O(log size).
  double sum_min(double r) const {
    if (r <= 0.0) return 0.0;
    // first index with lambda_i <= r
    const auto it = std::lower_bound(values_.begin(), values_.end(), r, std::greater<>());
    const auto k = static_cast<std::size_t>(it - values_.begin());
    return r * static_cast<double>(k) + tail_[k];
  }

 private:
  Eigen::VectorXd values_;
  std::vector<double> tail_;
  SpectrumSource source_ = SpectrumSource::Empirical;
};

/// Spectrum of a gram. With `scaled`, a raw gram is divided by n first.
inline Spectrum eigen(const Gram& gram, bool scaled = true) {
  Eigen::MatrixXd a = gram.matrix;
  if (scaled && gram.scale == GramScale::Raw) a /= static_cast<double>(a.rows());
  return Spectrum(detail::syevd(a, false), SpectrumSource::Empirical);
}

/// Truncated model spectrum lambda_j = c j^{-decay}, j = 1..terms, with c
/// chosen so the values sum to `trace`.
inline Spectrum model_spectrum(double decay, Index terms = 100000, double trace = 0.5) {
  if (terms < 1 || !(decay > 0.0)) throw std::invalid_argument("model_spectrum: bad parameters");
  Eigen::VectorXd v(terms);
  for (Index j = 0; j < terms; ++j) v(j) = std::pow(static_cast<double>(j + 1), -decay);
  v *= trace / v.sum();
  return Spectrum(std::move(v), SpectrumSource::Model);
}

/// Spectrum plus sample count and noise level.
struct ComplexityProfile {
  Spectrum spectrum;
  Index n = 1;
  double sigma = 1.0;

  ComplexityProfile(Spectrum s, Index n_samples, double noise)
      : spectrum(std::move(s)), n(n_samples), sigma(noise) {
    if (n < 1) throw std::invalid_argument("ComplexityProfile: n must be >= 1");
    if (!(sigma > 0.0)) throw std::invalid_argument("ComplexityProfile: sigma must be > 0");
  }
};

/// R(eps) = sqrt((1/n) sum_i min(lambda_i, eps^2)).
inline double kernel_complexity(const ComplexityProfile& profile, double eps) {
  if (eps < 0.0) throw std::invalid_argument("kernel_complexity: eps must be >= 0");
  return std::sqrt(profile.spectrum.sum_min(eps * eps) / static_cast<double>(profile.n));
}

/// Squared critical radius: the positive fixed point r* of r -> sigma R(sqrt r).
/// The map is sub-root, so the sign change of sigma R(sqrt r) - r on the
/// bracket is unique; bisection is used because R has kinks at r = lambda_i.
inline double critical_radius(const ComplexityProfile& profile, double rel_tol = 1e-10) {
  auto g = [&](double r) { return profile.sigma * kernel_complexity(profile, std::sqrt(r)) - r; };
  const double s = profile.sigma;
  double lo = 1e-14;
  double hi = std::max({s * s, profile.spectrum.top(), 1.0});
  const double g_lo = g(lo);
  const double g_hi = g(hi);
  if (!(g_lo > 0.0) || !(g_hi < 0.0)) {
    std::ostringstream msg;
    msg << "critical_radius: no sign change on [" << lo << ", " << hi << "] (g=" << g_lo << ", "
        << g_hi << ")";
    throw BracketFailure(msg.str());
  }
  for (int iter = 0; iter < 400 && hi - lo > rel_tol * hi; ++iter) {
    const double mid = 0.5 * (lo + hi);
    if (g(mid) > 0.0) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

struct StoppingTime {
  std::int64_t steps = 0;
  bool capped = false;
};

inline constexpr std::int64_t kDefaultStoppingCap = 1'000'000;

/// Last step before R(sqrt(1/(eta t))) first exceeds 1/(sigma eta t), found
/// by a linear scan over t = 1..t_max.
inline StoppingTime stopping_time(const ComplexityProfile& profile, double eta,
                                  std::int64_t t_max = kDefaultStoppingCap) {
  if (!(eta > 0.0)) throw std::invalid_argument("stopping_time: eta must be > 0");
  for (std::int64_t t = 1; t <= t_max; ++t) {
    const double eta_t = eta * static_cast<double>(t);
    if (kernel_complexity(profile, std::sqrt(1.0 / eta_t)) > 1.0 / (profile.sigma * eta_t)) {
      return StoppingTime{t - 1, false};
    }
  }
  return StoppingTime{t_max, true};
}

}  // namespace ntkstop
