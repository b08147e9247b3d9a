#pragma once

// Covariances of the form Sigma = diag(A) + U U^T with A > 0 and U of size
// P x K. Every operation goes through the K x K capacitance matrix
// C = I + U^T diag(A)^-1 U; no P x P matrix is ever formed.

#include <cmath>
#include <numbers>

#include "varinf/autodiff.hpp"

namespace varinf {

template <typename T>
struct StructuredCov {
  Vector<T> diag;    // A, strictly positive
  Matrix<T> factor;  // U, P x K (K may be 0)

  Index dim() const { return diag.size(); }
  Index rank() const { return factor.cols(); }

  void validate() const {
    if (factor.rows() != diag.size() && factor.cols() > 0) {
      throw ShapeError("StructuredCov: factor rows must equal diag length");
    }
    for (Index i = 0; i < diag.size(); ++i) {
      if (!(value_of(diag[i]) > 0.0)) throw FactorizationError("StructuredCov: diag entry not positive");
    }
  }
};

/// Lower Cholesky factor of a small SPD matrix, computed with the same scalar
/// type as its input so it can be recorded on a tape.
template <typename T>
Matrix<T> cholesky_lower(const Matrix<T>& m) {
  using std::sqrt;
  using ad::sqrt;
  const Index n = m.rows();
  Matrix<T> l = Matrix<T>::Zero(n, n);
  for (Index j = 0; j < n; ++j) {
    T d = m(j, j);
    for (Index k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(value_of(d) > 0.0) || !std::isfinite(value_of(d))) {
      throw FactorizationError("cholesky: matrix is not positive definite");
    }
    l(j, j) = sqrt(d);
    for (Index i = j + 1; i < n; ++i) {
      T s = m(i, j);
      for (Index k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / l(j, j);
    }
  }
  return l;
}

/// Solves L y = b for lower-triangular L.
template <typename T>
Vector<T> forward_substitute(const Matrix<T>& l, const Vector<T>& b) {
  const Index n = l.rows();
  Vector<T> y(n);
  for (Index i = 0; i < n; ++i) {
    T s = b[i];
    for (Index k = 0; k < i; ++k) s -= l(i, k) * y[k];
    y[i] = s / l(i, i);
  }
  return y;
}

/// Solves L^T x = y for lower-triangular L.
template <typename T>
Vector<T> backward_substitute(const Matrix<T>& l, const Vector<T>& y) {
  const Index n = l.rows();
  Vector<T> x(n);
  for (Index i = n - 1; i >= 0; --i) {
    T s = y[i];
    for (Index k = i + 1; k < n; ++k) s -= l(k, i) * x[k];
    x[i] = s / l(i, i);
  }
  return x;
}

/// C = I_K + U^T diag(A)^-1 U with its Cholesky factor. Must be rebuilt when
/// A or U change.
template <typename T>
class CapacitanceFactor {
 public:
  explicit CapacitanceFactor(const StructuredCov<T>& cov) {
    cov.validate();
    const Index p = cov.dim();
    const Index k = cov.rank();
    scaled_ = Matrix<T>(p, k);  // A^-1 U
    for (Index c = 0; c < k; ++c) {
      for (Index r = 0; r < p; ++r) scaled_(r, c) = cov.factor(r, c) / cov.diag[r];
    }
    Matrix<T> cap(k, k);
    for (Index i = 0; i < k; ++i) {
      Vector<T> ui = cov.factor.col(i);
      for (Index j = 0; j <= i; ++j) {
        Vector<T> sj = scaled_.col(j);
        T v = dot(ui, sj);
        if (i == j) v += T(1.0);
        cap(i, j) = v;
        cap(j, i) = v;
      }
    }
    lower_ = cholesky_lower(cap);
  }

  const Matrix<T>& lower() const { return lower_; }
  /// A^-1 U, reused by the solve.
  const Matrix<T>& scaled_factor() const { return scaled_; }
  Index rank() const { return lower_.rows(); }

  T log_determinant() const {
    using std::log;
    using ad::log;
    T s(0.0);
    for (Index i = 0; i < lower_.rows(); ++i) s += log(lower_(i, i));
    return T(2.0) * s;
  }

  Vector<T> solve(const Vector<T>& b) const {
    return backward_substitute(lower_, forward_substitute(lower_, b));
  }

 private:
  Matrix<T> scaled_;
  Matrix<T> lower_;
};

/// Sigma^-1 v = A^-1 v - A^-1 U C^-1 U^T A^-1 v.
template <typename T>
Vector<T> woodbury_solve(const StructuredCov<T>& cov, const CapacitanceFactor<T>& cap,
                         const Vector<T>& v) {
  if (v.size() != cov.dim()) throw ShapeError("woodbury_solve: vector length mismatch");
  Vector<T> w(v.size());
  for (Index i = 0; i < v.size(); ++i) w[i] = v[i] / cov.diag[i];
  if (cov.rank() == 0) return w;
  const Vector<T> proj = matvec_transposed(cov.factor, w);
  const Vector<T> inner = cap.solve(proj);
  const Vector<T> corr = matvec(cap.scaled_factor(), inner);
  for (Index i = 0; i < w.size(); ++i) w[i] -= corr[i];
  return w;
}

template <typename T>
Vector<T> woodbury_solve(const StructuredCov<T>& cov, const Vector<T>& v) {
  return woodbury_solve(cov, CapacitanceFactor<T>(cov), v);
}

/// log det Sigma = log det C + sum_i log A_i.
template <typename T>
T woodbury_logdet(const StructuredCov<T>& cov, const CapacitanceFactor<T>& cap) {
  using std::log;
  using ad::log;
  T s = cap.log_determinant();
  for (Index i = 0; i < cov.dim(); ++i) s += log(cov.diag[i]);
  return s;
}

template <typename T>
T woodbury_logdet(const StructuredCov<T>& cov) {
  return woodbury_logdet(cov, CapacitanceFactor<T>(cov));
}

/// theta = mean + sqrt(A) * z_diag + U z_lowrank.
template <typename T>
Vector<T> structured_sample(const Vector<T>& mean, const StructuredCov<T>& cov,
                            const Vector<double>& z_diag, const Vector<double>& z_lowrank) {
  using std::sqrt;
  using ad::sqrt;
  if (mean.size() != cov.dim() || z_diag.size() != cov.dim() || z_lowrank.size() != cov.rank()) {
    throw ShapeError("structured_sample: shape mismatch");
  }
  // The perturbation is formed before the mean is added, so negated noise
  // gives a bitwise-negated perturbation.
  Vector<T> delta(mean.size());
  for (Index i = 0; i < mean.size(); ++i) delta[i] = sqrt(cov.diag[i]) * T(z_diag[i]);
  if (cov.rank() > 0) {
    const Vector<T> low = matvec(cov.factor, z_lowrank);
    for (Index i = 0; i < mean.size(); ++i) delta[i] += low[i];
  }
  Vector<T> theta(mean.size());
  for (Index i = 0; i < mean.size(); ++i) theta[i] = mean[i] + delta[i];
  return theta;
}

/// Gaussian log-density with structured covariance, using the capacitance
/// factor for both the quadratic form and the log-determinant.
template <typename T>
T structured_logpdf(const Vector<T>& theta, const Vector<T>& mean, const StructuredCov<T>& cov,
                    const CapacitanceFactor<T>& cap) {
  if (theta.size() != cov.dim() || mean.size() != cov.dim()) {
    throw ShapeError("structured_logpdf: shape mismatch");
  }
  const Index p = cov.dim();
  Vector<T> r(p);
  Vector<T> w(p);
  for (Index i = 0; i < p; ++i) {
    r[i] = theta[i] - mean[i];
    w[i] = r[i] / cov.diag[i];
  }
  // r^T Sigma^-1 r = r^T A^-1 r - |L^-1 U^T A^-1 r|^2
  T quad = dot(r, w);
  if (cov.rank() > 0) {
    const Vector<T> half = forward_substitute(cap.lower(), matvec_transposed(cov.factor, w));
    quad -= dot(half, half);
  }
  const double log2pi = std::log(2.0 * std::numbers::pi);
  return T(-0.5 * static_cast<double>(p) * log2pi) - T(0.5) * woodbury_logdet(cov, cap) -
         T(0.5) * quad;
}

template <typename T>
T structured_logpdf(const Vector<T>& theta, const Vector<T>& mean, const StructuredCov<T>& cov) {
  return structured_logpdf(theta, mean, cov, CapacitanceFactor<T>(cov));
}

/// Dense Sigma; only for diagnostics and the oracle module (P small).
inline Matrix<double> dense_covariance(const StructuredCov<double>& cov) {
  Matrix<double> s = cov.factor * cov.factor.transpose();
  if (cov.rank() == 0) s = Matrix<double>::Zero(cov.dim(), cov.dim());
  s.diagonal() += cov.diag;
  return s;
}

}  // namespace varinf
