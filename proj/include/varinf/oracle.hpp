#pragma once

// Exact references for auditing fits: the conjugate linear-Gaussian posterior
// and evidence, Gaussian KL divergences, and the enumerated MC-dropout
// predictive mixture. Dense P x P algebra is fine here (P <= 32).

#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <variant>

#include <Eigen/Cholesky>

#include "varinf/families.hpp"
#include "varinf/metric.hpp"
#include "varinf/models.hpp"

namespace varinf {

struct GaussianDist {
  Vector<double> mean;
  Matrix<double> covariance;

  Index dim() const { return mean.size(); }

  Eigen::LLT<Matrix<double>> cholesky() const {
    if (covariance.rows() != mean.size() || covariance.cols() != mean.size()) {
      throw ShapeError("GaussianDist: covariance shape mismatch");
    }
    Eigen::LLT<Matrix<double>> llt(covariance);
    if (llt.info() != Eigen::Success) throw FactorizationError("GaussianDist: covariance not SPD");
    return llt;
  }

  double log_determinant() const {
    const auto llt = cholesky();
    return 2.0 * Matrix<double>(llt.matrixL()).diagonal().array().log().sum();
  }

  double log_density(const Vector<double>& x) const {
    const auto llt = cholesky();
    const Vector<double> y = llt.matrixL().solve(x - mean);
    const double logdet = 2.0 * Matrix<double>(llt.matrixL()).diagonal().array().log().sum();
    return -0.5 * (static_cast<double>(dim()) * std::log(2.0 * std::numbers::pi) + logdet +
                   y.squaredNorm());
  }

  Vector<double> sample(Rng& rng) const {
    const auto llt = cholesky();
    return mean + Matrix<double>(llt.matrixL()) * standard_normal(dim(), rng);
  }
};

inline double gaussian_prior_precision(const RegressionProblem& problem) {
  const auto* g = std::get_if<GaussianPrior>(&problem.prior);
  if (g == nullptr) throw ConfigError("conjugate oracle needs a Gaussian prior");
  return g->precision;
}

/// Sigma = (sigma^-2 Pi^T Pi + lambda I)^-1, mu = sigma^-2 Sigma Pi^T t.
inline GaussianDist exact_linear_posterior(const RegressionProblem& problem) {
  problem.validate();
  const double lambda = gaussian_prior_precision(problem);
  const double inv_s2 = 1.0 / (problem.noise * problem.noise);
  const Index p = problem.dim();
  Matrix<double> precision = inv_s2 * problem.design.transpose() * problem.design;
  precision.diagonal().array() += lambda;
  Eigen::LLT<Matrix<double>> llt(precision);
  if (llt.info() != Eigen::Success) {
    throw FactorizationError("exact_linear_posterior: posterior precision not SPD");
  }
  GaussianDist post;
  post.covariance = llt.solve(Matrix<double>::Identity(p, p));
  post.covariance = 0.5 * (post.covariance + post.covariance.transpose()).eval();
  post.mean = inv_s2 * post.covariance * problem.design.transpose() * problem.targets;
  return post;
}

/// log N(t; 0, sigma^2 I + Pi Pi^T / lambda).
inline double log_evidence(const RegressionProblem& problem) {
  problem.validate();
  const double lambda = gaussian_prior_precision(problem);
  const Index n = problem.size();
  Matrix<double> cov = problem.design * problem.design.transpose() / lambda;
  cov.diagonal().array() += problem.noise * problem.noise;
  const GaussianDist marginal{Vector<double>::Zero(n), cov};
  return marginal.log_density(problem.targets);
}

inline double kl_gaussian_gaussian(const GaussianDist& p, const GaussianDist& q) {
  if (p.dim() != q.dim()) throw ShapeError("kl_gaussian_gaussian: dimension mismatch");
  const auto lq = q.cholesky();
  const auto lp = p.cholesky();
  const Matrix<double> lq_mat = lq.matrixL();
  const Matrix<double> lp_mat = lp.matrixL();
  // tr(Sq^-1 Sp) = |Lq^-1 Lp|_F^2
  const Matrix<double> a = lq.matrixL().solve(lp_mat);
  const Vector<double> d = lq.matrixL().solve(q.mean - p.mean);
  const double logdet_q = 2.0 * lq_mat.diagonal().array().log().sum();
  const double logdet_p = 2.0 * lp_mat.diagonal().array().log().sum();
  return 0.5 * (a.squaredNorm() + d.squaredNorm() - static_cast<double>(p.dim()) + logdet_q -
                logdet_p);
}

/// Dense N(mu, diag(A) + U U^T) of a mean-field or structured normal state.
inline GaussianDist to_gaussian(const FamilyState& family) {
  if (!family.is_gaussian()) throw ModeError("to_gaussian: family is not a single Gaussian");
  const GaussianParams<double> g = gaussian_params(family, family.psi);
  return GaussianDist{g.mean, dense_covariance(g.covariance())};
}

/// Closed-form ELBO of a Gaussian q on a conjugate regression problem:
/// E_q[log p(t|theta)] + E_q[log p(theta)] + H(q).
inline double exact_gaussian_elbo(const RegressionProblem& problem, const GaussianDist& q) {
  problem.validate();
  const double lambda = gaussian_prior_precision(problem);
  const auto n = static_cast<double>(problem.size());
  const auto p = static_cast<double>(q.dim());
  const double s2 = problem.noise * problem.noise;
  const Vector<double> resid = problem.targets - problem.design * q.mean;
  const double trace_fit = (problem.design * q.covariance * problem.design.transpose()).trace();
  const double loglik = -0.5 * n * std::log(2.0 * std::numbers::pi * s2) -
                        (resid.squaredNorm() + trace_fit) / (2.0 * s2);
  const double logprior = -0.5 * p * std::log(2.0 * std::numbers::pi / lambda) -
                          0.5 * lambda * (q.mean.squaredNorm() + q.covariance.trace());
  const double entropy =
      0.5 * (p * std::log(2.0 * std::numbers::pi * std::numbers::e) + q.log_determinant());
  return loglik + logprior + entropy;
}

struct KlReport {
  Metric value;                       // closed form when available, else MC
  std::optional<double> closed_form;  // Gaussian families only
  double mc_estimate = std::numeric_limits<double>::quiet_NaN();
  double std_error = std::numeric_limits<double>::quiet_NaN();
  Index n_mc = 0;
};

namespace detail {

template <typename Draw, typename LogRatio>
void fill_mc(KlReport& r, Index n, Draw&& draw, LogRatio&& log_ratio) {
  if (n <= 0) return;
  double mean = 0.0;
  double m2 = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double v = log_ratio(draw());
    const double delta = v - mean;
    mean += delta / static_cast<double>(i + 1);
    m2 += delta * (v - mean);
  }
  r.n_mc = n;
  r.mc_estimate = mean;
  r.std_error = n > 1 ? std::sqrt(m2 / static_cast<double>(n - 1) / static_cast<double>(n)) : 0.0;
}

}  // namespace detail

/// KL[p || q] in the direction reported for fit quality. Atomic families give
/// +inf (a continuous p against point masses).
inline KlReport kl_p_to_family(const GaussianDist& p, const FamilyState& family, Index n_mc,
                               Rng& rng) {
  if (p.dim() != family.dim) throw ShapeError("kl_p_to_family: dimension mismatch");
  KlReport r;
  if (family.is_atomic()) {
    r.value = Metric::pos_inf();
    return r;
  }
  const auto lp = p.cholesky();
  const Matrix<double> lp_mat = lp.matrixL();
  detail::fill_mc(
      r, n_mc, [&] { return Vector<double>(p.mean + lp_mat * standard_normal(p.dim(), rng)); },
      [&](const Vector<double>& x) { return p.log_density(x) - log_density(family, x); });
  if (family.is_gaussian()) {
    r.closed_form = kl_gaussian_gaussian(p, to_gaussian(family));
    r.value = Metric::finite(*r.closed_form);
  } else {
    r.value = Metric::from_double(r.mc_estimate);
  }
  return r;
}

/// KL[q || target] (the direction ELBO training minimizes), by Monte Carlo
/// over q. `log_target` must be a normalized log-density.
template <typename LogTarget>
KlReport kl_family_to_target_mc(const FamilyState& family, LogTarget&& log_target, Index n_mc,
                                Rng& rng) {
  KlReport r;
  if (family.is_atomic()) {
    r.value = Metric::pos_inf();
    return r;
  }
  detail::fill_mc(
      r, n_mc,
      [&] {
        const auto noise = draw_noise(family, SamplingMode::kNaive, 1, rng);
        return reparametrize(family, family.psi, noise.front());
      },
      [&](const Vector<double>& x) { return log_density(family, x) - log_target(x); });
  r.value = Metric::from_double(r.mc_estimate);
  return r;
}

inline KlReport kl_family_to_p(const FamilyState& family, const GaussianDist& p, Index n_mc,
                               Rng& rng) {
  if (p.dim() != family.dim) throw ShapeError("kl_family_to_p: dimension mismatch");
  KlReport r = kl_family_to_target_mc(
      family, [&](const Vector<double>& x) { return p.log_density(x); }, n_mc, rng);
  if (family.is_gaussian()) {
    r.closed_form = kl_gaussian_gaussian(to_gaussian(family), p);
    r.value = Metric::finite(*r.closed_form);
  }
  return r;
}

/// Predictive density sum_z q(z) N(y; mean_z, sigma^2) of MC dropout.
struct PredictiveMixture {
  Vector<double> means;
  Vector<double> weights;
  double noise = 1.0;

  Index size() const { return means.size(); }
  double total_weight() const { return weights.sum(); }
  double mean() const { return weights.dot(means); }

  double variance() const {
    const double m = mean();
    return noise * noise + weights.dot((means.array() - m).square().matrix());
  }

  double density(double y) const {
    double d = 0.0;
    const double c = 1.0 / (noise * std::sqrt(2.0 * std::numbers::pi));
    for (Index i = 0; i < size(); ++i) {
      const double z = (y - means[i]) / noise;
      d += weights[i] * c * std::exp(-0.5 * z * z);
    }
    return d;
  }
};

/// Feature row Pi(x*) of an RBF problem.
inline Vector<double> rbf_features(const RegressionProblem& problem, double x_star) {
  if (!problem.basis) throw ConfigError("problem has no RBF basis");
  Vector<double> xs(1);
  xs[0] = x_star;
  return rbf_design_matrix(xs, *problem.basis).row(0).transpose();
}

/// Exact enumeration of the MC-dropout predictive at x*. Zero-weight states
/// are dropped, so p = 1 and p = 0 give a single atom.
inline PredictiveMixture dropout_predictive_exact(const FamilyState& state,
                                                  const RegressionProblem& problem, double x_star) {
  const DropoutMixture mix = enumerate_dropout(state);
  const Vector<double> phi = rbf_features(problem, x_star);
  if (phi.size() != state.dim) throw ShapeError("dropout_predictive_exact: dimension mismatch");
  std::vector<double> means;
  std::vector<double> weights;
  for (std::size_t s = 0; s < mix.size(); ++s) {
    if (mix.weights[s] == 0.0) continue;
    means.push_back(phi.dot(mix.atom(s)));
    weights.push_back(mix.weights[s]);
  }
  PredictiveMixture out;
  out.means = Eigen::Map<Vector<double>>(means.data(), static_cast<Index>(means.size()));
  out.weights = Eigen::Map<Vector<double>>(weights.data(), static_cast<Index>(weights.size()));
  out.noise = problem.noise;
  return out;
}

/// log q(theta*); -inf for atomic families off their atoms.
inline Metric log_density_of_truth(const FamilyState& family, const Vector<double>& theta_star) {
  if (theta_star.size() != family.dim) throw ShapeError("log_density_of_truth: dimension mismatch");
  return Metric::from_double(log_density(family, theta_star));
}

}  // namespace varinf
