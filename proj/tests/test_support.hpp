#pragma once

// Dense reference computations and fixture builders shared by the tests.
// Nothing here goes through the Woodbury/capacitance code paths.

#include <cmath>
#include <numbers>

#include <Eigen/Cholesky>

#include "varinf/families.hpp"
#include "varinf/models.hpp"
#include "varinf/random.hpp"
#include "varinf/structured_cov.hpp"

namespace vtest {

using varinf::Index;
using varinf::Matrix;
using varinf::Rng;
using varinf::Vector;

inline varinf::StructuredCov<double> random_cov(Index p, Index k, Rng& rng) {
  varinf::StructuredCov<double> c;
  c.diag = Vector<double>(p);
  for (Index i = 0; i < p; ++i) c.diag[i] = std::exp(varinf::uniform(-1.5, 1.5, rng));
  c.factor = varinf::standard_normal(p, k, rng);
  return c;
}

inline Matrix<double> dense(const varinf::StructuredCov<double>& c) {
  Matrix<double> s = c.factor * c.factor.transpose();
  s.diagonal() += c.diag;
  return s;
}

inline double dense_logdet(const Matrix<double>& s) {
  Eigen::LDLT<Matrix<double>> ldlt(s);
  return ldlt.vectorD().array().log().sum();
}

inline Vector<double> dense_solve(const Matrix<double>& s, const Vector<double>& v) {
  return Eigen::LDLT<Matrix<double>>(s).solve(v);
}

inline double dense_logpdf(const Vector<double>& x, const Vector<double>& mean,
                           const Matrix<double>& s) {
  const Vector<double> r = x - mean;
  return -0.5 * (static_cast<double>(x.size()) * std::log(2.0 * std::numbers::pi) +
                 dense_logdet(s) + r.dot(dense_solve(s, r)));
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max(1.0, std::abs(b));
}

inline double rel_err(const Vector<double>& a, const Vector<double>& b) {
  return (a - b).norm() / std::max(1.0, b.norm());
}

/// Linear-Gaussian problem with a random N x P design.
inline varinf::RegressionProblem linear_problem(Index p, Index n, double noise, std::uint64_t seed,
                                                double prior_precision = 1.0) {
  Rng rng(seed);
  varinf::RegressionProblem prob;
  prob.design = varinf::standard_normal(n, p, rng);
  const Vector<double> theta = varinf::standard_normal(p, rng);
  prob.targets = prob.design * theta + noise * varinf::standard_normal(n, rng);
  prob.inputs = Vector<double>::LinSpaced(n, 0.0, 1.0);
  prob.noise = noise;
  prob.prior = varinf::GaussianPrior{prior_precision};
  return prob;
}

/// Sets a structured-normal state (rank P) to N(mean, cov) with a tiny
/// diagonal and U = chol(cov - diag).
inline varinf::FamilyState full_rank_state(const Vector<double>& mean, const Matrix<double>& cov,
                                           double diag = 1e-6) {
  const Index p = mean.size();
  varinf::FamilyState s;
  s.tag = varinf::FamilyTag::kStructuredNormal;
  s.dim = p;
  s.rank = p;
  s.psi = Vector<double>(s.expected_psi_size());
  s.psi.head(p) = mean;
  s.psi.segment(p, p).setConstant(std::log(diag));
  Matrix<double> rest = cov;
  rest.diagonal().array() -= diag;
  const Matrix<double> l = Eigen::LLT<Matrix<double>>(rest).matrixL();
  for (Index c = 0; c < p; ++c) s.psi.segment(2 * p + c * p, p) = l.col(c);
  return s;
}

/// Random psi of the right length for `state`, away from any special point.
inline Vector<double> generic_psi(const varinf::FamilyState& state, Rng& rng) {
  return (0.3 * varinf::standard_normal(state.expected_psi_size(), rng).array() - 0.5).matrix();
}

}  // namespace vtest
