#pragma once

// Regression models, priors and synthetic data, plus the log-joint "targets"
// the trainer consumes. A target exposes
//
//   dim(), data_size(),
//   log_likelihood(theta, minibatch), log_prior(theta)
//
// templated on the scalar type, so the same target is evaluated in double
// for diagnostics and on the tape for training.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <numbers>
#include <optional>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Cholesky>

#include "varinf/autodiff.hpp"
#include "varinf/families.hpp"
#include "varinf/random.hpp"

namespace varinf {

/// Squared-exponential radial basis functions with regularly spaced centers.
struct RbfModelSpec {
  std::vector<double> centers;
  double bandwidth = 1.0;
  double noise = 0.25;
  double lower = -1.0;
  double upper = 1.0;

  /// K centers spread over [lower, upper]; bandwidth equals the spacing.
  static RbfModelSpec regular(Index k, double noise = 0.25, double lower = -1.0,
                              double upper = 1.0) {
    if (k < 1) throw ConfigError("RbfModelSpec: need at least one center");
    RbfModelSpec spec;
    spec.noise = noise;
    spec.lower = lower;
    spec.upper = upper;
    if (k == 1) {
      spec.centers = {0.5 * (lower + upper)};
      spec.bandwidth = upper - lower;
      return spec;
    }
    const double spacing = (upper - lower) / static_cast<double>(k - 1);
    for (Index i = 0; i < k; ++i) spec.centers.push_back(lower + spacing * static_cast<double>(i));
    spec.bandwidth = spacing;
    return spec;
  }

  Index size() const { return static_cast<Index>(centers.size()); }

  double kernel(double x, Index k) const {
    const double d = x - centers[static_cast<std::size_t>(k)];
    return std::exp(-d * d / (2.0 * bandwidth * bandwidth));
  }

  void validate() const {
    if (centers.empty()) throw ConfigError("RbfModelSpec: need at least one center");
    if (!(bandwidth > 0)) throw ConfigError("RbfModelSpec: bandwidth must be positive");
    if (!(noise >= 0)) throw ConfigError("RbfModelSpec: noise must be non-negative");
    for (std::size_t i = 1; i < centers.size(); ++i) {
      if (!(centers[i] > centers[i - 1])) throw ConfigError("RbfModelSpec: centers must increase");
    }
  }
};

inline Matrix<double> rbf_design_matrix(const Vector<double>& xs, const RbfModelSpec& spec) {
  spec.validate();
  Matrix<double> m(xs.size(), spec.size());
  for (Index n = 0; n < xs.size(); ++n) {
    for (Index k = 0; k < spec.size(); ++k) m(n, k) = spec.kernel(xs[n], k);
  }
  return m;
}

struct GaussianPrior {
  double precision = 1.0;  // lambda
};

struct StudentTPrior {
  double dof = 1.0;  // nu
  double scale = 1.0;
};

using PriorSpec = std::variant<GaussianPrior, StudentTPrior>;

/// Independent per-coordinate prior log-density.
template <typename T>
T prior_logpdf(const PriorSpec& spec, const Vector<T>& theta) {
  using std::log;
  using ad::log;
  const auto p = static_cast<double>(theta.size());
  if (const auto* g = std::get_if<GaussianPrior>(&spec)) {
    const double lambda = g->precision;
    const double norm = -0.5 * p * std::log(2.0 * std::numbers::pi / lambda);
    return T(norm) - T(0.5 * lambda) * dot(theta, theta);
  }
  const auto& t = std::get<StudentTPrior>(spec);
  const double nu = t.dof;
  const double s = t.scale;
  const double norm = std::lgamma(0.5 * (nu + 1.0)) - std::lgamma(0.5 * nu) -
                      0.5 * std::log(nu * std::numbers::pi) - std::log(s);
  T acc(p * norm);
  const double c = 1.0 / (nu * s * s);
  for (Index i = 0; i < theta.size(); ++i) {
    acc -= T(0.5 * (nu + 1.0)) * log(T(1.0) + T(c) * theta[i] * theta[i]);
  }
  return acc;
}

struct RegressionProblem {
  Vector<double> inputs;  // x_n; informational for RBF problems
  Matrix<double> design;  // Pi, N x P
  Vector<double> targets;
  double noise = 1.0;  // sigma, known
  PriorSpec prior = GaussianPrior{};
  std::optional<RbfModelSpec> basis;

  Index size() const { return design.rows(); }
  Index dim() const { return design.cols(); }

  void validate() const {
    if (size() < 1) throw ShapeError("RegressionProblem: needs at least one observation");
    if (targets.size() != size()) throw ShapeError("RegressionProblem: targets length mismatch");
    if (!(noise > 0)) throw ConfigError("RegressionProblem: noise scale must be positive");
  }
};

template <typename T>
T gaussian_loglik(const RegressionProblem& problem, const Vector<T>& theta) {
  if (theta.size() != problem.dim()) throw ShapeError("gaussian_loglik: theta has wrong length");
  const Vector<T> pred = matvec(problem.design, theta);
  Vector<T> resid(pred.size());
  for (Index n = 0; n < pred.size(); ++n) resid[n] = T(problem.targets[n]) - pred[n];
  const double s2 = problem.noise * problem.noise;
  const double norm = -0.5 * static_cast<double>(problem.size()) * std::log(2.0 * std::numbers::pi * s2);
  return T(norm) - dot(resid, resid) / T(2.0 * s2);
}

/// (N/|B|) * sum over the batch of per-point log-likelihoods.
template <typename T>
T minibatch_loglik(const RegressionProblem& problem, const Vector<T>& theta,
                   std::span<const Index> batch) {
  if (batch.empty()) throw ConfigError("minibatch_loglik: empty batch");
  if (theta.size() != problem.dim()) throw ShapeError("minibatch_loglik: theta has wrong length");
  const auto b = static_cast<Index>(batch.size());
  Matrix<double> rows(b, problem.dim());
  Vector<double> t(b);
  for (Index j = 0; j < b; ++j) {
    const Index n = batch[static_cast<std::size_t>(j)];
    if (n < 0 || n >= problem.size()) throw ShapeError("minibatch_loglik: index out of range");
    rows.row(j) = problem.design.row(n);
    t[j] = problem.targets[n];
  }
  const Vector<T> pred = matvec(rows, theta);
  Vector<T> resid(b);
  for (Index j = 0; j < b; ++j) resid[j] = T(t[j]) - pred[j];
  const double s2 = problem.noise * problem.noise;
  const double scale = static_cast<double>(problem.size()) / static_cast<double>(b);
  const double norm = -0.5 * static_cast<double>(b) * std::log(2.0 * std::numbers::pi * s2);
  return T(scale) * (T(norm) - dot(resid, resid) / T(2.0 * s2));
}

struct SyntheticTruth {
  Vector<double> theta;  // theta*
  Vector<double> clean;  // y = Pi theta*
  Vector<double> noise;  // epsilon = t - y
};

/// Equispaced inputs on the basis interval, theta* ~ N(0, I), t = y + eps.
inline std::pair<RegressionProblem, SyntheticTruth> make_rbf_dataset(const RbfModelSpec& spec,
                                                                     Index n,
                                                                     std::uint64_t seed) {
  if (n < 1) throw ConfigError("make_rbf_dataset: N must be at least 1");
  spec.validate();
  Rng rng(seed);
  SyntheticTruth truth;
  truth.theta = standard_normal(spec.size(), rng);

  RegressionProblem problem;
  problem.inputs = Vector<double>(n);
  for (Index i = 0; i < n; ++i) {
    problem.inputs[i] = n == 1 ? 0.5 * (spec.lower + spec.upper)
                               : spec.lower + (spec.upper - spec.lower) * static_cast<double>(i) /
                                                  static_cast<double>(n - 1);
  }
  problem.design = rbf_design_matrix(problem.inputs, spec);
  truth.clean = problem.design * truth.theta;
  truth.noise = spec.noise * standard_normal(n, rng);
  problem.targets = truth.clean + truth.noise;
  problem.noise = spec.noise;
  problem.prior = GaussianPrior{1.0};
  problem.basis = spec;
  return {std::move(problem), std::move(truth)};
}

/// Indices of the observations used for one stochastic step; empty = all.
struct Minibatch {
  std::vector<Index> indices;
  bool full() const { return indices.empty(); }
};

template <typename Target>
concept LogJointTarget = requires(const Target& t, const Vector<double>& x, const Vector<Var>& v,
                                  const Minibatch& b) {
  { t.dim() } -> std::convertible_to<Index>;
  { t.data_size() } -> std::convertible_to<Index>;
  { t.log_likelihood(x, b) } -> std::convertible_to<double>;
  { t.log_likelihood(v, b) } -> std::same_as<Var>;
  { t.log_prior(x) } -> std::convertible_to<double>;
  { t.log_prior(v) } -> std::same_as<Var>;
};

class RegressionTarget {
 public:
  explicit RegressionTarget(const RegressionProblem& problem) : problem_(&problem) {
    problem.validate();
  }

  Index dim() const { return problem_->dim(); }
  Index data_size() const { return problem_->size(); }
  const RegressionProblem& problem() const { return *problem_; }
  ModelShape shape() const { return ModelShape::single(dim(), dim()); }

  template <typename T>
  T log_likelihood(const Vector<T>& theta, const Minibatch& batch) const {
    if (batch.full()) return gaussian_loglik(*problem_, theta);
    return minibatch_loglik(*problem_, theta, std::span<const Index>(batch.indices));
  }

  template <typename T>
  T log_prior(const Vector<T>& theta) const {
    return prior_logpdf(problem_->prior, theta);
  }

 private:
  const RegressionProblem* problem_;
};

/// A normalized Gaussian log-density used directly as the log-joint.
class GaussianTarget {
 public:
  GaussianTarget(Vector<double> mean, Matrix<double> covariance)
      : mean_(std::move(mean)), covariance_(std::move(covariance)) {
    if (covariance_.rows() != mean_.size() || covariance_.cols() != mean_.size()) {
      throw ShapeError("GaussianTarget: covariance shape mismatch");
    }
    Eigen::LLT<Matrix<double>> llt(covariance_);
    if (llt.info() != Eigen::Success) throw FactorizationError("GaussianTarget: covariance not SPD");
    precision_ = llt.solve(Matrix<double>::Identity(mean_.size(), mean_.size()));
    logdet_ = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  }

  Index dim() const { return mean_.size(); }
  Index data_size() const { return 0; }
  const Vector<double>& mean() const { return mean_; }
  const Matrix<double>& covariance() const { return covariance_; }
  ModelShape shape() const { return ModelShape::single(dim(), dim()); }

  template <typename T>
  T log_density(const Vector<T>& theta) const {
    Vector<T> r(theta.size());
    for (Index i = 0; i < theta.size(); ++i) r[i] = theta[i] - T(mean_[i]);
    const Vector<T> pr = matvec(precision_, r);
    const double c = -0.5 * (static_cast<double>(dim()) * std::log(2.0 * std::numbers::pi) + logdet_);
    return T(c) - T(0.5) * dot(r, pr);
  }

  template <typename T>
  T log_likelihood(const Vector<T>& theta, const Minibatch&) const {
    return log_density(theta);
  }

  template <typename T>
  T log_prior(const Vector<T>&) const {
    return T(0.0);
  }

 private:
  Vector<double> mean_;
  Matrix<double> covariance_;
  Matrix<double> precision_;
  double logdet_ = 0.0;
};

/// Finite mixture of Gaussians used as a multimodal log-joint.
class GaussianMixtureTarget {
 public:
  GaussianMixtureTarget(std::vector<double> weights, std::vector<GaussianTarget> components)
      : components_(std::move(components)) {
    if (weights.size() != components_.size() || components_.empty()) {
      throw ShapeError("GaussianMixtureTarget: weights/components mismatch");
    }
    double total = 0.0;
    for (double w : weights) total += w;
    for (double w : weights) log_weights_.push_back(std::log(w / total));
  }

  Index dim() const { return components_.front().dim(); }
  Index data_size() const { return 0; }
  ModelShape shape() const { return ModelShape::single(dim(), dim()); }
  const std::vector<GaussianTarget>& components() const { return components_; }
  double weight(std::size_t m) const { return std::exp(log_weights_[m]); }

  template <typename T>
  T log_density(const Vector<T>& theta) const {
    Vector<T> terms(static_cast<Index>(components_.size()));
    for (std::size_t m = 0; m < components_.size(); ++m) {
      terms[static_cast<Index>(m)] = T(log_weights_[m]) + components_[m].log_density(theta);
    }
    return log_sum_exp(terms);
  }

  template <typename T>
  T log_likelihood(const Vector<T>& theta, const Minibatch&) const {
    return log_density(theta);
  }

  template <typename T>
  T log_prior(const Vector<T>&) const {
    return T(0.0);
  }

  Vector<double> sample(Rng& rng) const {
    std::vector<double> w;
    for (double lw : log_weights_) w.push_back(std::exp(lw));
    const auto m = std::discrete_distribution<std::size_t>(w.begin(), w.end())(rng);
    const auto& c = components_[m];
    Eigen::LLT<Matrix<double>> llt(c.covariance());
    return c.mean() + llt.matrixL() * standard_normal(dim(), rng);
  }

 private:
  std::vector<GaussianTarget> components_;
  std::vector<double> log_weights_;
};

/// One-hidden-layer tanh network y = w2 . tanh(w1 x + b1) + b2 with Gaussian
/// noise. Parameter layout: w1 (H), b1 (H), w2 (H), b2 (1).
class MlpRegressionTarget {
 public:
  MlpRegressionTarget(Vector<double> inputs, Vector<double> targets, Index hidden, double noise,
                      PriorSpec prior = GaussianPrior{})
      : inputs_(std::move(inputs)),
        targets_(std::move(targets)),
        hidden_(hidden),
        noise_(noise),
        prior_(prior) {
    if (inputs_.size() != targets_.size() || inputs_.size() < 1) {
      throw ShapeError("MlpRegressionTarget: inputs/targets mismatch");
    }
    if (hidden_ < 1 || !(noise_ > 0)) throw ConfigError("MlpRegressionTarget: bad configuration");
  }

  Index dim() const { return 3 * hidden_ + 1; }
  Index data_size() const { return inputs_.size(); }

  ModelShape shape() const {
    return ModelShape{{ParameterBlock{hidden_, 1, hidden_, false},
                       ParameterBlock{hidden_, 1, hidden_, true},
                       ParameterBlock{hidden_, hidden_, 1, false},
                       ParameterBlock{1, hidden_, 1, true}}};
  }

  template <typename T>
  T predict(const Vector<T>& theta, double x) const {
    using std::tanh;
    using ad::tanh;
    Vector<T> act(hidden_);
    for (Index h = 0; h < hidden_; ++h) act[h] = tanh(theta[h] * T(x) + theta[hidden_ + h]);
    const Vector<T> w2 = theta.segment(2 * hidden_, hidden_);
    return dot(w2, act) + theta[3 * hidden_];
  }

  template <typename T>
  T log_likelihood(const Vector<T>& theta, const Minibatch& batch) const {
    std::vector<Index> all;
    const std::vector<Index>* idx = &batch.indices;
    if (batch.full()) {
      for (Index n = 0; n < inputs_.size(); ++n) all.push_back(n);
      idx = &all;
    }
    Vector<T> resid(static_cast<Index>(idx->size()));
    for (std::size_t j = 0; j < idx->size(); ++j) {
      const Index n = (*idx)[j];
      resid[static_cast<Index>(j)] = T(targets_[n]) - predict(theta, inputs_[n]);
    }
    const double s2 = noise_ * noise_;
    const auto b = static_cast<double>(idx->size());
    const double scale = static_cast<double>(inputs_.size()) / b;
    return T(scale) * (T(-0.5 * b * std::log(2.0 * std::numbers::pi * s2)) -
                       dot(resid, resid) / T(2.0 * s2));
  }

  template <typename T>
  T log_prior(const Vector<T>& theta) const {
    return prior_logpdf(prior_, theta);
  }

 private:
  Vector<double> inputs_;
  Vector<double> targets_;
  Index hidden_;
  double noise_;
  PriorSpec prior_;
};

}  // namespace varinf
