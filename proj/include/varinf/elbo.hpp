#pragma once

// Monte Carlo ELBO with the sampled log-density estimator
//
//   L ~= 1/S sum_k [ log p(T | theta_k) + log p(theta_k) - log q_psi(theta_k) ],
//   theta_k = f(z_k, psi),
//
// differentiated end-to-end in psi (through both the sample and the density
// parameters), and an Adam-style ascent loop around it.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "varinf/autodiff.hpp"
#include "varinf/families.hpp"
#include "varinf/models.hpp"
#include "varinf/random.hpp"

namespace varinf {

struct ElboEstimate {
  double total = 0.0;
  double expected_loglik = 0.0;
  double expected_logprior = 0.0;
  double negative_mean_logq = 0.0;
  Index n_samples = 0;
  SamplingMode mode = SamplingMode::kNaive;
};

template <typename T>
struct ElboTerms {
  T loglik;
  T logprior;
  T neg_logq;
  T total() const { return loglik + logprior + neg_logq; }
};

/// Exponential interpolation from `initial` to `final` over the run.
struct LearningRate {
  double initial = 1e-2;
  double final = 1e-2;

  double at(Index step, Index steps) const {
    if (initial == 0.0 || steps <= 1 || final == initial) return initial;
    const double frac = static_cast<double>(step) / static_cast<double>(steps - 1);
    return initial * std::pow(final / initial, frac);
  }
};

struct TrainConfig {
  Index steps = 2000;
  LearningRate learning_rate;
  Index mc_samples = 8;
  Index minibatch_size = 0;  // 0 = full batch
  SamplingMode mode = SamplingMode::kNaive;
  std::uint64_t seed = 0;
  Index convergence_window = 0;  // 0 disables early stopping
  double convergence_tolerance = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double max_grad_norm = 1e6;

  void validate(const FamilyState& family) const {
    if (steps < 0) throw ConfigError("TrainConfig: steps must be non-negative");
    if (mc_samples < 1) throw ConfigError("TrainConfig: mc_samples must be positive");
    if (minibatch_size < 0) throw ConfigError("TrainConfig: minibatch_size must be non-negative");
    if (!(learning_rate.initial >= 0) || !(learning_rate.final >= 0)) {
      throw ConfigError("TrainConfig: learning rates must be non-negative");
    }
    if (learning_rate.initial == 0.0 && learning_rate.final != 0.0) {
      throw ConfigError("TrainConfig: cannot decay from a zero learning rate");
    }
    if (convergence_window < 0 || !(convergence_tolerance >= 0)) {
      throw ConfigError("TrainConfig: convergence window/tolerance must be non-negative");
    }
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1) || !(epsilon > 0)) {
      throw ConfigError("TrainConfig: invalid moment decay parameters");
    }
    check_mode(family, mode, mc_samples);
  }
};

struct TrainTrace {
  std::vector<double> elbo;
  std::vector<double> grad_norm;
  double wall_seconds = 0.0;
  bool converged = false;
  FamilyState final_state;

  Index steps() const { return static_cast<Index>(elbo.size()); }
};

/// Uniform minibatch without replacement; full batch when size is 0 or >= N.
inline Minibatch draw_minibatch(Index data_size, Index batch_size, Rng& rng) {
  Minibatch b;
  if (batch_size <= 0 || batch_size >= data_size) return b;
  std::vector<Index> all(static_cast<std::size_t>(data_size));
  std::iota(all.begin(), all.end(), Index{0});
  for (Index i = 0; i < batch_size; ++i) {
    std::uniform_int_distribution<Index> pick(i, data_size - 1);
    std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(pick(rng))]);
  }
  b.indices.assign(all.begin(), all.begin() + batch_size);
  return b;
}

/// ELBO terms averaged over recorded noise draws. Atomic families drop the
/// -log q term (their differential entropy is a constant -inf).
template <typename T, LogJointTarget Target>
ElboTerms<T> elbo_terms(const FamilyState& family, const Vector<T>& psi, const Target& target,
                        std::span<const NoiseDraw> noise, const Minibatch& batch) {
  if (family.dim != target.dim()) throw ShapeError("elbo: family and target dimensions differ");
  if (noise.empty()) throw ConfigError("elbo: no noise draws");
  const auto n = static_cast<Index>(noise.size());
  Vector<T> ll(n);
  Vector<T> lp(n);
  Vector<T> lq(n);
  auto guarded = [](const char* term, auto&& fn) {
    try {
      return fn();
    } catch (const NonFiniteError& e) {
      throw NonFiniteError(std::string(term) + "/" + e.primitive());
    }
  };
  for (Index k = 0; k < n; ++k) {
    const NoiseDraw& z = noise[static_cast<std::size_t>(k)];
    const Vector<T> theta = guarded("sample", [&] { return reparametrize(family, psi, z); });
    ll[k] = guarded("loglik", [&] { return T(target.log_likelihood(theta, batch)); });
    lp[k] = guarded("logprior", [&] { return T(target.log_prior(theta)); });
    lq[k] = family.is_atomic() ? T(0.0)
                               : guarded("logq", [&] { return log_density(family, psi, theta); });
  }
  const T inv_n(1.0 / static_cast<double>(n));
  return ElboTerms<T>{sum(ll) * inv_n, sum(lp) * inv_n, -(sum(lq) * inv_n)};
}

/// Objective closure over fixed noise and minibatch, callable with any
/// scalar vector (double, long double, Var).
template <LogJointTarget Target>
auto elbo_objective(const FamilyState& family, const Target& target,
                    const std::vector<NoiseDraw>& noise, const Minibatch& batch) {
  return [&family, &target, &noise, &batch](const auto& psi) {
    using S = typename std::decay_t<decltype(psi)>::Scalar;
    return elbo_terms<S>(family, psi, target, std::span<const NoiseDraw>(noise), batch).total();
  };
}

template <LogJointTarget Target>
ElboEstimate elbo_estimate(const FamilyState& family, const Target& target,
                           const TrainConfig& config, Rng& rng) {
  config.validate(family);
  const Minibatch batch = draw_minibatch(target.data_size(), config.minibatch_size, rng);
  const auto noise = draw_noise(family, config.mode, config.mc_samples, rng);
  const auto t = elbo_terms<double>(family, family.psi, target, noise, batch);
  return ElboEstimate{t.total(), t.loglik, t.logprior, t.neg_logq,
                      static_cast<Index>(noise.size()), config.mode};
}

/// Stochastic ascent with bias-corrected first/second moment estimates.
/// Deterministic given config.seed.
template <LogJointTarget Target>
TrainTrace train(const FamilyState& initial, const Target& target, const TrainConfig& config) {
  initial.validate();
  config.validate(initial);
  const auto start = std::chrono::steady_clock::now();
  Rng rng(config.seed);
  TrainTrace trace;
  trace.final_state = initial;
  FamilyState& state = trace.final_state;
  const Index q = state.psi.size();
  Vector<double> m1 = Vector<double>::Zero(q);
  Vector<double> m2 = Vector<double>::Zero(q);
  std::vector<double> prefix{0.0};
  const Index window = config.convergence_window;

  for (Index step = 0; step < config.steps; ++step) {
    const Minibatch batch = draw_minibatch(target.data_size(), config.minibatch_size, rng);
    const auto noise = draw_noise(state, config.mode, config.mc_samples, rng);
    GradientReport g;
    try {
      g = evaluate_with_gradient(elbo_objective(state, target, noise, batch), state.psi);
    } catch (const NonFiniteError& e) {
      throw TrainingError("non-finite ELBO (" + e.primitive() + ")", static_cast<long>(step));
    }
    const double norm = g.gradient.norm();
    if (norm > config.max_grad_norm) {
      throw TrainingError("gradient norm " + std::to_string(norm) + " exceeds divergence guard",
                          static_cast<long>(step));
    }
    trace.elbo.push_back(g.value);
    trace.grad_norm.push_back(norm);
    prefix.push_back(prefix.back() + g.value);

    const double lr = config.learning_rate.at(step, config.steps);
    const auto t = static_cast<double>(step + 1);
    m1 = config.beta1 * m1 + (1.0 - config.beta1) * g.gradient;
    m2 = config.beta2 * m2 + (1.0 - config.beta2) * g.gradient.cwiseAbs2();
    const double c1 = 1.0 - std::pow(config.beta1, t);
    const double c2 = 1.0 - std::pow(config.beta2, t);
    if (lr != 0.0) {
      state.psi.array() +=
          lr * (m1.array() / c1) / ((m2.array() / c2).sqrt() + config.epsilon);
    }

    if (window > 0 && step + 1 >= 2 * window) {
      const std::size_t e = prefix.size() - 1;
      const auto w = static_cast<std::size_t>(window);
      const double recent = (prefix[e] - prefix[e - w]) / static_cast<double>(window);
      const double before = (prefix[e - w] - prefix[e - 2 * w]) / static_cast<double>(window);
      if (recent - before < config.convergence_tolerance) {
        trace.converged = true;
        break;
      }
    }
  }
  trace.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return trace;
}

struct GradientStats {
  Vector<double> mean;
  Vector<double> variance;  // unbiased, per coordinate
  Index repeats = 0;
};

/// Empirical per-coordinate mean and variance of the ELBO gradient estimator
/// at fixed psi and a fixed minibatch.
template <LogJointTarget Target>
GradientStats gradient_variance_probe(const FamilyState& family, const Target& target,
                                      SamplingMode mode, Index repeats, Index mc_samples,
                                      const Minibatch& batch, Rng& rng) {
  if (repeats < 100) throw ConfigError("gradient_variance_probe: need at least 100 repeats");
  check_mode(family, mode, mc_samples);
  const Index q = family.psi.size();
  GradientStats s;
  s.mean = Vector<double>::Zero(q);
  Vector<double> m2 = Vector<double>::Zero(q);
  for (Index r = 0; r < repeats; ++r) {
    const auto noise = draw_noise(family, mode, mc_samples, rng);
    const auto g = evaluate_with_gradient(elbo_objective(family, target, noise, batch), family.psi);
    const Vector<double> delta = g.gradient - s.mean;
    s.mean += delta / static_cast<double>(r + 1);
    m2 += delta.cwiseProduct(g.gradient - s.mean);
  }
  s.variance = m2 / static_cast<double>(repeats - 1);
  s.repeats = repeats;
  return s;
}

}  // namespace varinf
