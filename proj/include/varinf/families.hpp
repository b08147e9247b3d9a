#pragma once

// Variational families over a flat parameter vector theta in R^P.
//
// A FamilyState carries its variational parameters psi as one flat vector so
// the trainer can differentiate with respect to all of them at once. The
// per-family layout of psi is:
//
//   MAP               theta_hat                        (P)
//   MeanField         mu, log sigma                    (2P)
//   StructuredNormal  mu, log A, U (column-major)      (2P + PK)
//   Mixture           M StructuredNormal blocks, logits (M(2P + PK) + M)
//   McDropout         theta_hat                        (P)
//
// Sampling is split in two stages: parameter-free noise is drawn first
// (NoiseDraw), then `reparametrize` maps it through psi. The second stage is
// generic over the scalar type and is what gets differentiated.

#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "varinf/autodiff.hpp"
#include "varinf/random.hpp"
#include "varinf/structured_cov.hpp"

namespace varinf {

enum class FamilyTag { kMap, kMeanField, kStructuredNormal, kMixture, kMcDropout };
enum class SamplingMode { kNaive, kPaired, kUnscented };

inline std::string_view to_string(FamilyTag tag) {
  switch (tag) {
    case FamilyTag::kMap: return "map";
    case FamilyTag::kMeanField: return "mean_field";
    case FamilyTag::kStructuredNormal: return "structured_normal";
    case FamilyTag::kMixture: return "mixture";
    case FamilyTag::kMcDropout: return "mc_dropout";
  }
  return "unknown";
}

inline FamilyTag parse_family_tag(std::string_view s) {
  if (s == "map") return FamilyTag::kMap;
  if (s == "mean_field") return FamilyTag::kMeanField;
  if (s == "structured_normal") return FamilyTag::kStructuredNormal;
  if (s == "mixture") return FamilyTag::kMixture;
  if (s == "mc_dropout") return FamilyTag::kMcDropout;
  throw ConfigError("unknown family tag '" + std::string(s) + "'");
}

inline std::string_view to_string(SamplingMode mode) {
  switch (mode) {
    case SamplingMode::kNaive: return "naive";
    case SamplingMode::kPaired: return "paired";
    case SamplingMode::kUnscented: return "unscented";
  }
  return "unknown";
}

inline SamplingMode parse_sampling_mode(std::string_view s) {
  if (s == "naive") return SamplingMode::kNaive;
  if (s == "paired") return SamplingMode::kPaired;
  if (s == "unscented") return SamplingMode::kUnscented;
  throw ConfigError("unknown sampling mode '" + std::string(s) + "'");
}

/// Largest number of droppable coordinates `enumerate_dropout` accepts.
inline constexpr Index kMaxEnumeratedDropout = 24;

struct FamilyState {
  FamilyTag tag = FamilyTag::kMap;
  Index dim = 0;         // P
  Index rank = 0;        // K, for structured normal and mixture components
  Index components = 1;  // M, mixture only
  Vector<double> psi;
  double keep_prob = 1.0;               // dropout activation probability p
  std::vector<std::uint8_t> droppable;  // dropout only; biases are 0

  bool is_atomic() const { return tag == FamilyTag::kMap || tag == FamilyTag::kMcDropout; }
  bool is_gaussian() const {
    return tag == FamilyTag::kMeanField || tag == FamilyTag::kStructuredNormal;
  }

  Index component_size() const { return 2 * dim + dim * rank; }

  Index expected_psi_size() const {
    switch (tag) {
      case FamilyTag::kMap:
      case FamilyTag::kMcDropout: return dim;
      case FamilyTag::kMeanField: return 2 * dim;
      case FamilyTag::kStructuredNormal: return component_size();
      case FamilyTag::kMixture: return components * component_size() + components;
    }
    return 0;
  }

  Index droppable_count() const {
    Index n = 0;
    for (auto d : droppable) n += d ? 1 : 0;
    return n;
  }

  void validate() const {
    if (dim < 1) throw ShapeError("FamilyState: dimension must be positive");
    if (rank < 0 || rank > dim) throw ShapeError("FamilyState: rank must lie in [0, P]");
    if (tag == FamilyTag::kMixture && components < 1) {
      throw ShapeError("FamilyState: mixture needs at least one component");
    }
    if (psi.size() != expected_psi_size()) throw ShapeError("FamilyState: psi has wrong length");
    if (tag == FamilyTag::kMcDropout) {
      if (static_cast<Index>(droppable.size()) != dim) {
        throw ShapeError("FamilyState: droppable mask has wrong length");
      }
      if (!(keep_prob >= 0.0 && keep_prob <= 1.0)) {
        throw ConfigError("FamilyState: keep probability outside [0, 1]");
      }
    }
  }
};

/// Mean, log-diagonal and low-rank factor of one Gaussian (component).
template <typename T>
struct GaussianParams {
  Vector<T> mean;
  Vector<T> log_diag;  // log A
  Matrix<T> factor;    // U

  StructuredCov<T> covariance() const {
    using std::exp;
    using ad::exp;
    StructuredCov<T> cov;
    cov.diag = Vector<T>(log_diag.size());
    for (Index i = 0; i < log_diag.size(); ++i) cov.diag[i] = exp(log_diag[i]);
    cov.factor = factor;
    return cov;
  }
};

template <typename T>
GaussianParams<T> gaussian_params(const FamilyState& state, const Vector<T>& psi,
                                  Index component = 0) {
  const Index p = state.dim;
  GaussianParams<T> g;
  switch (state.tag) {
    case FamilyTag::kMeanField: {
      g.mean = psi.head(p);
      g.log_diag = Vector<T>(p);
      for (Index i = 0; i < p; ++i) g.log_diag[i] = T(2.0) * psi[p + i];
      g.factor = Matrix<T>(p, 0);
      return g;
    }
    case FamilyTag::kStructuredNormal:
    case FamilyTag::kMixture: {
      const Index off = component * state.component_size();
      g.mean = psi.segment(off, p);
      g.log_diag = psi.segment(off + p, p);
      g.factor = Matrix<T>(p, state.rank);
      for (Index c = 0; c < state.rank; ++c) {
        for (Index r = 0; r < p; ++r) g.factor(r, c) = psi[off + 2 * p + c * p + r];
      }
      return g;
    }
    default:
      throw ModeError("gaussian_params: family has no Gaussian parameters");
  }
}

template <typename T>
Vector<T> mixture_log_weights(const FamilyState& state, const Vector<T>& psi) {
  const Vector<T> logits = psi.tail(state.components);
  const T norm = log_sum_exp(logits);
  Vector<T> out(state.components);
  for (Index m = 0; m < state.components; ++m) out[m] = logits[m] - norm;
  return out;
}

/// Parameter block of the model being approximated, used for initialization.
struct ParameterBlock {
  Index size = 0;
  Index fan_in = 1;
  Index fan_out = 1;
  bool is_bias = false;
};

struct ModelShape {
  std::vector<ParameterBlock> blocks;

  Index dim() const {
    Index p = 0;
    for (const auto& b : blocks) p += b.size;
    return p;
  }

  static ModelShape single(Index size, Index fan_in) {
    return ModelShape{{ParameterBlock{size, fan_in, 1, false}}};
  }
};

struct FamilyOptions {
  Index rank = 0;
  Index components = 2;
  double keep_prob = 0.5;
  /// Mixture means are the common init plus a perturbation whose spread is
  /// this many init half-widths.
  double mixture_perturbation = 2.0;
};

/// Initialization following layer weight-init heuristics: means uniform in
/// +-1/sqrt(fan_in), sigma = 0.05/sqrt(fan_in), U ~ N(0, (0.01/sqrt(fan_in))^2).
inline FamilyState init_family(FamilyTag tag, const ModelShape& shape,
                               const FamilyOptions& options, Rng& rng) {
  FamilyState s;
  s.tag = tag;
  s.dim = shape.dim();
  s.rank = (tag == FamilyTag::kStructuredNormal || tag == FamilyTag::kMixture) ? options.rank : 0;
  s.components = tag == FamilyTag::kMixture ? options.components : 1;
  if (s.dim < 1) throw ShapeError("init_family: empty model shape");
  if (s.rank < 0 || s.rank > s.dim) throw ShapeError("init_family: rank must lie in [0, P]");
  if (s.components < 1) throw ShapeError("init_family: mixture needs at least one component");

  Vector<double> bound(s.dim);
  {
    Index i = 0;
    for (const auto& b : shape.blocks) {
      for (Index j = 0; j < b.size; ++j) {
        bound[i++] = 1.0 / std::sqrt(static_cast<double>(std::max<Index>(1, b.fan_in)));
      }
    }
  }
  auto uniform_means = [&] {
    Vector<double> m(s.dim);
    for (Index i = 0; i < s.dim; ++i) m[i] = uniform(-bound[i], bound[i], rng);
    return m;
  };
  auto fill_gaussian = [&](Index off, const Vector<double>& mean) {
    s.psi.segment(off, s.dim) = mean;
    for (Index i = 0; i < s.dim; ++i) s.psi[off + s.dim + i] = 2.0 * std::log(0.05 * bound[i]);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Index c = 0; c < s.rank; ++c) {
      for (Index r = 0; r < s.dim; ++r) {
        s.psi[off + 2 * s.dim + c * s.dim + r] = 0.01 * bound[r] * normal(rng);
      }
    }
  };

  s.psi = Vector<double>::Zero(s.expected_psi_size());
  switch (tag) {
    case FamilyTag::kMap:
      s.psi = uniform_means();
      break;
    case FamilyTag::kMcDropout: {
      s.psi = uniform_means();
      s.keep_prob = options.keep_prob;
      s.droppable.reserve(static_cast<std::size_t>(s.dim));
      for (const auto& b : shape.blocks) {
        for (Index j = 0; j < b.size; ++j) s.droppable.push_back(b.is_bias ? 0 : 1);
      }
      break;
    }
    case FamilyTag::kMeanField: {
      s.psi.head(s.dim) = uniform_means();
      for (Index i = 0; i < s.dim; ++i) s.psi[s.dim + i] = std::log(0.05 * bound[i]);
      break;
    }
    case FamilyTag::kStructuredNormal:
      fill_gaussian(0, uniform_means());
      break;
    case FamilyTag::kMixture: {
      // Perturbations are centered across components so the means straddle
      // the common init; the rescaling keeps their per-coordinate variance.
      const Vector<double> common = uniform_means();
      Matrix<double> delta(s.dim, s.components);
      for (Index m = 0; m < s.components; ++m) {
        for (Index i = 0; i < s.dim; ++i) {
          const double w = options.mixture_perturbation * bound[i];
          delta(i, m) = uniform(-w, w, rng);
        }
      }
      if (s.components > 1) {
        const Vector<double> centre = delta.rowwise().mean();
        delta.colwise() -= centre;
        delta *= std::sqrt(static_cast<double>(s.components) / static_cast<double>(s.components - 1));
      }
      for (Index m = 0; m < s.components; ++m) {
        fill_gaussian(m * s.component_size(), Vector<double>(common + delta.col(m)));
      }
      break;
    }
  }
  s.validate();
  return s;
}

/// Parameter-free randomness behind one draw.
struct NoiseDraw {
  Vector<double> diag;
  Vector<double> lowrank;
  Index component = 0;
  std::vector<std::uint8_t> mask;  // dropout z
};

struct SampleBatch {
  SamplingMode mode = SamplingMode::kNaive;
  std::vector<NoiseDraw> noise;
  std::vector<Vector<double>> draws;

  Index size() const { return static_cast<Index>(draws.size()); }
};

inline void check_mode(const FamilyState& state, SamplingMode mode, Index count) {
  if (count < 1) throw ConfigError("sample: count must be at least 1");
  if (mode == SamplingMode::kNaive) return;
  if (state.tag == FamilyTag::kMcDropout) {
    throw ModeError("sample: mc_dropout supports naive sampling only");
  }
  if (count % 2 != 0) throw ModeError("sample: paired and unscented modes need an even count");
  if (mode == SamplingMode::kUnscented && state.tag != FamilyTag::kMap &&
      !(state.tag == FamilyTag::kStructuredNormal && state.rank >= 1)) {
    throw ModeError("sample: unscented mode needs a structured normal with rank >= 1");
  }
}

inline std::vector<NoiseDraw> draw_noise(const FamilyState& state, SamplingMode mode, Index count,
                                         Rng& rng) {
  check_mode(state, mode, count);
  std::vector<NoiseDraw> out;
  out.reserve(static_cast<std::size_t>(count));
  const Index p = state.dim;
  const Index k = state.rank;

  if (state.tag == FamilyTag::kMap) {
    out.resize(static_cast<std::size_t>(count));
    return out;
  }
  if (state.tag == FamilyTag::kMcDropout) {
    std::bernoulli_distribution keep(state.keep_prob);
    for (Index n = 0; n < count; ++n) {
      NoiseDraw d;
      d.mask.resize(static_cast<std::size_t>(p));
      for (Index i = 0; i < p; ++i) {
        d.mask[static_cast<std::size_t>(i)] = state.droppable[static_cast<std::size_t>(i)]
                                                   ? (keep(rng) ? 1 : 0)
                                                   : 1;
      }
      out.push_back(std::move(d));
    }
    return out;
  }

  auto pick_component = [&]() -> Index {
    if (state.tag != FamilyTag::kMixture) return 0;
    const Vector<double> logw = mixture_log_weights(state, state.psi);
    std::vector<double> w(static_cast<std::size_t>(state.components));
    for (Index m = 0; m < state.components; ++m) w[static_cast<std::size_t>(m)] = std::exp(logw[m]);
    return std::discrete_distribution<Index>(w.begin(), w.end())(rng);
  };

  switch (mode) {
    case SamplingMode::kNaive:
      for (Index n = 0; n < count; ++n) {
        NoiseDraw d;
        d.component = pick_component();
        d.diag = standard_normal(p, rng);
        d.lowrank = standard_normal(k, rng);
        out.push_back(std::move(d));
      }
      break;
    case SamplingMode::kPaired:
      for (Index n = 0; n < count; n += 2) {
        NoiseDraw d;
        d.component = pick_component();
        d.diag = standard_normal(p, rng);
        d.lowrank = standard_normal(k, rng);
        NoiseDraw twin{-d.diag, -d.lowrank, d.component, {}};
        out.push_back(std::move(d));
        out.push_back(std::move(twin));
      }
      break;
    case SamplingMode::kUnscented: {
      // Groups of 2K draws: the K columns of a Haar-random orthogonal matrix,
      // scaled by sqrt(K), drive the low-rank noise; each draw gets fresh
      // diagonal noise and an antithetic twin.
      const double scale = std::sqrt(static_cast<double>(k));
      while (static_cast<Index>(out.size()) < count) {
        const Matrix<double> q = haar_orthogonal(k, rng);
        for (Index c = 0; c < k && static_cast<Index>(out.size()) < count; ++c) {
          NoiseDraw d;
          d.diag = standard_normal(p, rng);
          d.lowrank = scale * q.col(c);
          NoiseDraw twin{-d.diag, -d.lowrank, 0, {}};
          out.push_back(std::move(d));
          out.push_back(std::move(twin));
        }
      }
      break;
    }
  }
  return out;
}

/// theta = f(z, psi) for one recorded noise draw.
template <typename T>
Vector<T> reparametrize(const FamilyState& state, const Vector<T>& psi, const NoiseDraw& noise) {
  switch (state.tag) {
    case FamilyTag::kMap:
      return psi;
    case FamilyTag::kMcDropout: {
      Vector<T> theta = psi;
      for (Index i = 0; i < state.dim; ++i) {
        if (!noise.mask[static_cast<std::size_t>(i)]) theta[i] = T(0.0);
      }
      return theta;
    }
    default: {
      const GaussianParams<T> g = gaussian_params(state, psi, noise.component);
      return structured_sample(g.mean, g.covariance(), noise.diag, noise.lowrank);
    }
  }
}

inline SampleBatch sample(const FamilyState& state, SamplingMode mode, Index count, Rng& rng) {
  SampleBatch batch;
  batch.mode = mode;
  batch.noise = draw_noise(state, mode, count, rng);
  batch.draws.reserve(batch.noise.size());
  for (const auto& n : batch.noise) batch.draws.push_back(reparametrize(state, state.psi, n));
  return batch;
}

/// log q(z) of a dropout mask (coordinates outside the droppable set ignored).
inline double dropout_log_weight(const FamilyState& state, const std::vector<std::uint8_t>& mask) {
  double lw = 0.0;
  for (Index i = 0; i < state.dim; ++i) {
    if (!state.droppable[static_cast<std::size_t>(i)]) continue;
    lw += mask[static_cast<std::size_t>(i)] ? std::log(state.keep_prob)
                                            : std::log1p(-state.keep_prob);
  }
  return lw;
}

/// log q_psi(theta). Atomic families return log-mass at their atoms and
/// -infinity anywhere else.
template <typename T>
T log_density(const FamilyState& state, const Vector<T>& psi, const Vector<T>& theta) {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  if (theta.size() != state.dim) throw ShapeError("log_density: theta has wrong length");
  switch (state.tag) {
    case FamilyTag::kMap: {
      for (Index i = 0; i < state.dim; ++i) {
        if (value_of(theta[i]) != value_of(psi[i])) return T(kNegInf);
      }
      return T(0.0);
    }
    case FamilyTag::kMcDropout: {
      // Sum of q(z) over every mask z with theta_hat * z == theta.
      double lw = 0.0;
      for (Index i = 0; i < state.dim; ++i) {
        const double t = value_of(theta[i]);
        const double h = value_of(psi[i]);
        if (!state.droppable[static_cast<std::size_t>(i)]) {
          if (t != h) return T(kNegInf);
          continue;
        }
        if (t == h && h == 0.0) continue;
        if (t == h) {
          lw += std::log(state.keep_prob);
        } else if (t == 0.0) {
          lw += std::log1p(-state.keep_prob);
        } else {
          return T(kNegInf);
        }
      }
      return T(lw);
    }
    case FamilyTag::kMeanField:
    case FamilyTag::kStructuredNormal: {
      const GaussianParams<T> g = gaussian_params(state, psi);
      return structured_logpdf(theta, g.mean, g.covariance());
    }
    case FamilyTag::kMixture: {
      const Vector<T> logw = mixture_log_weights(state, psi);
      Vector<T> terms(state.components);
      for (Index m = 0; m < state.components; ++m) {
        const GaussianParams<T> g = gaussian_params(state, psi, m);
        terms[m] = logw[m] + structured_logpdf(theta, g.mean, g.covariance());
      }
      return log_sum_exp(terms);
    }
  }
  return T(kNegInf);
}

inline double log_density(const FamilyState& state, const Vector<double>& theta) {
  return log_density(state, state.psi, theta);
}

/// Closed-form differential entropy; empty for mixtures and atomic families.
inline std::optional<double> entropy_closed_form(const FamilyState& state) {
  if (!state.is_gaussian()) return std::nullopt;
  const GaussianParams<double> g = gaussian_params(state, state.psi);
  const double logdet = woodbury_logdet(g.covariance());
  return 0.5 * (static_cast<double>(state.dim) * std::log(2.0 * std::numbers::pi * std::numbers::e) +
                logdet);
}

/// Every dropout state z over the droppable coordinates with its exact weight
/// q(z) = p^{sum z} (1 - p)^{sum (1 - z)}. Masks are bit patterns over the
/// droppable coordinates in index order.
struct DropoutMixture {
  Vector<double> base;  // theta_hat
  std::vector<Index> droppable_index;
  std::vector<std::uint32_t> masks;
  std::vector<double> weights;

  std::size_t size() const { return masks.size(); }

  Vector<double> atom(std::size_t s) const {
    Vector<double> theta = base;
    for (std::size_t j = 0; j < droppable_index.size(); ++j) {
      if (!((masks[s] >> j) & 1U)) theta[droppable_index[j]] = 0.0;
    }
    return theta;
  }

  std::vector<std::uint8_t> full_mask(std::size_t s) const {
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(base.size()), 1);
    for (std::size_t j = 0; j < droppable_index.size(); ++j) {
      mask[static_cast<std::size_t>(droppable_index[j])] = (masks[s] >> j) & 1U;
    }
    return mask;
  }
};

inline DropoutMixture enumerate_dropout(const FamilyState& state) {
  if (state.tag != FamilyTag::kMcDropout) throw ModeError("enumerate_dropout: not a dropout family");
  state.validate();
  DropoutMixture mix;
  mix.base = state.psi;
  for (Index i = 0; i < state.dim; ++i) {
    if (state.droppable[static_cast<std::size_t>(i)]) mix.droppable_index.push_back(i);
  }
  const auto pd = static_cast<Index>(mix.droppable_index.size());
  if (pd > kMaxEnumeratedDropout) {
    throw GuardError("enumerate_dropout: " + std::to_string(pd) +
                     " droppable coordinates exceed the enumeration limit of " +
                     std::to_string(kMaxEnumeratedDropout));
  }
  const std::uint32_t n = 1U << pd;
  mix.masks.resize(n);
  mix.weights.resize(n);
  const double p = state.keep_prob;
  for (std::uint32_t s = 0; s < n; ++s) {
    const int on = std::popcount(s);
    mix.masks[s] = s;
    mix.weights[s] = std::pow(p, on) * std::pow(1.0 - p, static_cast<int>(pd) - on);
  }
  return mix;
}

}  // namespace varinf
