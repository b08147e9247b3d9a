#pragma once

// Minimal reverse-mode differentiation over flat parameter vectors.
//
// A `Tape` records every primitive as a node holding its parents and the
// local partial derivatives. `ad::Var` is a value plus a handle into the
// tape; variables without a tape are constants and never recorded.
// Numerical code in this library is written as templates over the scalar
// type so the same routine runs on `double`, `long double` and `ad::Var`.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "varinf/errors.hpp"

namespace varinf {

using Index = Eigen::Index;

template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

namespace ad {

class Tape {
 public:
  Tape() { begin_.push_back(0); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Index size() const { return static_cast<Index>(begin_.size()) - 1; }

  Index add_leaf() {
    begin_.push_back(static_cast<Index>(parent_.size()));
    return size() - 1;
  }

  Index add_node(std::span<const Index> parents,
                 std::span<const double> partials) {
    parent_.insert(parent_.end(), parents.begin(), parents.end());
    partial_.insert(partial_.end(), partials.begin(), partials.end());
    begin_.push_back(static_cast<Index>(parent_.size()));
    return size() - 1;
  }

  /// Reverse sweep seeded with d(output)/d(output) = 1. Nodes are stored in
  /// creation order, which is a topological order.
  std::vector<double> adjoints(Index output) const {
    std::vector<double> adj(static_cast<std::size_t>(size()), 0.0);
    adj[static_cast<std::size_t>(output)] = 1.0;
    for (Index node = output; node >= 0; --node) {
      const double a = adj[static_cast<std::size_t>(node)];
      if (a == 0.0) continue;
      for (Index e = begin_[node]; e < begin_[node + 1]; ++e) {
        adj[static_cast<std::size_t>(parent_[e])] += a * partial_[e];
      }
    }
    return adj;
  }

 private:
  std::vector<Index> begin_;
  std::vector<Index> parent_;
  std::vector<double> partial_;
};

class Var {
 public:
  Var() = default;
  Var(double value) : value_(value) {}  // NOLINT: constants convert implicitly

  static Var leaf(Tape& tape, double value) {
    Var v(value);
    v.tape_ = &tape;
    v.index_ = tape.add_leaf();
    return v;
  }

  double value() const { return value_; }
  Tape* tape() const { return tape_; }
  Index index() const { return index_; }
  bool is_constant() const { return tape_ == nullptr; }

  Var& operator+=(const Var& o);
  Var& operator-=(const Var& o);
  Var& operator*=(const Var& o);
  Var& operator/=(const Var& o);

 private:
  friend class NodeBuilder;
  double value_ = 0.0;
  Tape* tape_ = nullptr;
  Index index_ = -1;
};

/// Collects (parent, partial) pairs for one node, skipping constants.
class NodeBuilder {
 public:
  explicit NodeBuilder(std::size_t capacity = 2) {
    parents_.reserve(capacity);
    partials_.reserve(capacity);
  }

  void add(const Var& parent, double partial) {
    if (parent.is_constant()) return;
    tape_ = parent.tape_;
    parents_.push_back(parent.index_);
    partials_.push_back(partial);
  }

  Var finish(const char* primitive, double value) {
    if (!std::isfinite(value)) throw NonFiniteError(primitive);
    Var out(value);
    if (tape_ != nullptr) {
      out.tape_ = tape_;
      out.index_ = tape_->add_node(parents_, partials_);
    }
    return out;
  }

 private:
  Tape* tape_ = nullptr;
  std::vector<Index> parents_;
  std::vector<double> partials_;
};

namespace detail {

inline Var unary(const char* name, double value, const Var& a, double da) {
  NodeBuilder b(1);
  b.add(a, da);
  return b.finish(name, value);
}

inline Var binary(const char* name, double value, const Var& a, double da,
                  const Var& c, double dc) {
  NodeBuilder b(2);
  b.add(a, da);
  b.add(c, dc);
  return b.finish(name, value);
}

}  // namespace detail

inline Var operator+(const Var& a, const Var& b) {
  return detail::binary("add", a.value() + b.value(), a, 1.0, b, 1.0);
}
inline Var operator-(const Var& a, const Var& b) {
  return detail::binary("sub", a.value() - b.value(), a, 1.0, b, -1.0);
}
inline Var operator*(const Var& a, const Var& b) {
  return detail::binary("mul", a.value() * b.value(), a, b.value(), b,
                        a.value());
}
inline Var operator/(const Var& a, const Var& b) {
  const double inv = 1.0 / b.value();
  const double q = a.value() * inv;
  return detail::binary("div", q, a, inv, b, -q * inv);
}
inline Var operator-(const Var& a) {
  return detail::unary("neg", -a.value(), a, -1.0);
}
inline Var operator+(const Var& a) { return a; }

inline Var& Var::operator+=(const Var& o) { return *this = *this + o; }
inline Var& Var::operator-=(const Var& o) { return *this = *this - o; }
inline Var& Var::operator*=(const Var& o) { return *this = *this * o; }
inline Var& Var::operator/=(const Var& o) { return *this = *this / o; }

inline bool operator<(const Var& a, const Var& b) { return a.value() < b.value(); }
inline bool operator>(const Var& a, const Var& b) { return a.value() > b.value(); }
inline bool operator<=(const Var& a, const Var& b) { return a.value() <= b.value(); }
inline bool operator>=(const Var& a, const Var& b) { return a.value() >= b.value(); }
inline bool operator==(const Var& a, const Var& b) { return a.value() == b.value(); }
inline bool operator!=(const Var& a, const Var& b) { return a.value() != b.value(); }

inline Var exp(const Var& a) {
  const double e = std::exp(a.value());
  return detail::unary("exp", e, a, e);
}
inline Var log(const Var& a) {
  return detail::unary("log", std::log(a.value()), a, 1.0 / a.value());
}
inline Var sqrt(const Var& a) {
  const double s = std::sqrt(a.value());
  return detail::unary("sqrt", s, a, 0.5 / s);
}
inline Var tanh(const Var& a) {
  const double t = std::tanh(a.value());
  return detail::unary("tanh", t, a, 1.0 - t * t);
}
inline Var abs(const Var& a) {
  return detail::unary("abs", std::abs(a.value()), a, a.value() < 0 ? -1.0 : 1.0);
}
inline bool isfinite(const Var& a) { return std::isfinite(a.value()); }

}  // namespace ad
}  // namespace varinf

namespace Eigen {

template <>
struct NumTraits<varinf::ad::Var> : NumTraits<double> {
  using Real = varinf::ad::Var;
  using NonInteger = varinf::ad::Var;
  using Nested = varinf::ad::Var;
  using Literal = varinf::ad::Var;
  enum {
    IsComplex = 0,
    IsInteger = 0,
    IsSigned = 1,
    RequireInitialization = 1,
    ReadCost = 1,
    AddCost = 3,
    MulCost = 3
  };
};

}  // namespace Eigen

namespace varinf {

using ad::Var;

template <typename T>
inline constexpr bool is_var_v = std::is_same_v<std::remove_cvref_t<T>, Var>;

/// Value of a scalar regardless of whether it is recorded.
template <typename T>
double value_of(const T& x) {
  if constexpr (is_var_v<T>) {
    return x.value();
  } else {
    return static_cast<double>(x);
  }
}

template <typename T>
Vector<double> values_of(const Vector<T>& v) {
  Vector<double> out(v.size());
  for (Index i = 0; i < v.size(); ++i) out[i] = value_of(v[i]);
  return out;
}

template <typename A, typename B>
using promote_t = std::conditional_t<is_var_v<A> || is_var_v<B>, Var,
                                     decltype(std::declval<A>() * std::declval<B>())>;

/// log(1 + e^x), stable for large |x|.
template <typename T>
T softplus(const T& x) {
  if constexpr (is_var_v<T>) {
    const double v = x.value();
    const double value = v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
    const double sigmoid = 1.0 / (1.0 + std::exp(-v));
    return ad::detail::unary("softplus", value, x, sigmoid);
  } else {
    using std::exp;
    using std::log1p;
    return x > T(0) ? x + log1p(exp(-x)) : log1p(exp(x));
  }
}

template <typename T>
T log_sum_exp(const Vector<T>& v) {
  if (v.size() == 0) return T(-std::numeric_limits<double>::infinity());
  if constexpr (is_var_v<T>) {
    double m = v[0].value();
    for (Index i = 1; i < v.size(); ++i) m = std::max(m, v[i].value());
    double s = 0.0;
    for (Index i = 0; i < v.size(); ++i) s += std::exp(v[i].value() - m);
    ad::NodeBuilder b(static_cast<std::size_t>(v.size()));
    for (Index i = 0; i < v.size(); ++i) b.add(v[i], std::exp(v[i].value() - m) / s);
    return b.finish("log_sum_exp", m + std::log(s));
  } else {
    using std::exp;
    using std::log;
    T m = v.maxCoeff();
    if (!std::isfinite(static_cast<double>(m))) return m;
    T s(0);
    for (Index i = 0; i < v.size(); ++i) s += exp(v[i] - m);
    return m + log(s);
  }
}

template <typename T>
T sum(const Vector<T>& v) {
  if constexpr (is_var_v<T>) {
    ad::NodeBuilder b(static_cast<std::size_t>(v.size()));
    double s = 0.0;
    for (Index i = 0; i < v.size(); ++i) {
      s += v[i].value();
      b.add(v[i], 1.0);
    }
    return b.finish("sum", s);
  } else {
    T s(0);
    for (Index i = 0; i < v.size(); ++i) s += v[i];
    return s;
  }
}

template <typename A, typename B>
promote_t<A, B> dot(const Vector<A>& a, const Vector<B>& b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  if constexpr (is_var_v<A> || is_var_v<B>) {
    ad::NodeBuilder nb(static_cast<std::size_t>(2 * a.size()));
    double s = 0.0;
    for (Index i = 0; i < a.size(); ++i) {
      const double av = value_of(a[i]);
      const double bv = value_of(b[i]);
      s += av * bv;
      if constexpr (is_var_v<A>) nb.add(a[i], bv);
      if constexpr (is_var_v<B>) nb.add(b[i], av);
    }
    return nb.finish("dot", s);
  } else {
    promote_t<A, B> s(0);
    for (Index i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  }
}

/// Matrix-vector product; each output entry is one recorded node.
template <typename A, typename B>
Vector<promote_t<A, B>> matvec(const Matrix<A>& m, const Vector<B>& x) {
  if (m.cols() != x.size()) throw ShapeError("matvec: dimension mismatch");
  using R = promote_t<A, B>;
  Vector<R> out(m.rows());
  if constexpr (is_var_v<R>) {
    for (Index r = 0; r < m.rows(); ++r) {
      ad::NodeBuilder nb(static_cast<std::size_t>(2 * m.cols()));
      double s = 0.0;
      for (Index c = 0; c < m.cols(); ++c) {
        const double mv = value_of(m(r, c));
        const double xv = value_of(x[c]);
        s += mv * xv;
        if constexpr (is_var_v<A>) nb.add(m(r, c), xv);
        if constexpr (is_var_v<B>) nb.add(x[c], mv);
      }
      out[r] = nb.finish("matvec", s);
    }
  } else {
    for (Index r = 0; r < m.rows(); ++r) {
      R s(0);
      for (Index c = 0; c < m.cols(); ++c) s += m(r, c) * x[c];
      out[r] = s;
    }
  }
  return out;
}

/// Transposed product mᵀx.
template <typename A, typename B>
Vector<promote_t<A, B>> matvec_transposed(const Matrix<A>& m, const Vector<B>& x) {
  if (m.rows() != x.size()) throw ShapeError("matvec_transposed: dimension mismatch");
  Vector<promote_t<A, B>> out(m.cols());
  for (Index c = 0; c < m.cols(); ++c) {
    Vector<A> col = m.col(c);
    out[c] = dot(col, x);
  }
  return out;
}

template <typename To, typename From>
Vector<To> cast_vector(const Vector<From>& v) {
  Vector<To> out(v.size());
  for (Index i = 0; i < v.size(); ++i) {
    if constexpr (is_var_v<To> || !is_var_v<From>) {
      out[i] = static_cast<To>(v[i]);
    } else {
      out[i] = static_cast<To>(v[i].value());
    }
  }
  return out;
}

struct GradientReport {
  double value = 0.0;
  Vector<double> gradient;
  double max_abs_component = 0.0;
};

/// Value and exact reverse-mode gradient of `objective` at `psi`.
/// The objective is called with a `Vector<Var>` and must return a `Var`.
template <typename Objective>
GradientReport evaluate_with_gradient(Objective&& objective, const Vector<double>& psi) {
  ad::Tape tape;
  Vector<Var> x(psi.size());
  for (Index i = 0; i < psi.size(); ++i) x[i] = Var::leaf(tape, psi[i]);
  const Var y = objective(std::as_const(x));

  GradientReport report;
  report.value = y.value();
  report.gradient = Vector<double>::Zero(psi.size());
  if (!y.is_constant()) {
    const std::vector<double> adj = tape.adjoints(y.index());
    for (Index i = 0; i < psi.size(); ++i) {
      report.gradient[i] = adj[static_cast<std::size_t>(x[i].index())];
    }
  }
  if (!report.gradient.allFinite()) throw NonFiniteError("gradient");
  report.max_abs_component = psi.size() > 0 ? report.gradient.cwiseAbs().maxCoeff() : 0.0;
  return report;
}

/// Central-difference gradient with per-coordinate step
/// h_i = relative_step * max(1, |psi_i|). `Real` selects the precision the
/// objective is evaluated in.
template <typename Real = double, typename Objective>
Vector<double> finite_difference_gradient(Objective&& objective, const Vector<double>& psi,
                                          double relative_step = 1e-4) {
  if (!(relative_step > 0)) throw ConfigError("finite_difference_gradient: step must be > 0");
  Vector<Real> x = psi.template cast<Real>();
  Vector<double> grad(psi.size());
  for (Index i = 0; i < psi.size(); ++i) {
    const Real h = Real(relative_step) * std::max(Real(1), static_cast<Real>(std::abs(psi[i])));
    const Real saved = x[i];
    x[i] = saved + h;
    const Real up = objective(std::as_const(x));
    x[i] = saved - h;
    const Real down = objective(std::as_const(x));
    x[i] = saved;
    if (!std::isfinite(static_cast<double>(up)) || !std::isfinite(static_cast<double>(down))) {
      throw NonFiniteError("finite_difference probe");
    }
    grad[i] = static_cast<double>((up - down) / (Real(2) * h));
  }
  return grad;
}

}  // namespace varinf
