#pragma once

#include <cmath>
#include <cstdio>
#include <limits>
#include <string>

namespace varinf {

/// A reported quantity that may be categorically infinite or not applicable.
/// Infinities are distinguished values, never float overflow.
class Metric {
 public:
  enum class Kind { kFinite, kPosInf, kNegInf, kNotAvailable };

  Metric() = default;

  static Metric finite(double v) { return Metric(Kind::kFinite, v); }
  static Metric pos_inf() { return Metric(Kind::kPosInf, std::numeric_limits<double>::infinity()); }
  static Metric neg_inf() { return Metric(Kind::kNegInf, -std::numeric_limits<double>::infinity()); }
  static Metric na() { return Metric(Kind::kNotAvailable, std::numeric_limits<double>::quiet_NaN()); }

  /// Maps +-inf to the categorical values; NaN becomes n/a.
  static Metric from_double(double v) {
    if (std::isnan(v)) return na();
    if (v == std::numeric_limits<double>::infinity()) return pos_inf();
    if (v == -std::numeric_limits<double>::infinity()) return neg_inf();
    return finite(v);
  }

  Kind kind() const { return kind_; }
  bool is_finite() const { return kind_ == Kind::kFinite; }
  double value() const { return value_; }

  /// "inf", "-inf", "na", or the number printed with 10 significant digits.
  std::string to_cell() const {
    switch (kind_) {
      case Kind::kPosInf: return "inf";
      case Kind::kNegInf: return "-inf";
      case Kind::kNotAvailable: return "na";
      case Kind::kFinite: break;
    }
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", value_);
    return buf;
  }

  friend bool operator==(const Metric& a, const Metric& b) {
    if (a.kind_ != b.kind_) return false;
    return a.kind_ != Kind::kFinite || a.value_ == b.value_;
  }

 private:
  Metric(Kind k, double v) : kind_(k), value_(v) {}
  Kind kind_ = Kind::kNotAvailable;
  double value_ = std::numeric_limits<double>::quiet_NaN();
};

}  // namespace varinf
