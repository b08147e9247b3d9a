#pragma once

// Minimal SVG canvas with a linear data-to-pixel mapping. Numbers are printed
// with fixed precision so identical inputs give identical files.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <string>
#include <vector>

#include "varinf/autodiff.hpp"

namespace varinf {

class SvgCanvas {
 public:
  SvgCanvas(double width, double height, double x_lo, double x_hi, double y_lo, double y_hi,
            double margin = 40.0)
      : w_(width), h_(height), x_lo_(x_lo), x_hi_(x_hi), y_lo_(y_lo), y_hi_(y_hi), m_(margin) {}

  double px(double x) const { return m_ + (x - x_lo_) / (x_hi_ - x_lo_) * (w_ - 2 * m_); }
  double py(double y) const { return h_ - m_ - (y - y_lo_) / (y_hi_ - y_lo_) * (h_ - 2 * m_); }

  void polyline(const std::vector<double>& xs, const std::vector<double>& ys,
                const std::string& stroke, double width = 1.0, double opacity = 1.0) {
    std::string pts;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (i) pts += ' ';
      pts += num(px(xs[i])) + "," + num(py(ys[i]));
    }
    body_ += "<polyline fill=\"none\" stroke=\"" + stroke + "\" stroke-width=\"" + num(width) +
             "\" stroke-opacity=\"" + num(opacity) + "\" points=\"" + pts + "\"/>\n";
  }

  void circle(double x, double y, double r, const std::string& fill) {
    body_ += "<circle cx=\"" + num(px(x)) + "\" cy=\"" + num(py(y)) + "\" r=\"" + num(r) +
             "\" fill=\"" + fill + "\"/>\n";
  }

  /// Axis-aligned data-space rectangle [x0,x1] x [y0,y1].
  void rect(double x0, double y0, double x1, double y1, const std::string& fill,
            double opacity = 1.0) {
    const double left = px(x0);
    const double top = py(y1);
    body_ += "<rect x=\"" + num(left) + "\" y=\"" + num(top) + "\" width=\"" +
             num(px(x1) - left) + "\" height=\"" + num(py(y0) - top) + "\" fill=\"" + fill +
             "\" fill-opacity=\"" + num(opacity) + "\"/>\n";
  }

  /// Contour of N(mean, cov) at `radius` Mahalanobis units, 2D only.
  void ellipse(const Vector<double>& mean, const Matrix<double>& cov, double radius,
               const std::string& stroke, double width = 1.5) {
    const double a = std::sqrt(cov(0, 0));
    const double b = cov(1, 0) / a;
    const double c = std::sqrt(std::max(0.0, cov(1, 1) - b * b));
    std::vector<double> xs;
    std::vector<double> ys;
    for (int i = 0; i <= 96; ++i) {
      const double t = 2.0 * std::numbers::pi * i / 96.0;
      const double u = radius * std::cos(t);
      const double v = radius * std::sin(t);
      xs.push_back(mean[0] + a * u);
      ys.push_back(mean[1] + b * u + c * v);
    }
    polyline(xs, ys, stroke, width);
  }

  void text(double x, double y, const std::string& s, double size = 12.0) {
    body_ += "<text x=\"" + num(px(x)) + "\" y=\"" + num(py(y)) + "\" font-size=\"" + num(size) +
             "\" font-family=\"sans-serif\">" + s + "</text>\n";
  }

  void frame() {
    body_ += "<rect x=\"" + num(m_) + "\" y=\"" + num(m_) + "\" width=\"" + num(w_ - 2 * m_) +
             "\" height=\"" + num(h_ - 2 * m_) + "\" fill=\"none\" stroke=\"#444\"/>\n";
  }

  std::string str() const {
    return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w_) + "\" height=\"" +
           num(h_) + "\" viewBox=\"0 0 " + num(w_) + " " + num(h_) + "\">\n" +
           "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n" + body_ + "</svg>\n";
  }

  static std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
  }

 private:
  double w_, h_, x_lo_, x_hi_, y_lo_, y_hi_, m_;
  std::string body_;
};

/// Fixed palette cycled by series index.
inline const std::string& series_color(std::size_t i) {
  static const std::vector<std::string> colors{"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                               "#9467bd", "#8c564b", "#e377c2", "#17becf"};
  return colors[i % colors.size()];
}

}  // namespace varinf
