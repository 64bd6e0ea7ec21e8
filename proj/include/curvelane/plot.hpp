#pragma once

// Minimal SVG line charts for lane overlays, refinement traces and
// stability series.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace curvelane {

struct Series {
  std::vector<double> x, y;
  std::string color = "#1f77b4";
  double width = 1.5;
  bool dashed = false;
  bool markers = false;
};

/// A single chart with linear axes. Data coordinates map to a fixed canvas.
class SvgChart {
 public:
  SvgChart(std::string title, std::string x_label, std::string y_label, int width = 480, int height = 640)
      : title_(std::move(title)), xl_(std::move(x_label)), yl_(std::move(y_label)), w_(width), h_(height) {}

  void set_limits(double x0, double x1, double y0, double y1) {
    x0_ = x0;
    x1_ = x1;
    y0_ = y0;
    y1_ = y1;
    fixed_ = true;
  }

  void add(Series s) { series_.push_back(std::move(s)); }
  void note(std::string text) { notes_.push_back(std::move(text)); }
  std::size_t size() const { return series_.size(); }

  std::string render() const {
    double x0 = x0_, x1 = x1_, y0 = y0_, y1 = y1_;
    if (!fixed_) fit_limits(x0, x1, y0, y1);
    const double l = 60, r = 20, t = 40, b = 50;
    const double pw = w_ - l - r, ph = h_ - t - b;
    auto px = [&](double v) { return l + (v - x0) / (x1 - x0) * pw; };
    auto py = [&](double v) { return t + ph - (v - y0) / (y1 - y0) * ph; };
    std::ostringstream o;
    o << std::fixed << std::setprecision(2);
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w_ << "\" height=\"" << h_ << "\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << w_ / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << escape(title_)
      << "</text>\n";
    o << "<rect x=\"" << l << "\" y=\"" << t << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"#444\"/>\n";
    for (int i = 0; i <= 4; ++i) {
      const double vx = x0 + (x1 - x0) * i / 4, vy = y0 + (y1 - y0) * i / 4;
      o << "<text x=\"" << px(vx) << "\" y=\"" << t + ph + 16 << "\" text-anchor=\"middle\" font-size=\"10\">"
        << tick(vx) << "</text>\n";
      o << "<text x=\"" << l - 6 << "\" y=\"" << py(vy) + 3 << "\" text-anchor=\"end\" font-size=\"10\">" << tick(vy)
        << "</text>\n";
    }
    o << "<text x=\"" << l + pw / 2 << "\" y=\"" << h_ - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
      << escape(xl_) << "</text>\n";
    o << "<text x=\"14\" y=\"" << t + ph / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 "
      << t + ph / 2 << ")\">" << escape(yl_) << "</text>\n";
    for (const auto& s : series_) {
      if (s.x.empty()) continue;
      o << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"" << s.width << "\"";
      if (s.dashed) o << " stroke-dasharray=\"5,3\"";
      o << " points=\"";
      for (std::size_t i = 0; i < s.x.size(); ++i) o << px(s.x[i]) << "," << py(s.y[i]) << " ";
      o << "\"/>\n";
      if (s.markers) {
        for (std::size_t i = 0; i < s.x.size(); ++i) {
          o << "<circle cx=\"" << px(s.x[i]) << "\" cy=\"" << py(s.y[i]) << "\" r=\"2\" fill=\"" << s.color << "\"/>\n";
        }
      }
    }
    for (std::size_t i = 0; i < notes_.size(); ++i) {
      o << "<text x=\"" << l + 8 << "\" y=\"" << t + 16 + 14 * i << "\" font-size=\"11\">" << escape(notes_[i])
        << "</text>\n";
    }
    o << "</svg>\n";
    return o.str();
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << render();
  }

 private:
  void fit_limits(double& x0, double& x1, double& y0, double& y1) const {
    x0 = y0 = 1e300;
    x1 = y1 = -1e300;
    for (const auto& s : series_) {
      for (double v : s.x) {
        x0 = std::min(x0, v);
        x1 = std::max(x1, v);
      }
      for (double v : s.y) {
        y0 = std::min(y0, v);
        y1 = std::max(y1, v);
      }
    }
    if (x0 > x1) x0 = 0, x1 = 1;
    if (y0 > y1) y0 = 0, y1 = 1;
    const double px = std::max((x1 - x0) * 0.05, 1e-3), py = std::max((y1 - y0) * 0.05, 1e-3);
    x0 -= px;
    x1 += px;
    y0 -= py;
    y1 += py;
  }

  static std::string tick(double v) {
    std::ostringstream o;
    o << std::setprecision(3) << v;
    return o.str();
  }

  static std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
      if (c == '<') out += "&lt;";
      else if (c == '>') out += "&gt;";
      else if (c == '&') out += "&amp;";
      else out += c;
    }
    return out;
  }

  std::string title_, xl_, yl_;
  int w_, h_;
  double x0_ = 0, x1_ = 1, y0_ = 0, y1_ = 1;
  bool fixed_ = false;
  std::vector<Series> series_;
  std::vector<std::string> notes_;
};

}  // namespace curvelane
