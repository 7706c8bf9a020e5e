#include "pulseformer/svg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "pulseformer/error.hpp"

namespace pulseformer {

namespace {

constexpr double kLeft = 60, kRight = 20, kTop = 30, kBottom = 40;

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

}  // namespace

SvgPlot::SvgPlot(std::string title, std::string x_label, std::string y_label, double width, double height)
    : title_(std::move(title)), x_label_(std::move(x_label)), y_label_(std::move(y_label)), width_(width),
      height_(height) {}

void SvgPlot::cover(std::span<const double> x, std::span<const double> y) {
  for (double v : x) {
    if (!std::isfinite(v)) continue;
    x_lo_ = std::min(x_lo_, v);
    x_hi_ = std::max(x_hi_, v);
  }
  if (y_fixed_) return;
  for (double v : y) {
    if (!std::isfinite(v)) continue;
    y_lo_ = std::min(y_lo_, v);
    y_hi_ = std::max(y_hi_, v);
  }
}

void SvgPlot::line(std::span<const double> x, std::span<const double> y, const std::string& color, double stroke) {
  if (x.size() != y.size()) throw DimensionError("plot series x and y differ in length");
  cover(x, y);
  series_.push_back({Series::line, {x.begin(), x.end()}, {y.begin(), y.end()}, {}, color, stroke, 0});
}

void SvgPlot::band(std::span<const double> x, std::span<const double> lo, std::span<const double> hi,
                   const std::string& color, double opacity) {
  if (x.size() != lo.size() || x.size() != hi.size()) throw DimensionError("plot band lengths differ");
  cover(x, lo);
  cover(x, hi);
  series_.push_back(
      {Series::band, {x.begin(), x.end()}, {lo.begin(), lo.end()}, {hi.begin(), hi.end()}, color, opacity, 0});
}

void SvgPlot::shading(std::span<const double> x, std::span<const double> weight, const std::string& color,
                      double bar_width, double max_opacity) {
  if (x.size() != weight.size()) throw DimensionError("plot shading lengths differ");
  cover(x, {});
  series_.push_back({Series::shading, {x.begin(), x.end()}, {weight.begin(), weight.end()}, {}, color, bar_width,
                     max_opacity});
}

void SvgPlot::points(std::span<const double> x, std::span<const double> y, const std::string& color, double radius) {
  if (x.size() != y.size()) throw DimensionError("plot points lengths differ");
  cover(x, y);
  series_.push_back({Series::points, {x.begin(), x.end()}, {y.begin(), y.end()}, {}, color, radius, 0});
}

void SvgPlot::fix_y(double lo, double hi) {
  y_lo_ = lo;
  y_hi_ = hi;
  y_fixed_ = true;
}

std::string SvgPlot::render() const {
  double x0 = x_lo_, x1 = x_hi_, y0 = y_lo_, y1 = y_hi_;
  if (x0 > x1) x0 = 0, x1 = 1;
  if (y0 > y1) y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  const double pw = width_ - kLeft - kRight, ph = height_ - kTop - kBottom;
  auto px = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return kTop + (1.0 - (y - y0) / (y1 - y0)) * ph; };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(width_) << "\" height=\"" << fmt(height_)
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << fmt(width_ / 2) << "\" y=\"18\" text-anchor=\"middle\">" << escape(title_) << "</text>\n";
  for (const auto& s : series_) {
    switch (s.kind) {
      case Series::shading: {
        double peak = 0;
        for (double w : s.a) peak = std::max(peak, w);
        if (peak <= 0) break;
        const double bw = s.p1 / (x1 - x0) * pw;
        for (std::size_t i = 0; i < s.x.size(); ++i) {
          if (s.a[i] <= 0) continue;
          o << "<rect x=\"" << fmt(px(s.x[i]) - bw / 2) << "\" y=\"" << fmt(kTop) << "\" width=\"" << fmt(bw)
            << "\" height=\"" << fmt(ph) << "\" fill=\"" << s.color << "\" fill-opacity=\""
            << fmt(s.p2 * s.a[i] / peak) << "\"/>\n";
        }
        break;
      }
      case Series::band: {
        o << "<polygon fill=\"" << s.color << "\" fill-opacity=\"" << fmt(s.p1) << "\" stroke=\"none\" points=\"";
        for (std::size_t i = 0; i < s.x.size(); ++i) o << fmt(px(s.x[i])) << ',' << fmt(py(s.b[i])) << ' ';
        for (std::size_t i = s.x.size(); i-- > 0;) o << fmt(px(s.x[i])) << ',' << fmt(py(s.a[i])) << ' ';
        o << "\"/>\n";
        break;
      }
      case Series::line: {
        o << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"" << fmt(s.p1) << "\" points=\"";
        for (std::size_t i = 0; i < s.x.size(); ++i) o << fmt(px(s.x[i])) << ',' << fmt(py(s.a[i])) << ' ';
        o << "\"/>\n";
        break;
      }
      case Series::points:
        for (std::size_t i = 0; i < s.x.size(); ++i) {
          o << "<circle cx=\"" << fmt(px(s.x[i])) << "\" cy=\"" << fmt(py(s.a[i])) << "\" r=\"" << fmt(s.p1)
            << "\" fill=\"" << s.color << "\"/>\n";
        }
        break;
    }
  }
  // Axes with end-point tick labels.
  o << "<rect x=\"" << fmt(kLeft) << "\" y=\"" << fmt(kTop) << "\" width=\"" << fmt(pw) << "\" height=\"" << fmt(ph)
    << "\" fill=\"none\" stroke=\"#444\"/>\n";
  o << "<text x=\"" << fmt(kLeft) << "\" y=\"" << fmt(height_ - kBottom + 15) << "\">" << fmt(x0) << "</text>\n";
  o << "<text x=\"" << fmt(kLeft + pw) << "\" y=\"" << fmt(height_ - kBottom + 15) << "\" text-anchor=\"end\">"
    << fmt(x1) << "</text>\n";
  o << "<text x=\"" << fmt(kLeft - 4) << "\" y=\"" << fmt(kTop + ph) << "\" text-anchor=\"end\">" << fmt(y0)
    << "</text>\n";
  o << "<text x=\"" << fmt(kLeft - 4) << "\" y=\"" << fmt(kTop + 10) << "\" text-anchor=\"end\">" << fmt(y1)
    << "</text>\n";
  o << "<text x=\"" << fmt(kLeft + pw / 2) << "\" y=\"" << fmt(height_ - 8) << "\" text-anchor=\"middle\">"
    << escape(x_label_) << "</text>\n";
  o << "<text transform=\"translate(14," << fmt(kTop + ph / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
    << escape(y_label_) << "</text>\n";
  o << "</svg>\n";
  return o.str();
}

void SvgPlot::save(const std::filesystem::path& file) const {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw DataError("cannot write " + file.string());
  out << render();
}

}  // namespace pulseformer
