#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace pulseformer {

/// Minimal line/band/bar chart written as standalone SVG. Axis ranges grow to
/// cover every series unless fixed explicitly.
class SvgPlot {
 public:
  SvgPlot(std::string title, std::string x_label, std::string y_label, double width = 960, double height = 320);

  void line(std::span<const double> x, std::span<const double> y, const std::string& color, double stroke = 1.5);
  /// Filled region between lo and hi.
  void band(std::span<const double> x, std::span<const double> lo, std::span<const double> hi,
            const std::string& color, double opacity = 0.25);
  /// Full-height bars whose opacity is weight / max(weight), times max_opacity.
  void shading(std::span<const double> x, std::span<const double> weight, const std::string& color,
               double bar_width, double max_opacity = 0.6);
  /// Circle markers.
  void points(std::span<const double> x, std::span<const double> y, const std::string& color, double radius = 3);

  void fix_y(double lo, double hi);
  std::string render() const;
  void save(const std::filesystem::path& file) const;

 private:
  struct Series {
    enum Kind { line, band, shading, points } kind;
    std::vector<double> x, a, b;
    std::string color;
    double p1 = 0, p2 = 0;
  };

  void cover(std::span<const double> x, std::span<const double> y);

  std::string title_, x_label_, y_label_;
  double width_, height_;
  double x_lo_ = 1e300, x_hi_ = -1e300, y_lo_ = 1e300, y_hi_ = -1e300;
  bool y_fixed_ = false;
  std::vector<Series> series_;
};

}  // namespace pulseformer
