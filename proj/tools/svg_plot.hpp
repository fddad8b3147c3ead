#pragma once

// Minimal SVG line charts for loss and precision/recall curves.

#include <string>
#include <vector>

namespace drn::plot {

struct Series {
  std::string label;
  std::vector<double> x, y;
  std::string color = "#1f77b4";
  double width = 1.5;
};

struct Chart {
  std::string title;
  std::string x_label, y_label;
  std::vector<Series> series;
  // Fixed axis ranges; NaN means fit the data.
  double x_min, x_max, y_min, y_max;
  bool log_y = false;

  Chart();
};

std::string render_svg(const Chart& chart, int width = 640, int height = 400);

// Trailing moving average over `window` points.
std::vector<double> moving_average(const std::vector<double>& v, int window);

}  // namespace drn::plot
