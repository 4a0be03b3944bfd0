#pragma once

#include <string>
#include <vector>

// Minimal self-contained SVG charts for run reports.
namespace layerlens::svg {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct Axes {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_y = false;  // non-positive values are dropped
  bool x_ticks = true;
};

std::string scatter(const Axes& axes, const std::vector<Series>& series);
std::string lines(const Axes& axes, const std::vector<Series>& series);

// Overlaid histograms of each series' `y` values over [lo, hi].
std::string histogram(const Axes& axes, const std::vector<Series>& series,
                      double lo, double hi, std::size_t bins);

// Grouped bars: one group per category, one bar per series (series.y is
// indexed by category).
std::string bars(const Axes& axes, const std::vector<std::string>& categories,
                 const std::vector<Series>& series);

}  // namespace layerlens::svg
