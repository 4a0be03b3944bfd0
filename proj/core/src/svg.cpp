#include "layerlens/svg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

namespace layerlens::svg {
namespace {

constexpr double kWidth = 640, kHeight = 420;
constexpr double kLeft = 70, kRight = 150, kTop = 40, kBottom = 60;
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

const char* color(std::size_t i) { return kPalette[i % std::size(kPalette)]; }

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void finish() {
    if (!std::isfinite(lo)) lo = 0, hi = 1;
    if (hi - lo < 1e-12) {
      const double pad = std::max(std::abs(lo) * 0.05, 0.5);
      lo -= pad;
      hi += pad;
    }
  }
};

class Canvas {
 public:
  Canvas(const Axes& axes, Range xr, Range yr) : axes_(axes), xr_(xr), yr_(yr) {
    out_ += fmt::format(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" "
        "viewBox=\"0 0 {0} {1}\" font-family=\"sans-serif\" font-size=\"11\">\n"
        "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
        kWidth, kHeight);
    out_ += fmt::format("<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
                        kLeft + plot_w() / 2, escape(axes.title));
    out_ += fmt::format(
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333\"/>\n",
        kLeft, kTop, plot_w(), plot_h());
    for (int i = 0; i <= 4; ++i) {
      const double fx = xr_.lo + (xr_.hi - xr_.lo) * i / 4.0;
      const double fy = yr_.lo + (yr_.hi - yr_.lo) * i / 4.0;
      if (axes.x_ticks) {
        out_ += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\">{}</text>\n",
                            px(fx), kTop + plot_h() + 16, tick(fx, false));
      }
      out_ += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"end\">{}</text>\n",
                          kLeft - 6, py(fy) + 4, tick(fy, axes_.log_y));
    }
    out_ += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
                        kLeft + plot_w() / 2, kHeight - 18, escape(axes.x_label));
    out_ += fmt::format(
        "<text x=\"16\" y=\"{0}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {0})\">{1}</text>\n",
        kTop + plot_h() / 2, escape(axes.y_label));
  }

  static double plot_w() { return kWidth - kLeft - kRight; }
  static double plot_h() { return kHeight - kTop - kBottom; }
  double px(double x) const { return kLeft + (x - xr_.lo) / (xr_.hi - xr_.lo) * plot_w(); }
  double py(double y) const {
    return kTop + plot_h() - (y - yr_.lo) / (yr_.hi - yr_.lo) * plot_h();
  }

  void legend(std::size_t i, const std::string& name) {
    const double y = kTop + 10 + 16 * static_cast<double>(i);
    out_ += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/>\n",
                        kWidth - kRight + 12, y - 9, color(i));
    out_ += fmt::format("<text x=\"{}\" y=\"{}\">{}</text>\n", kWidth - kRight + 26, y,
                        escape(name));
  }

  std::string& body() { return out_; }
  std::string finish() { return out_ + "</svg>\n"; }

 private:
  static std::string tick(double v, bool log_scale) {
    return log_scale ? fmt::format("{:.2g}", std::pow(10.0, v)) : fmt::format("{:.3g}", v);
  }

  const Axes& axes_;
  Range xr_, yr_;
  std::string out_;
};

double transform_y(const Axes& axes, double y) {
  if (!axes.log_y) return y;
  return y > 0 ? std::log10(y) : std::numeric_limits<double>::quiet_NaN();
}

std::string points_chart(const Axes& axes, const std::vector<Series>& series,
                         bool connect) {
  Range xr, yr;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      const double ty = transform_y(axes, s.y[i]);
      if (!std::isfinite(s.x[i]) || !std::isfinite(ty)) continue;
      xr.add(s.x[i]);
      yr.add(ty);
    }
  }
  xr.finish();
  yr.finish();
  Canvas canvas(axes, xr, yr);
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    std::string path;
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      const double ty = transform_y(axes, s.y[i]);
      if (!std::isfinite(s.x[i]) || !std::isfinite(ty)) continue;
      const double x = canvas.px(s.x[i]), y = canvas.py(ty);
      if (connect) {
        path += fmt::format("{}{:.2f},{:.2f}", path.empty() ? "M" : " L", x, y);
        canvas.body() += fmt::format("<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"3\" fill=\"{}\"/>\n",
                                     x, y, color(si));
      } else {
        canvas.body() += fmt::format(
            "<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"1.8\" fill=\"{}\" fill-opacity=\"0.5\"/>\n", x,
            y, color(si));
      }
    }
    if (connect && !path.empty()) {
      canvas.body() += fmt::format("<path d=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>\n",
                                   path, color(si));
    }
    canvas.legend(si, s.name);
  }
  return canvas.finish();
}

}  // namespace

std::string scatter(const Axes& axes, const std::vector<Series>& series) {
  return points_chart(axes, series, false);
}

std::string lines(const Axes& axes, const std::vector<Series>& series) {
  return points_chart(axes, series, true);
}

std::string histogram(const Axes& axes, const std::vector<Series>& series,
                      double lo, double hi, std::size_t bins) {
  bins = std::max<std::size_t>(bins, 1);
  std::vector<std::vector<double>> freq(series.size(), std::vector<double>(bins, 0.0));
  double top = 0.0;
  for (std::size_t si = 0; si < series.size(); ++si) {
    std::size_t n = 0;
    for (double v : series[si].y) {
      if (!std::isfinite(v)) continue;
      auto b = static_cast<std::ptrdiff_t>(std::floor((v - lo) / (hi - lo) * bins));
      b = std::clamp<std::ptrdiff_t>(b, 0, static_cast<std::ptrdiff_t>(bins) - 1);
      freq[si][static_cast<std::size_t>(b)] += 1.0;
      ++n;
    }
    for (double& f : freq[si]) {
      f = n ? f / static_cast<double>(n) : 0.0;
      top = std::max(top, f);
    }
  }
  Range xr{lo, hi}, yr{0.0, top > 0 ? top * 1.05 : 1.0};
  Canvas canvas(axes, xr, yr);
  const double width = (canvas.px(hi) - canvas.px(lo)) / static_cast<double>(bins);
  for (std::size_t si = 0; si < series.size(); ++si) {
    for (std::size_t b = 0; b < bins; ++b) {
      const double x0 = canvas.px(lo + (hi - lo) * static_cast<double>(b) / bins);
      const double y0 = canvas.py(freq[si][b]);
      canvas.body() += fmt::format(
          "<rect x=\"{:.2f}\" y=\"{:.2f}\" width=\"{:.2f}\" height=\"{:.2f}\" fill=\"{}\" "
          "fill-opacity=\"0.45\"/>\n",
          x0, y0, width, canvas.py(0.0) - y0, color(si));
    }
    canvas.legend(si, series[si].name);
  }
  return canvas.finish();
}

std::string bars(const Axes& axes, const std::vector<std::string>& categories,
                 const std::vector<Series>& series) {
  Range yr{0.0, 0.0};
  for (const auto& s : series) {
    for (double v : s.y) yr.add(v);
  }
  yr.lo = std::min(yr.lo, 0.0);
  yr.hi = yr.hi > yr.lo ? yr.hi * 1.05 : yr.lo + 1.0;
  Range xr{0.0, static_cast<double>(std::max<std::size_t>(categories.size(), 1))};
  Axes plain = axes;
  plain.x_ticks = false;
  Canvas canvas(plain, xr, yr);
  const double group = Canvas::plot_w() / xr.hi;
  const double bar = group * 0.8 / static_cast<double>(std::max<std::size_t>(series.size(), 1));
  for (std::size_t c = 0; c < categories.size(); ++c) {
    canvas.body() += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"middle\">{}</text>\n",
                                 canvas.px(c + 0.5), kTop + Canvas::plot_h() + 30,
                                 escape(categories[c]));
    for (std::size_t si = 0; si < series.size(); ++si) {
      if (c >= series[si].y.size() || !std::isfinite(series[si].y[c])) continue;
      const double v = series[si].y[c];
      const double x0 = canvas.px(static_cast<double>(c)) + group * 0.1 + bar * si;
      const double y_top = canvas.py(std::max(v, 0.0)), y_base = canvas.py(std::min(v, 0.0));
      canvas.body() += fmt::format(
          "<rect x=\"{:.2f}\" y=\"{:.2f}\" width=\"{:.2f}\" height=\"{:.2f}\" fill=\"{}\"/>\n",
          x0, y_top, bar, y_base - y_top, color(si));
    }
  }
  for (std::size_t si = 0; si < series.size(); ++si) canvas.legend(si, series[si].name);
  return canvas.finish();
}

}  // namespace layerlens::svg
