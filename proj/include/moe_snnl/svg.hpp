#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace moe_snnl::svg {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

struct Line {
  double slope = 0.0;
  double intercept = 0.0;
  std::string label = "fit";
};

struct Axes {
  std::string title;
  std::string x_label;
  std::string y_label;
};

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                 "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  return colors[i % 10];
}

namespace detail {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

struct Frame {
  double x0, x1, y0, y1;
  static constexpr double width = 640, height = 480, left = 70, right = 150, top = 40, bottom = 60;

  double px(double x) const { return left + (x - x0) / (x1 - x0) * (width - left - right); }
  double py(double y) const { return height - bottom - (y - y0) / (y1 - y0) * (height - top - bottom); }
};

inline Frame frame_for(const std::vector<Series>& series, const std::optional<Line>& line) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    for (double v : s.x) x0 = std::min(x0, v), x1 = std::max(x1, v);
    for (double v : s.y) y0 = std::min(y0, v), y1 = std::max(y1, v);
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (line) {
    for (double x : {x0, x1}) {
      const double y = line->slope * x + line->intercept;
      y0 = std::min(y0, y), y1 = std::max(y1, y);
    }
  }
  auto pad = [](double& lo, double& hi) {
    double span = hi - lo;
    if (!(span > 0)) span = std::max(1.0, std::abs(lo));
    lo -= 0.05 * span;
    hi += 0.05 * span;
  };
  pad(x0, x1);
  pad(y0, y1);
  return {x0, x1, y0, y1};
}

inline void header(std::ostringstream& out, const Frame& f, const Axes& axes) {
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << Frame::width << "\" height=\"" << Frame::height
      << "\" viewBox=\"0 0 " << Frame::width << ' ' << Frame::height << "\">\n";
  out << "<rect x=\"0\" y=\"0\" width=\"" << Frame::width << "\" height=\"" << Frame::height << "\" fill=\"white\"/>\n";
  out << "<text x=\"" << Frame::width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << escape(axes.title)
      << "</text>\n";
  const double bx = Frame::left, by = Frame::top, bw = Frame::width - Frame::left - Frame::right,
               bh = Frame::height - Frame::top - Frame::bottom;
  out << "<rect x=\"" << bx << "\" y=\"" << by << "\" width=\"" << bw << "\" height=\"" << bh
      << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double xv = f.x0 + (f.x1 - f.x0) * t / 4.0, yv = f.y0 + (f.y1 - f.y0) * t / 4.0;
    out << "<text x=\"" << num(f.px(xv)) << "\" y=\"" << Frame::height - Frame::bottom + 18
        << "\" text-anchor=\"middle\" font-size=\"11\">" << num(xv) << "</text>\n";
    out << "<text x=\"" << Frame::left - 6 << "\" y=\"" << num(f.py(yv) + 4)
        << "\" text-anchor=\"end\" font-size=\"11\">" << (std::abs(yv) < 1e-2 && yv != 0 ? std::to_string(yv) : num(yv))
        << "</text>\n";
  }
  out << "<text x=\"" << bx + bw / 2 << "\" y=\"" << Frame::height - 16 << "\" text-anchor=\"middle\" font-size=\"13\">"
      << escape(axes.x_label) << "</text>\n";
  out << "<text x=\"18\" y=\"" << by + bh / 2 << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 18 "
      << by + bh / 2 << ")\">" << escape(axes.y_label) << "</text>\n";
}

inline void legend(std::ostringstream& out, std::size_t index, const std::string& label, const char* color) {
  const double x = Frame::width - Frame::right + 12, y = Frame::top + 16 + 18.0 * static_cast<double>(index);
  out << "<text x=\"" << x + 14 << "\" y=\"" << y + 4 << "\" font-size=\"12\" fill=\"" << color << "\">"
      << escape(label) << "</text>\n";
}

inline void finish(std::ostringstream& out, const std::filesystem::path& path) {
  out << "</svg>\n";
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write SVG: " + path.string());
  f << out.str();
}

}  // namespace detail

/// Scatter plot, one <path> per series (each point a small square sub-path),
/// plus one <path> for the optional fitted line.
inline void write_scatter(const std::filesystem::path& path, const std::vector<Series>& series, const Axes& axes,
                          const std::optional<Line>& line = std::nullopt) {
  const auto f = detail::frame_for(series, line);
  std::ostringstream out;
  detail::header(out, f, axes);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    if (s.x.size() != s.y.size()) throw std::invalid_argument("svg series '" + s.label + "' has mismatched x/y");
    out << "<path fill=\"" << palette(i) << "\" fill-opacity=\"0.7\" d=\"";
    for (std::size_t k = 0; k < s.x.size(); ++k)
      out << 'M' << detail::num(f.px(s.x[k]) - 2.5) << ' ' << detail::num(f.py(s.y[k]) - 2.5) << "h5v5h-5Z";
    out << "\"/>\n";
    detail::legend(out, i, s.label, palette(i));
  }
  if (line) {
    const double ya = line->slope * f.x0 + line->intercept, yb = line->slope * f.x1 + line->intercept;
    out << "<path fill=\"none\" stroke=\"black\" stroke-dasharray=\"6 4\" stroke-width=\"1.5\" d=\"M"
        << detail::num(f.px(f.x0)) << ' ' << detail::num(f.py(ya)) << 'L' << detail::num(f.px(f.x1)) << ' '
        << detail::num(f.py(yb)) << "\"/>\n";
    detail::legend(out, series.size(), line->label, "black");
  }
  detail::finish(out, path);
}

/// Polyline chart, one <path> per series.
inline void write_lines(const std::filesystem::path& path, const std::vector<Series>& series, const Axes& axes) {
  const auto f = detail::frame_for(series, std::nullopt);
  std::ostringstream out;
  detail::header(out, f, axes);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    out << "<path fill=\"none\" stroke=\"" << palette(i) << "\" stroke-width=\"1.5\" d=\"";
    for (std::size_t k = 0; k < s.x.size(); ++k)
      out << (k == 0 ? 'M' : 'L') << detail::num(f.px(s.x[k])) << ' ' << detail::num(f.py(s.y[k]));
    out << "\"/>\n";
    detail::legend(out, i, s.label, palette(i));
  }
  detail::finish(out, path);
}

/// Box plot (min, quartiles, median, max) for each group, one <path> per group.
inline void write_box(const std::filesystem::path& path, const std::vector<Series>& groups, const Axes& axes) {
  std::vector<Series> placed;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    Series s{groups[i].label, {}, groups[i].y};
    s.x.assign(s.y.size(), static_cast<double>(i));
    placed.push_back(std::move(s));
  }
  auto f = detail::frame_for(placed, std::nullopt);
  f.x0 = -0.75;
  f.x1 = static_cast<double>(groups.size()) - 0.25;
  std::ostringstream out;
  detail::header(out, f, axes);
  auto quantile = [](std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const auto& y = groups[i].y;
    if (y.empty()) continue;
    const double cx = f.px(static_cast<double>(i)), w = 30;
    const double mn = f.py(quantile(y, 0)), q1 = f.py(quantile(y, .25)), md = f.py(quantile(y, .5)),
                 q3 = f.py(quantile(y, .75)), mx = f.py(quantile(y, 1));
    using detail::num;
    out << "<path fill=\"none\" stroke=\"" << palette(i) << "\" stroke-width=\"1.5\" d=\"M" << num(cx - w) << ' '
        << num(q1) << "L" << num(cx + w) << ' ' << num(q1) << "L" << num(cx + w) << ' ' << num(q3) << "L"
        << num(cx - w) << ' ' << num(q3) << "Z"
        << "M" << num(cx - w) << ' ' << num(md) << "L" << num(cx + w) << ' ' << num(md) << "M" << num(cx) << ' '
        << num(q1) << "L" << num(cx) << ' ' << num(mn) << "M" << num(cx) << ' ' << num(q3) << "L" << num(cx) << ' '
        << num(mx) << "\"/>\n";
    detail::legend(out, i, groups[i].label, palette(i));
  }
  detail::finish(out, path);
}

}  // namespace moe_snnl::svg
