#pragma once

// Minimal SVG charts. Every mark carries its series, x label and value as
// data-* attributes so the figures can be checked against the tables they
// were drawn from.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace rbc::plot {

struct Series {
  std::string name;
  std::vector<std::optional<double>> values;  // one per x label
};

namespace detail {

inline const char* palette(std::size_t i) {
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"};
  return kColors[i % (sizeof kColors / sizeof *kColors)];
}

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

inline std::string num(double v) {
  std::ostringstream ss;
  ss << std::setprecision(17) << v;
  return ss.str();
}

inline std::string px(double v) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(2) << v;
  return ss.str();
}

struct Frame {
  double width = 640, height = 400, left = 60, right = 160, top = 40, bottom = 50;
  double plot_w() const { return width - left - right; }
  double plot_h() const { return height - top - bottom; }
  double y_of(double v) const { return top + plot_h() * (1.0 - std::clamp(v, 0.0, 1.0)); }
};

inline void open_svg(std::ostringstream& s, const Frame& f, const std::string& title, const std::string& y_label) {
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.width << "\" height=\"" << f.height << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << px(f.width / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title)
    << "</text>\n";
  for (int i = 0; i <= 5; ++i) {
    const double v = i / 5.0, y = f.y_of(v);
    s << "<line x1=\"" << px(f.left) << "\" x2=\"" << px(f.left + f.plot_w()) << "\" y1=\"" << px(y) << "\" y2=\""
      << px(y) << "\" stroke=\"#ddd\"/>\n";
    s << "<text x=\"" << px(f.left - 6) << "\" y=\"" << px(y + 4) << "\" text-anchor=\"end\" font-size=\"11\">"
      << px(v) << "</text>\n";
  }
  s << "<text x=\"14\" y=\"" << px(f.top + f.plot_h() / 2) << "\" font-size=\"12\" transform=\"rotate(-90 14 "
    << px(f.top + f.plot_h() / 2) << ")\" text-anchor=\"middle\">" << escape(y_label) << "</text>\n";
}

inline void legend(std::ostringstream& s, const Frame& f, const std::vector<Series>& series) {
  for (std::size_t i = 0; i < series.size(); ++i) {
    const double y = f.top + 10 + 18.0 * static_cast<double>(i);
    const double x = f.left + f.plot_w() + 16;
    s << "<rect x=\"" << px(x) << "\" y=\"" << px(y - 9) << "\" width=\"12\" height=\"12\" fill=\"" << palette(i)
      << "\"/>\n";
    s << "<text x=\"" << px(x + 18) << "\" y=\"" << px(y + 1) << "\" font-size=\"12\">" << escape(series[i].name)
      << "</text>\n";
  }
}

}  // namespace detail

/// One polyline per series over categorical x positions (e.g. steps).
inline std::string line_chart(const std::string& title, const std::vector<std::string>& x_labels,
                              const std::vector<Series>& series, const std::string& y_label = "mIoU") {
  using namespace detail;
  Frame f;
  std::ostringstream s;
  open_svg(s, f, title, y_label);
  const std::size_t n = x_labels.size();
  auto x_of = [&](std::size_t i) {
    return n <= 1 ? f.left + f.plot_w() / 2 : f.left + f.plot_w() * static_cast<double>(i) / static_cast<double>(n - 1);
  };
  for (std::size_t i = 0; i < n; ++i)
    s << "<text x=\"" << px(x_of(i)) << "\" y=\"" << px(f.top + f.plot_h() + 18)
      << "\" text-anchor=\"middle\" font-size=\"11\">" << escape(x_labels[i]) << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& se = series[k];
    std::string points;
    for (std::size_t i = 0; i < n && i < se.values.size(); ++i)
      if (se.values[i]) points += px(x_of(i)) + "," + px(f.y_of(*se.values[i])) + " ";
    s << "<polyline fill=\"none\" stroke=\"" << palette(k) << "\" stroke-width=\"2\" points=\"" << points
      << "\" data-series=\"" << escape(se.name) << "\"/>\n";
    for (std::size_t i = 0; i < n && i < se.values.size(); ++i) {
      if (!se.values[i]) continue;
      s << "<circle class=\"point\" cx=\"" << px(x_of(i)) << "\" cy=\"" << px(f.y_of(*se.values[i]))
        << "\" r=\"3.5\" fill=\"" << palette(k) << "\" data-series=\"" << escape(se.name) << "\" data-x=\""
        << escape(x_labels[i]) << "\" data-value=\"" << num(*se.values[i]) << "\"/>\n";
    }
  }
  legend(s, f, series);
  s << "</svg>\n";
  return s.str();
}

/// Grouped bars: one group per x label, one bar per series.
inline std::string bar_chart(const std::string& title, const std::vector<std::string>& x_labels,
                             const std::vector<Series>& series, const std::string& y_label = "IoU") {
  using namespace detail;
  Frame f;
  f.width = std::max(640.0, 80.0 + 40.0 * static_cast<double>(x_labels.size() * std::max<std::size_t>(1, series.size())));
  std::ostringstream s;
  open_svg(s, f, title, y_label);
  const double group_w = f.plot_w() / static_cast<double>(std::max<std::size_t>(1, x_labels.size()));
  const double bar_w = group_w * 0.8 / static_cast<double>(std::max<std::size_t>(1, series.size()));
  for (std::size_t i = 0; i < x_labels.size(); ++i) {
    const double gx = f.left + group_w * static_cast<double>(i);
    s << "<text x=\"" << px(gx + group_w / 2) << "\" y=\"" << px(f.top + f.plot_h() + 18)
      << "\" text-anchor=\"middle\" font-size=\"11\">" << escape(x_labels[i]) << "</text>\n";
    for (std::size_t k = 0; k < series.size(); ++k) {
      if (i >= series[k].values.size() || !series[k].values[i]) continue;
      const double v = *series[k].values[i];
      const double x = gx + group_w * 0.1 + bar_w * static_cast<double>(k), y = f.y_of(v);
      s << "<rect class=\"bar\" x=\"" << px(x) << "\" y=\"" << px(y) << "\" width=\"" << px(bar_w) << "\" height=\""
        << px(f.top + f.plot_h() - y) << "\" fill=\"" << palette(k) << "\" data-series=\"" << escape(series[k].name)
        << "\" data-x=\"" << escape(x_labels[i]) << "\" data-value=\"" << num(v) << "\"/>\n";
    }
  }
  legend(s, f, series);
  s << "</svg>\n";
  return s.str();
}

}  // namespace rbc::plot
