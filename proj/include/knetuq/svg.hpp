#pragma once

#include "knetuq/common.hpp"
#include "knetuq/io.hpp"

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

namespace knetuq {

// Thin rendering layer over the CSV outputs: fixed-size line chart with axis
// ticks and a text legend. NaN samples break the polyline.
struct SvgSeries {
  std::string label;
  std::string color = "#1f77b4";
  bool dashed = false;
  std::vector<double> x, y;
};

inline void write_svg_chart(const std::string& path,
                            const std::vector<SvgSeries>& series,
                            const std::string& x_label,
                            const std::string& y_label) {
  const double width = 760, height = 480;
  const double left = 64, right = 24, top = 28, bottom = 48;

  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  }
  if (xmin > xmax) { xmin = 0; xmax = 1; }
  if (ymin > ymax) { ymin = 0; ymax = 1; }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  const double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;

  auto px = [&](double x) {
    return left + (x - xmin) / (xmax - xmin) * (width - left - right);
  };
  auto py = [&](double y) {
    return height - bottom - (y - ymin) / (ymax - ymin) * (height - top - bottom);
  };

  std::ofstream out = open_out(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\" viewBox=\"0 0 " << width << " "
      << height << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

  // axes with 6 ticks each
  out << "<g stroke=\"#333\" stroke-width=\"1\" font-size=\"11\" "
         "font-family=\"sans-serif\">\n";
  out << "<line x1=\"" << left << "\" y1=\"" << height - bottom << "\" x2=\""
      << width - right << "\" y2=\"" << height - bottom << "\"/>\n";
  out << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left
      << "\" y2=\"" << height - bottom << "\"/>\n";
  for (int k = 0; k <= 5; ++k) {
    const double xv = xmin + (xmax - xmin) * k / 5.0;
    const double yv = ymin + (ymax - ymin) * k / 5.0;
    out << "<line x1=\"" << px(xv) << "\" y1=\"" << height - bottom
        << "\" x2=\"" << px(xv) << "\" y2=\"" << height - bottom + 4 << "\"/>\n";
    out << "<text x=\"" << px(xv) << "\" y=\"" << height - bottom + 16
        << "\" text-anchor=\"middle\" stroke=\"none\" fill=\"#333\">"
        << static_cast<int>(std::round(xv * 100) ) / 100.0 << "</text>\n";
    out << "<line x1=\"" << left - 4 << "\" y1=\"" << py(yv) << "\" x2=\""
        << left << "\" y2=\"" << py(yv) << "\"/>\n";
    out << "<text x=\"" << left - 8 << "\" y=\"" << py(yv) + 4
        << "\" text-anchor=\"end\" stroke=\"none\" fill=\"#333\">"
        << static_cast<int>(std::round(yv * 100)) / 100.0 << "</text>\n";
  }
  out << "<text x=\"" << (left + width - right) / 2 << "\" y=\"" << height - 10
      << "\" text-anchor=\"middle\" stroke=\"none\" fill=\"#333\">" << x_label
      << "</text>\n";
  out << "<text x=\"14\" y=\"" << (top + height - bottom) / 2
      << "\" text-anchor=\"middle\" stroke=\"none\" fill=\"#333\" "
         "transform=\"rotate(-90 14 "
      << (top + height - bottom) / 2 << ")\">" << y_label << "</text>\n";
  out << "</g>\n";

  for (const auto& s : series) {
    out << "<path fill=\"none\" stroke=\"" << s.color
        << "\" stroke-width=\"1.5\"";
    if (s.dashed) out << " stroke-dasharray=\"6 4\"";
    out << " d=\"";
    bool pen_down = false;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) {
        pen_down = false;
        continue;
      }
      out << (pen_down ? " L" : " M") << px(s.x[i]) << " " << py(s.y[i]);
      pen_down = true;
    }
    out << "\"/>\n";
  }

  double ly = top + 8;
  for (const auto& s : series) {
    out << "<line x1=\"" << width - right - 150 << "\" y1=\"" << ly
        << "\" x2=\"" << width - right - 120 << "\" y2=\"" << ly
        << "\" stroke=\"" << s.color << "\" stroke-width=\"1.5\""
        << (s.dashed ? " stroke-dasharray=\"6 4\"" : "") << "/>\n";
    out << "<text x=\"" << width - right - 114 << "\" y=\"" << ly + 4
        << "\" font-size=\"11\" font-family=\"sans-serif\" fill=\"#333\">"
        << s.label << "</text>\n";
    ly += 16;
  }
  out << "</svg>\n";
}

}  // namespace knetuq
