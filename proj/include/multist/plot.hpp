#pragma once

#include <algorithm>
#include <array>
#include <fstream>
#include <string>

#include "multist/csv.hpp"
#include "multist/linalg.hpp"

namespace multist {

/// Scatter of spots at their coordinates, one circle per spot, colored by label
/// with a 10-color cycling palette. The y axis points down as in image space.
inline std::string domains_svg(const Matrix& coords, const Labels& labels, double width = 600.0) {
  static constexpr std::array<const char*, 10> palette = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                                          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  require(coords.rows() == static_cast<Index>(labels.size()), ErrorCode::RowMisalignment,
          "one label per spot is required");
  const double pad = 10.0;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (coords.rows() > 0) {
    x0 = coords.col(0).minCoeff();
    x1 = coords.col(0).maxCoeff();
    y0 = coords.col(1).minCoeff();
    y1 = coords.col(1).maxCoeff();
  }
  const double span = std::max({x1 - x0, y1 - y0, 1e-12});
  const double s = (width - 2 * pad) / span;
  const double height = (y1 - y0) * s + 2 * pad;
  const double r = std::max(1.0, 0.5 * s * span / std::sqrt(std::max<double>(1.0, static_cast<double>(coords.rows()))));

  std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + csv::format_double(width) + "\" height=\"" +
                    csv::format_double(height) + "\">\n";
  for (Index i = 0; i < coords.rows(); ++i) {
    const int l = labels[static_cast<std::size_t>(i)];
    const auto color = palette[static_cast<std::size_t>(((l % 10) + 10) % 10)];
    out += "<circle cx=\"" + csv::format_double(pad + (coords(i, 0) - x0) * s) + "\" cy=\"" +
           csv::format_double(pad + (coords(i, 1) - y0) * s) + "\" r=\"" + csv::format_double(r) + "\" fill=\"" +
           color + "\"/>\n";
  }
  out += "</svg>\n";
  return out;
}

inline void write_domains_svg(const std::string& path, const Matrix& coords, const Labels& labels) {
  std::ofstream out(path);
  require(out.good(), ErrorCode::MissingFile, "cannot write " + path);
  out << domains_svg(coords, labels);
}

}  // namespace multist
