#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "multist/csv.hpp"
#include "multist/error.hpp"

namespace multist {

/// Per-epoch loss table; the first column is the epoch number.
struct LossTrace {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  void add(std::vector<double> row) {
    require(row.size() == columns.size(), ErrorCode::DimensionMismatch, "loss row width differs from the header");
    rows.push_back(std::move(row));
  }

  std::vector<double> column(const std::string& name) const {
    std::size_t c = 0;
    while (c < columns.size() && columns[c] != name) ++c;
    require(c < columns.size(), ErrorCode::InvalidArgument, "no loss column " + name);
    std::vector<double> out;
    for (const auto& r : rows) out.push_back(r[c]);
    return out;
  }

  bool empty() const { return rows.empty(); }

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    require(out.good(), ErrorCode::MissingFile, "cannot write " + path);
    for (std::size_t c = 0; c < columns.size(); ++c) out << (c ? "," : "") << columns[c];
    out << '\n';
    for (const auto& r : rows) {
      for (std::size_t c = 0; c < r.size(); ++c) {
        if (c) out << ',';
        if (c == 0)
          out << static_cast<long long>(r[c]);
        else
          out << csv::format_double(r[c]);
      }
      out << '\n';
    }
  }
};

}  // namespace multist
