#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "multist/error.hpp"

namespace multist {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Labels = std::vector<int>;

/// Pairwise summation; the reduction order depends only on the length.
inline double pairwise_sum(std::span<const double> xs) {
  if (xs.size() <= 8) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s;
  }
  const auto half = xs.size() / 2;
  return pairwise_sum(xs.first(half)) + pairwise_sum(xs.subspan(half));
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

inline void require_finite(const Matrix& m, const char* what) {
  require(m.allFinite(), ErrorCode::NonFinite, std::string(what) + " contains NaN or Inf");
}

/// N x M matrix of squared Euclidean distances between rows of `a` and `b`.
inline Matrix squared_distances(const Matrix& a, const Matrix& b) {
  Matrix d(a.rows(), b.rows());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < b.rows(); ++j) d(i, j) = (a.row(i) - b.row(j)).squaredNorm();
  return d;
}

/// Median; even counts average the two middle values.
inline double median(std::vector<double> xs) {
  if (xs.empty()) return 0.0;
  const auto mid = xs.size() / 2;
  std::nth_element(xs.begin(), xs.begin() + static_cast<std::ptrdiff_t>(mid), xs.end());
  const double hi = xs[mid];
  if (xs.size() % 2 == 1) return hi;
  const double lo = *std::max_element(xs.begin(), xs.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

/// Index of the maximum entry of a row; ties go to the lowest index.
template <class Row>
Index argmax_row(const Row& row) {
  Index best = 0;
  for (Index j = 1; j < row.size(); ++j)
    if (row(j) > row(best)) best = j;
  return best;
}

inline Labels argmax_rows(const Matrix& m) {
  Labels out(static_cast<std::size_t>(m.rows()));
  for (Index i = 0; i < m.rows(); ++i) out[static_cast<std::size_t>(i)] = static_cast<int>(argmax_row(m.row(i)));
  return out;
}

inline int count_labels(const Labels& labels) {
  int mx = -1;
  for (int l : labels) mx = std::max(mx, l);
  return mx + 1;
}

/// Dense labels 0..C-1 in order of first appearance.
inline Labels compact_labels(const Labels& labels) {
  std::vector<std::pair<int, int>> seen;
  Labels out;
  out.reserve(labels.size());
  for (int l : labels) {
    auto it = std::find_if(seen.begin(), seen.end(), [&](auto& p) { return p.first == l; });
    if (it == seen.end()) {
      seen.emplace_back(l, static_cast<int>(seen.size()));
      out.push_back(seen.back().second);
    } else {
      out.push_back(it->second);
    }
  }
  return out;
}

}  // namespace multist
