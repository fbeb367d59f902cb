#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "multist/error.hpp"
#include "multist/linalg.hpp"

namespace multist {

/// Counts n_ij of points with pred cluster i and true class j.
struct Contingency {
  std::vector<std::vector<double>> n;
  std::vector<double> row_sums, col_sums;
  double total = 0.0;
};

inline Contingency contingency(const Labels& pred, const Labels& truth) {
  require(pred.size() == truth.size(), ErrorCode::DimensionMismatch, "label vectors differ in length");
  const Labels p = compact_labels(pred), t = compact_labels(truth);
  Contingency c;
  const int rp = count_labels(p), ct = count_labels(t);
  c.n.assign(static_cast<std::size_t>(rp), std::vector<double>(static_cast<std::size_t>(ct), 0.0));
  c.row_sums.assign(static_cast<std::size_t>(rp), 0.0);
  c.col_sums.assign(static_cast<std::size_t>(ct), 0.0);
  for (std::size_t k = 0; k < p.size(); ++k) {
    c.n[static_cast<std::size_t>(p[k])][static_cast<std::size_t>(t[k])] += 1.0;
    c.row_sums[static_cast<std::size_t>(p[k])] += 1.0;
    c.col_sums[static_cast<std::size_t>(t[k])] += 1.0;
  }
  c.total = static_cast<double>(p.size());
  return c;
}

namespace detail {

inline double choose2(double x) { return x * (x - 1.0) / 2.0; }

inline double entropy_of(const std::vector<double>& counts, double total) {
  double h = 0.0;
  for (double c : counts)
    if (c > 0.0) h -= (c / total) * std::log(c / total);
  return h;
}

inline double mutual_information(const Contingency& c) {
  double mi = 0.0;
  for (std::size_t i = 0; i < c.n.size(); ++i)
    for (std::size_t j = 0; j < c.n[i].size(); ++j) {
      const double nij = c.n[i][j];
      if (nij > 0.0) mi += (nij / c.total) * std::log(c.total * nij / (c.row_sums[i] * c.col_sums[j]));
    }
  return std::max(0.0, mi);
}

/// E[MI] under the hypergeometric permutation model.
inline double expected_mutual_information(const Contingency& c) {
  const double n = c.total;
  double emi = 0.0;
  for (double a : c.row_sums)
    for (double b : c.col_sums) {
      const double lo = std::max(1.0, a + b - n);
      const double hi = std::min(a, b);
      for (double nij = lo; nij <= hi; nij += 1.0) {
        const double log_p = std::lgamma(a + 1) + std::lgamma(b + 1) + std::lgamma(n - a + 1) + std::lgamma(n - b + 1) -
                             std::lgamma(n + 1) - std::lgamma(nij + 1) - std::lgamma(a - nij + 1) -
                             std::lgamma(b - nij + 1) - std::lgamma(n - a - b + nij + 1);
        emi += (nij / n) * std::log(n * nij / (a * b)) * std::exp(log_p);
      }
    }
  return emi;
}

}  // namespace detail

/// True when the labelings agree up to renaming of the labels.
inline bool same_partition(const Labels& a, const Labels& b) {
  return a.size() == b.size() && compact_labels(a) == compact_labels(b);
}

inline double metric_ari(const Labels& pred, const Labels& truth) {
  const Contingency c = contingency(pred, truth);
  if (same_partition(pred, truth)) return 1.0;
  double index = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (const auto& row : c.n)
    for (double v : row) index += detail::choose2(v);
  for (double a : c.row_sums) sum_a += detail::choose2(a);
  for (double b : c.col_sums) sum_b += detail::choose2(b);
  const double expected = sum_a * sum_b / detail::choose2(c.total);
  const double max_index = 0.5 * (sum_a + sum_b);
  if (max_index == expected) return 0.0;
  return (index - expected) / (max_index - expected);
}

/// Adjusted mutual information with the arithmetic-mean normalizer.
inline double metric_ami(const Labels& pred, const Labels& truth) {
  const Contingency c = contingency(pred, truth);
  if (same_partition(pred, truth)) return 1.0;
  const double mi = detail::mutual_information(c);
  const double emi = detail::expected_mutual_information(c);
  const double h_pred = detail::entropy_of(c.row_sums, c.total);
  const double h_true = detail::entropy_of(c.col_sums, c.total);
  double denom = 0.5 * (h_pred + h_true) - emi;
  const double tiny = std::numeric_limits<double>::epsilon();
  if (denom < 0.0)
    denom = std::min(denom, -tiny);
  else
    denom = std::max(denom, tiny);
  return (mi - emi) / denom;
}

/// 1 - H(pred | true) / H(pred): every true class falls inside one predicted
/// cluster. 1 when the prediction has a single cluster.
inline double metric_completeness(const Labels& pred, const Labels& truth) {
  const Contingency c = contingency(pred, truth);
  const double h_pred = detail::entropy_of(c.row_sums, c.total);
  if (h_pred == 0.0) return 1.0;
  double h_cond = 0.0;  // H(pred | true)
  for (std::size_t i = 0; i < c.n.size(); ++i)
    for (std::size_t j = 0; j < c.n[i].size(); ++j) {
      const double nij = c.n[i][j];
      if (nij > 0.0) h_cond -= (nij / c.total) * std::log(nij / c.col_sums[j]);
    }
  return 1.0 - h_cond / h_pred;
}

struct MetricsReport {
  double ari = 0.0;
  double ami = 0.0;
  double completeness = 0.0;
  Index n_spots = 0;
  int n_clusters_pred = 0;
  int n_clusters_true = 0;
};

inline MetricsReport evaluate_labels(const Labels& pred, const Labels& truth) {
  MetricsReport r;
  r.ari = metric_ari(pred, truth);
  r.ami = metric_ami(pred, truth);
  r.completeness = metric_completeness(pred, truth);
  r.n_spots = static_cast<Index>(pred.size());
  r.n_clusters_pred = count_labels(compact_labels(pred));
  r.n_clusters_true = count_labels(compact_labels(truth));
  return r;
}

}  // namespace multist
