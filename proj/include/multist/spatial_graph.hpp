#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "multist/csv.hpp"
#include "multist/linalg.hpp"
#include "multist/log.hpp"

namespace multist {

using NeighborLists = std::vector<std::vector<Index>>;

/// Undirected KNN graph with self-loops, stored densely.
struct SpatialGraph {
  Index n = 0;
  Index k = 0;
  std::vector<std::pair<Index, Index>> edges;  // i <= j, self-loops included
  Matrix adjacency;                            // binary A
  Matrix normalized;                           // D^{-1/2} A D^{-1/2}
  Vector degrees;
  NeighborLists knn;                           // directed k nearest neighbors
};

/// Kernel used by label diffusion; nonzero only on directed KNN pairs.
struct KernelWeights {
  Matrix W;
  double sigma = 0.0;
  NeighborLists neighbors;
};

/// Copies `coords` and nudges exact duplicates apart by 1e-9 per repeat.
inline Matrix deduplicate_coords(const Matrix& coords) {
  Matrix out = coords;
  std::map<std::pair<double, double>, int> seen;
  for (Index i = 0; i < out.rows(); ++i) {
    const auto key = std::make_pair(coords(i, 0), coords(i, 1));
    const int count = seen[key]++;
    if (count > 0) {
      out(i, 0) += 1e-9 * count;
      log::warn("duplicate coordinate at spot " + std::to_string(i) + " perturbed by 1e-9");
    }
  }
  return out;
}

/// Each spot's k nearest other spots by Euclidean distance; ties go to the lower index.
inline NeighborLists knn_indices(const Matrix& coords, Index k) {
  const Index n = coords.rows();
  require(k >= 1, ErrorCode::InvalidArgument, "k must be at least 1");
  require(n > k, ErrorCode::TooFewSpots, "need more than k=" + std::to_string(k) + " spots, got " + std::to_string(n));
  NeighborLists out(static_cast<std::size_t>(n));
  std::vector<std::pair<double, Index>> cand;
  for (Index i = 0; i < n; ++i) {
    cand.clear();
    for (Index j = 0; j < n; ++j)
      if (j != i) cand.emplace_back((coords.row(i) - coords.row(j)).squaredNorm(), j);
    std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
    auto& nb = out[static_cast<std::size_t>(i)];
    for (Index r = 0; r < k; ++r) nb.push_back(cand[static_cast<std::size_t>(r)].second);
  }
  return out;
}

inline Matrix normalize_adjacency(const Matrix& adjacency) {
  const Vector deg = adjacency.rowwise().sum();
  Matrix out = Matrix::Zero(adjacency.rows(), adjacency.cols());
  for (Index i = 0; i < adjacency.rows(); ++i)
    for (Index j = 0; j < adjacency.cols(); ++j)
      if (adjacency(i, j) != 0.0) out(i, j) = adjacency(i, j) / std::sqrt(deg(i) * deg(j));
  return out;
}

inline SpatialGraph build_knn_graph(const Matrix& coords, Index k) {
  require(coords.cols() == 2, ErrorCode::DimensionMismatch, "coords must be N x 2");
  require_finite(coords, "coords");
  const Matrix xy = deduplicate_coords(coords);
  SpatialGraph g;
  g.n = xy.rows();
  g.k = k;
  g.knn = knn_indices(xy, k);
  g.adjacency = Matrix::Identity(g.n, g.n);
  for (Index i = 0; i < g.n; ++i) {
    for (Index j : g.knn[static_cast<std::size_t>(i)]) {
      g.adjacency(i, j) = 1.0;
      g.adjacency(j, i) = 1.0;
    }
  }
  for (Index i = 0; i < g.n; ++i)
    for (Index j = i; j < g.n; ++j)
      if (g.adjacency(i, j) != 0.0) g.edges.emplace_back(i, j);
  g.degrees = g.adjacency.rowwise().sum();
  g.normalized = normalize_adjacency(g.adjacency);
  return g;
}

/// Median length over all directed KNN pairs.
inline double median_neighbor_distance(const Matrix& coords, const NeighborLists& nb) {
  std::vector<double> d;
  for (std::size_t i = 0; i < nb.size(); ++i)
    for (Index j : nb[i]) d.push_back((coords.row(static_cast<Index>(i)) - coords.row(j)).norm());
  return median(std::move(d));
}

/// W_ij = exp(-|x_i - x_j|^2 / sigma^2) for j among i's k nearest neighbors.
inline KernelWeights build_gaussian_kernel(const Matrix& coords, Index k) {
  KernelWeights kw;
  const Matrix xy = deduplicate_coords(coords);
  kw.neighbors = knn_indices(xy, k);
  kw.sigma = median_neighbor_distance(xy, kw.neighbors);
  require(kw.sigma > 0.0, ErrorCode::ZeroBandwidth, "all neighbor distances are zero");
  const double s2 = kw.sigma * kw.sigma;
  kw.W = Matrix::Zero(xy.rows(), xy.rows());
  for (Index i = 0; i < xy.rows(); ++i)
    for (Index j : kw.neighbors[static_cast<std::size_t>(i)])
      kw.W(i, j) = std::exp(-(xy.row(i) - xy.row(j)).squaredNorm() / s2);
  return kw;
}

/// `i,j,weight` rows of the normalized adjacency, one per undirected edge.
inline void write_edges_csv(const std::string& path, const SpatialGraph& g) {
  std::ofstream out(path);
  require(out.good(), ErrorCode::MissingFile, "cannot write " + path);
  out << "i,j,weight\n";
  for (const auto& [i, j] : g.edges) out << i << ',' << j << ',' << csv::format_double(g.normalized(i, j)) << '\n';
}

}  // namespace multist
