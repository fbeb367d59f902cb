#pragma once

#include <limits>
#include <vector>

#include "multist/linalg.hpp"
#include "multist/rng.hpp"

namespace multist {

struct KMeansResult {
  Matrix centroids;            // K x d
  Labels labels;               // length N
  double sse = 0.0;
  int iterations = 0;
  std::vector<double> sse_trace;  // SSE after every Lloyd update, best restart only
};

struct KMeansOptions {
  int restarts = 5;
  int max_iter = 300;
};

namespace detail {

inline void kmeans_assign(const Matrix& data, const Matrix& centroids, Labels& labels, Vector& dist) {
  for (Index i = 0; i < data.rows(); ++i) {
    Index best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (Index j = 0; j < centroids.rows(); ++j) {
      const double d = (data.row(i) - centroids.row(j)).squaredNorm();
      if (d < bd) {
        bd = d;
        best = j;
      }
    }
    labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
    dist(i) = bd;
  }
}

inline Matrix kmeanspp_seed(const Matrix& data, int K, SeededRng& rng) {
  const Index n = data.rows();
  Matrix c(K, data.cols());
  c.row(0) = data.row(static_cast<Index>(rng.uniform_index(static_cast<std::uint64_t>(n))));
  Vector d2(n);
  for (Index i = 0; i < n; ++i) d2(i) = (data.row(i) - c.row(0)).squaredNorm();
  for (int k = 1; k < K; ++k) {
    const double total = d2.sum();
    Index pick = n - 1;
    if (total <= 0.0) {
      pick = static_cast<Index>(rng.uniform_index(static_cast<std::uint64_t>(n)));
    } else {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      for (Index i = 0; i < n; ++i) {
        acc += d2(i);
        if (acc > target) {
          pick = i;
          break;
        }
      }
    }
    c.row(k) = data.row(pick);
    for (Index i = 0; i < n; ++i) d2(i) = std::min(d2(i), (data.row(i) - c.row(k)).squaredNorm());
  }
  return c;
}

inline KMeansResult lloyd(const Matrix& data, Matrix centroids, int max_iter) {
  const Index n = data.rows();
  const Index K = centroids.rows();
  KMeansResult r;
  r.labels.assign(static_cast<std::size_t>(n), -1);
  Vector dist(n);
  Labels prev;
  for (int it = 0; it < max_iter; ++it) {
    prev = r.labels;
    kmeans_assign(data, centroids, r.labels, dist);

    // Re-seed empty clusters at the farthest point owned by a cluster of size > 1.
    std::vector<Index> counts(static_cast<std::size_t>(K), 0);
    for (int l : r.labels) ++counts[static_cast<std::size_t>(l)];
    for (Index j = 0; j < K; ++j) {
      if (counts[static_cast<std::size_t>(j)] > 0) continue;
      Index far = -1;
      for (Index i = 0; i < n; ++i) {
        if (counts[static_cast<std::size_t>(r.labels[static_cast<std::size_t>(i)])] < 2) continue;
        if (far < 0 || dist(i) > dist(far)) far = i;
      }
      if (far < 0) break;
      --counts[static_cast<std::size_t>(r.labels[static_cast<std::size_t>(far)])];
      r.labels[static_cast<std::size_t>(far)] = static_cast<int>(j);
      counts[static_cast<std::size_t>(j)] = 1;
      dist(far) = 0.0;
    }

    centroids.setZero();
    for (Index i = 0; i < n; ++i) centroids.row(r.labels[static_cast<std::size_t>(i)]) += data.row(i);
    for (Index j = 0; j < K; ++j)
      if (counts[static_cast<std::size_t>(j)] > 0) centroids.row(j) /= static_cast<double>(counts[static_cast<std::size_t>(j)]);

    double sse = 0.0;
    for (Index i = 0; i < n; ++i) sse += (data.row(i) - centroids.row(r.labels[static_cast<std::size_t>(i)])).squaredNorm();
    r.sse_trace.push_back(sse);
    r.sse = sse;
    r.iterations = it + 1;
    if (r.labels == prev) break;
  }
  r.centroids = std::move(centroids);
  return r;
}

}  // namespace detail

/// k-means++ seeded Lloyd iterations; the restart with the lowest SSE wins.
inline KMeansResult kmeans_fit(const Matrix& data, int K, SeededRng& rng, KMeansOptions opts = {}) {
  require_finite(data, "kmeans input");
  require(K >= 1, ErrorCode::InvalidArgument, "kmeans needs K >= 1");
  require(data.rows() >= K, ErrorCode::TooFewPoints,
          "kmeans needs at least K=" + std::to_string(K) + " points, got " + std::to_string(data.rows()));
  KMeansResult best;
  best.sse = std::numeric_limits<double>::infinity();
  for (int r = 0; r < std::max(1, opts.restarts); ++r) {
    KMeansResult run = detail::lloyd(data, detail::kmeanspp_seed(data, K, rng), opts.max_iter);
    if (run.sse < best.sse) best = std::move(run);
  }
  return best;
}

}  // namespace multist
