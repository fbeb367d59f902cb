#pragma once

#include <numbers>
#include <vector>

#include "multist/kmeans.hpp"

namespace multist {

struct GmmModel {
  int K = 0;
  Matrix means;       // K x d
  Matrix variances;   // K x d, diagonal
  Vector weights;     // K
  double log_likelihood = 0.0;
  std::vector<double> ll_trace;
  int iterations = 0;
};

struct GmmOptions {
  double variance_floor = 1e-6;
  double tol = 1e-6;   // on the per-sample log-likelihood improvement
  int max_iter = 200;
};

namespace detail {

/// Log of weight_k * N(x | mean_k, diag var_k) for every (sample, component).
inline Matrix gmm_log_joint(const GmmModel& m, const Matrix& data) {
  const Index d = data.cols();
  Matrix lj(data.rows(), m.K);
  for (int k = 0; k < m.K; ++k) {
    const RowVector var = m.variances.row(k);
    const double log_norm = -0.5 * (static_cast<double>(d) * std::log(2.0 * std::numbers::pi) +
                                    var.array().log().sum()) +
                            std::log(m.weights(k));
    for (Index i = 0; i < data.rows(); ++i) {
      const double q = ((data.row(i) - m.means.row(k)).array().square() / var.array()).sum();
      lj(i, k) = log_norm - 0.5 * q;
    }
  }
  return lj;
}

/// Row-normalizes exp(log_joint) in place; returns the total log-likelihood.
inline double normalize_log_rows(Matrix& lj) {
  double ll = 0.0;
  for (Index i = 0; i < lj.rows(); ++i) {
    const double mx = lj.row(i).maxCoeff();
    const double lse = mx + std::log((lj.row(i).array() - mx).exp().sum());
    lj.row(i) = (lj.row(i).array() - lse).exp();
    ll += lse;
  }
  return ll;
}

}  // namespace detail

/// Posterior responsibilities (N x K) under a fitted model.
inline Matrix gmm_posteriors(const GmmModel& m, const Matrix& data) {
  Matrix r = detail::gmm_log_joint(m, data);
  detail::normalize_log_rows(r);
  return r;
}

/// Diagonal-covariance EM initialized from k-means.
inline GmmModel gmm_em_fit(const Matrix& data, int K, SeededRng& rng, GmmOptions opts = {}) {
  require_finite(data, "gmm input");
  require(data.rows() >= K, ErrorCode::TooFewPoints, "gmm needs at least K points");
  const Index n = data.rows();
  const Index d = data.cols();
  const auto init = kmeans_fit(data, K, rng);

  const RowVector global_mean = data.colwise().mean();
  const RowVector global_var =
      ((data.rowwise() - global_mean).array().square().colwise().sum() / static_cast<double>(n))
          .max(opts.variance_floor);

  GmmModel m;
  m.K = K;
  m.means = init.centroids;
  m.variances = Matrix::Zero(K, d);
  m.weights = Vector::Zero(K);
  for (Index i = 0; i < n; ++i) {
    const int l = init.labels[static_cast<std::size_t>(i)];
    m.variances.row(l) += (data.row(i) - m.means.row(l)).array().square().matrix();
    m.weights(l) += 1.0;
  }
  for (int k = 0; k < K; ++k) {
    if (m.weights(k) > 1.0)
      m.variances.row(k) /= m.weights(k);
    else
      m.variances.row(k) = global_var;
    m.variances.row(k) = m.variances.row(k).array().max(opts.variance_floor).matrix();
  }
  m.weights /= static_cast<double>(n);

  bool reseeded = false;
  double prev = -std::numeric_limits<double>::infinity();
  for (int it = 0; it < opts.max_iter; ++it) {
    Matrix resp = detail::gmm_log_joint(m, data);
    const double ll = detail::normalize_log_rows(resp);
    require(std::isfinite(ll), ErrorCode::NonFinite, "gmm log-likelihood is not finite");
    m.ll_trace.push_back(ll);
    m.log_likelihood = ll;
    m.iterations = it + 1;
    if (it > 0 && (ll - prev) / static_cast<double>(n) < opts.tol) break;
    prev = ll;

    // M step
    const Vector mass = resp.colwise().sum();
    for (int k = 0; k < K; ++k) {
      if (mass(k) < 1e-12) {
        require(!reseeded, ErrorCode::DegenerateCluster,
                "component " + std::to_string(k) + " collapsed after re-seeding");
        reseeded = true;
        Index worst = 0;
        Matrix lj = detail::gmm_log_joint(m, data);
        Vector best(n);
        for (Index i = 0; i < n; ++i) best(i) = lj.row(i).maxCoeff();
        best.minCoeff(&worst);
        m.means.row(k) = data.row(worst);
        m.variances.row(k) = global_var;
        m.weights(k) = 1.0 / static_cast<double>(K);
        m.weights /= m.weights.sum();
        prev = -std::numeric_limits<double>::infinity();
        continue;
      }
      const RowVector mu = (resp.col(k).transpose() * data) / mass(k);
      RowVector var = RowVector::Zero(d);
      for (Index i = 0; i < n; ++i) var += resp(i, k) * (data.row(i) - mu).array().square().matrix();
      var /= mass(k);
      m.means.row(k) = mu;
      m.variances.row(k) = var.array().max(opts.variance_floor).matrix();
      m.weights(k) = mass(k) / static_cast<double>(n);
    }
    m.weights /= m.weights.sum();
  }
  return m;
}

}  // namespace multist
