#pragma once

#include "multist/linalg.hpp"

namespace multist {

struct PcaResult {
  Matrix scores;            // N x components
  Matrix components;        // G x components, unit columns
  Vector singular_values;   // length components
  RowVector mean;           // 1 x G
};

/// Projects column-centered data onto its leading right-singular vectors.
/// Each component's largest-magnitude loading is made positive; components
/// with numerically zero singular value are returned as zeros.
inline PcaResult pca_fit(const Matrix& data, Index components) {
  require_finite(data, "pca input");
  require(components >= 0 && components <= std::min(data.rows(), data.cols()), ErrorCode::InvalidArgument,
          "pca components must not exceed min(N, G)");
  PcaResult r;
  r.mean = data.colwise().mean();
  const Matrix centered = data.rowwise() - r.mean;
  Eigen::BDCSVD<Matrix> svd(centered, Eigen::ComputeThinV);
  const Vector& s = svd.singularValues();
  const double tol = s.size() > 0 ? s(0) * static_cast<double>(std::max(data.rows(), data.cols())) *
                                        std::numeric_limits<double>::epsilon()
                                  : 0.0;
  r.components = Matrix::Zero(data.cols(), components);
  r.singular_values = Vector::Zero(components);
  for (Index k = 0; k < components; ++k) {
    if (s(k) <= tol) continue;
    Vector v = svd.matrixV().col(k);
    Index big = 0;
    for (Index g = 1; g < v.size(); ++g)
      if (std::abs(v(g)) > std::abs(v(big))) big = g;
    if (v(big) < 0) v = -v;
    r.components.col(k) = v;
    r.singular_values(k) = s(k);
  }
  r.scores = centered * r.components;
  return r;
}

inline Matrix pca_fit_transform(const Matrix& data, Index components) { return pca_fit(data, components).scores; }

}  // namespace multist
