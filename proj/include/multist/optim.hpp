#pragma once

#include <string>
#include <vector>

#include "multist/linalg.hpp"

namespace multist {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(Vector& params, const Vector& grad) {
    if (m_.size() != params.size()) {
      m_ = Vector::Zero(params.size());
      v_ = Vector::Zero(params.size());
      t_ = 0;
    }
    ++t_;
    m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
    v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (Index k = 0; k < params.size(); ++k)
      params(k) -= cfg_.lr * (m_(k) / c1) / (std::sqrt(v_(k) / c2) + cfg_.eps);
  }

  long steps() const { return t_; }

 private:
  AdamConfig cfg_;
  Vector m_, v_;
  long t_ = 0;
};

/// Concatenates every tensor a weight struct exposes through `visit`.
template <class Weights>
Vector flatten(const Weights& w) {
  Index total = 0;
  w.visit([&](const char*, const Matrix& m) { total += m.size(); });
  Vector out(total);
  Index at = 0;
  w.visit([&](const char*, const Matrix& m) {
    out.segment(at, m.size()) = Eigen::Map<const Vector>(m.data(), m.size());
    at += m.size();
  });
  return out;
}

template <class Weights>
void unflatten(Weights& w, const Vector& flat) {
  Index at = 0;
  w.visit([&](const char*, Matrix& m) {
    Eigen::Map<Vector>(m.data(), m.size()) = flat.segment(at, m.size());
    at += m.size();
  });
  require(at == flat.size(), ErrorCode::DimensionMismatch, "flat parameter vector has the wrong length");
}

struct ParamBlock {
  std::string name;
  Index size = 0;
};

template <class Weights>
std::vector<ParamBlock> param_blocks(const Weights& w, const std::string& prefix = "") {
  std::vector<ParamBlock> out;
  w.visit([&](const char* name, const Matrix& m) { out.push_back({prefix + name, m.size()}); });
  return out;
}

}  // namespace multist
