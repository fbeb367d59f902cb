#pragma once

#include <algorithm>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "multist/linalg.hpp"
#include "multist/optim.hpp"
#include "multist/rng.hpp"

namespace multist {

/// Returns the objective value and, when `grad` is non-null, writes the
/// analytic gradient into it.
using Objective = std::function<double(const Vector& params, Vector* grad)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<std::pair<std::string, double>> per_parameter_errors;
};

inline double grad_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Central differences on a random 5% subsample of the parameters (at least
/// 50 entries, or all of them when fewer exist).
inline GradCheckReport gradient_check(const Objective& objective, const Vector& params, double epsilon = 1e-4,
                                      const std::vector<ParamBlock>& blocks = {}, std::uint64_t seed = 0) {
  Vector analytic(params.size());
  objective(params, &analytic);

  const auto n = static_cast<std::size_t>(params.size());
  const std::size_t want = std::min(n, std::max<std::size_t>(50, (n + 19) / 20));
  SeededRng rng(seed);
  const auto picked = rng.sample_without_replacement(n, want);

  auto name_of = [&](std::size_t k) {
    std::size_t offset = 0;
    for (const auto& b : blocks) {
      const auto sz = static_cast<std::size_t>(b.size);
      if (k < offset + sz) return b.name + "[" + std::to_string(k - offset) + "]";
      offset += sz;
    }
    return "p[" + std::to_string(k) + "]";
  };

  GradCheckReport report;
  Vector probe = params;
  for (std::size_t k : picked) {
    const auto i = static_cast<Index>(k);
    probe(i) = params(i) + epsilon;
    const double up = objective(probe, nullptr);
    probe(i) = params(i) - epsilon;
    const double down = objective(probe, nullptr);
    probe(i) = params(i);
    const double numeric = (up - down) / (2.0 * epsilon);
    const double err = grad_rel_error(analytic(i), numeric);
    report.max_rel_error = std::max(report.max_rel_error, err);
    report.per_parameter_errors.emplace_back(name_of(k), err);
  }
  return report;
}

}  // namespace multist
