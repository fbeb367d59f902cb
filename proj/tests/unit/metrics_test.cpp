#include <gtest/gtest.h>

#include <algorithm>
#include <functional>
#include <cmath>
#include <map>
#include <numeric>
#include <vector>

#include "multist/metrics.hpp"

using namespace multist;

namespace {

// All labelings of n points into at most kmax clusters, in canonical form
// (first occurrence order), i.e. one representative per partition.
std::vector<Labels> canonical_labelings(int n, int kmax) {
  std::vector<Labels> out;
  Labels cur(static_cast<std::size_t>(n), 0);
  std::function<void(int, int)> rec = [&](int i, int used) {
    if (i == n) {
      out.push_back(cur);
      return;
    }
    for (int c = 0; c <= std::min(used, kmax - 1); ++c) {
      cur[static_cast<std::size_t>(i)] = c;
      rec(i + 1, std::max(used, c + 1));
    }
  };
  rec(0, 0);
  return out;
}

// Pair counting over all C(n,2) pairs.
double oracle_ari(const Labels& p, const Labels& t) {
  if (p == t) return 1.0;  // canonical inputs: equal vectors = same partition
  double a = 0, b = 0, c = 0, d = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    for (std::size_t j = i + 1; j < p.size(); ++j) {
      const bool sp = p[i] == p[j], st = t[i] == t[j];
      if (sp && st) a += 1;
      else if (sp) b += 1;
      else if (st) c += 1;
      else d += 1;
    }
  const double den = (a + b) * (b + d) + (a + c) * (c + d);
  return den == 0.0 ? 0.0 : 2.0 * (a * d - b * c) / den;
}

std::map<int, double> counts(const Labels& l) {
  std::map<int, double> m;
  for (int x : l) m[x] += 1;
  return m;
}

double entropy(const Labels& l) {
  double h = 0;
  const double n = static_cast<double>(l.size());
  for (auto [k, c] : counts(l)) h -= c / n * std::log(c / n);
  return h;
}

double mi(const Labels& p, const Labels& t) {
  std::map<std::pair<int, int>, double> joint;
  for (std::size_t i = 0; i < p.size(); ++i) joint[{p[i], t[i]}] += 1;
  const auto cp = counts(p), ct = counts(t);
  const double n = static_cast<double>(p.size());
  double s = 0;
  for (auto [k, c] : joint) s += c / n * std::log(n * c / (cp.at(k.first) * ct.at(k.second)));
  return s;
}

// E[MI] as the average over every permutation of the truth vector.
double emi_by_permutation(const Labels& p, Labels t) {
  std::sort(t.begin(), t.end());
  double total = 0, count = 0;
  do {
    total += mi(p, t);
    count += 1;
  } while (std::next_permutation(t.begin(), t.end()));
  return total / count;
}

double binom(int n, int k) {
  if (k < 0 || k > n) return 0.0;
  double r = 1;
  for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

// Hypergeometric sum with exact integer binomials.
double emi_by_binomials(const Labels& p, const Labels& t) {
  const int n = static_cast<int>(p.size());
  double e = 0;
  for (auto [ki, a] : counts(p))
    for (auto [kj, b] : counts(t)) {
      const int ai = static_cast<int>(a), bj = static_cast<int>(b);
      for (int nij = 1; nij <= std::min(ai, bj); ++nij) {
        const double prob = binom(ai, nij) * binom(n - ai, bj - nij) / binom(n, bj);
        if (prob == 0.0) continue;
        e += prob * nij / n * std::log(static_cast<double>(n) * nij / (a * b));
      }
    }
  return e;
}

double oracle_ami(const Labels& p, const Labels& t, bool permute) {
  if (p == t) return 1.0;
  const double e = permute ? emi_by_permutation(p, t) : emi_by_binomials(p, t);
  return (mi(p, t) - e) / (0.5 * (entropy(p) + entropy(t)) - e);
}

// H(P|T) by grouping predicted labels inside every true class.
double oracle_completeness(const Labels& p, const Labels& t) {
  const double hp = entropy(p);
  if (hp == 0.0) return 1.0;
  std::map<int, Labels> groups;
  for (std::size_t i = 0; i < p.size(); ++i) groups[t[i]].push_back(p[i]);
  double hc = 0;
  for (const auto& [k, members] : groups) hc += static_cast<double>(members.size()) / p.size() * entropy(members);
  return 1.0 - hc / hp;
}

}  // namespace

TEST(Metrics, SpecExamples) {
  const Labels truth{0, 0, 1, 1}, pred{0, 1, 0, 1};
  EXPECT_NEAR(metric_ari(pred, truth), -0.5, 1e-12);
  EXPECT_NEAR(metric_completeness(pred, truth), 0.0, 1e-12);
  EXPECT_DOUBLE_EQ(metric_ari(truth, truth), 1.0);
  EXPECT_DOUBLE_EQ(metric_ami(truth, truth), 1.0);
  EXPECT_DOUBLE_EQ(metric_completeness(truth, truth), 1.0);
  // permuted relabeling
  EXPECT_DOUBLE_EQ(metric_ari(Labels{1, 1, 0, 0}, truth), 1.0);
  EXPECT_DOUBLE_EQ(metric_ami(Labels{5, 5, 2, 2}, truth), 1.0);
  // single predicted cluster
  EXPECT_NEAR(metric_ami(Labels{0, 0, 0, 0}, truth), 0.0, 1e-12);
  EXPECT_DOUBLE_EQ(metric_completeness(Labels{0, 0, 0, 0}, truth), 1.0);
  // merging two true classes keeps completeness 1, splitting one lowers it
  EXPECT_DOUBLE_EQ(metric_completeness(Labels{0, 0, 0, 0, 1, 1}, Labels{0, 0, 1, 1, 2, 2}), 1.0);
  EXPECT_LT(metric_completeness(Labels{0, 1, 2, 2}, truth), 1.0);
}

TEST(Metrics, AmiSixPointHandCase) {
  const Labels p{0, 0, 0, 1, 1, 2}, t{0, 0, 1, 1, 2, 2};
  EXPECT_NEAR(metric_ami(p, t), oracle_ami(p, t, true), 1e-9);
  EXPECT_NEAR(metric_ami(p, t), oracle_ami(p, t, false), 1e-9);
}

TEST(Metrics, ExhaustiveUpToSixPointsWithPermutationEmi) {
  for (int n = 1; n <= 6; ++n) {
    const auto all = canonical_labelings(n, 3);
    for (const auto& p : all)
      for (const auto& t : all) {
        ASSERT_NEAR(metric_ari(p, t), oracle_ari(p, t), 1e-9) << "n=" << n;
        ASSERT_NEAR(metric_ami(p, t), oracle_ami(p, t, true), 1e-9) << "n=" << n;
        ASSERT_NEAR(metric_completeness(p, t), oracle_completeness(p, t), 1e-9) << "n=" << n;
      }
  }
}

TEST(Metrics, ExhaustiveSevenAndEightPoints) {
  for (int n = 7; n <= 8; ++n) {
    const auto all = canonical_labelings(n, 3);
    for (const auto& p : all)
      for (const auto& t : all) {
        ASSERT_NEAR(metric_ari(p, t), oracle_ari(p, t), 1e-9);
        ASSERT_NEAR(metric_ami(p, t), oracle_ami(p, t, false), 1e-9);
        ASSERT_NEAR(metric_completeness(p, t), oracle_completeness(p, t), 1e-9);
      }
  }
}

TEST(Metrics, PermutationInvarianceAndBounds) {
  const auto all = canonical_labelings(6, 3);
  const std::vector<int> perm{2, 0, 1};
  for (std::size_t a = 0; a < all.size(); a += 7)
    for (std::size_t b = 0; b < all.size(); b += 5) {
      Labels pp = all[a];
      for (int& x : pp) x = perm[static_cast<std::size_t>(x)] + 10;
      EXPECT_NEAR(metric_ari(pp, all[b]), metric_ari(all[a], all[b]), 1e-12);
      EXPECT_NEAR(metric_ami(pp, all[b]), metric_ami(all[a], all[b]), 1e-12);
      EXPECT_NEAR(metric_completeness(all[b], pp), metric_completeness(all[b], all[a]), 1e-12);
      EXPECT_LE(metric_ari(all[a], all[b]), 1.0 + 1e-12);
      const double c = metric_completeness(all[a], all[b]);
      EXPECT_GE(c, -1e-12);
      EXPECT_LE(c, 1.0 + 1e-12);
    }
}

TEST(Metrics, ReportFields) {
  const auto r = evaluate_labels(Labels{0, 0, 1, 2}, Labels{1, 1, 0, 0});
  EXPECT_EQ(r.n_spots, 4);
  EXPECT_EQ(r.n_clusters_pred, 3);
  EXPECT_EQ(r.n_clusters_true, 2);
  EXPECT_DOUBLE_EQ(r.completeness, metric_completeness(Labels{0, 0, 1, 2}, Labels{1, 1, 0, 0}));
  EXPECT_THROW(metric_ari(Labels{0, 1}, Labels{0}), Error);
}
