#pragma once

#include <algorithm>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "multist/csv.hpp"
#include "multist/dataset.hpp"
#include "multist/log.hpp"
#include "multist/pca.hpp"

namespace multist {

struct PreprocessStep {
  std::string name;
  std::vector<std::pair<std::string, double>> params;

  double param(const std::string& key) const {
    for (const auto& [k, v] : params)
      if (k == key) return v;
    throw Error(ErrorCode::InvalidArgument, "preprocess step " + name + " has no parameter " + key);
  }
  bool operator==(const PreprocessStep&) const = default;
};

using PreprocessManifest = std::vector<PreprocessStep>;

struct PreprocessedMatrix {
  Matrix values;
  std::vector<std::string> gene_index;
  PreprocessManifest manifest;
  std::vector<Index> kept_spots;  // rows of the raw matrix that survived
};

struct PreprocessOptions {
  double min_cells = 50;
  double min_total = 10;
  double target_sum = 1e6;
  bool log1p = true;
  Index n_top_hvgs = 2000;
  int hvg_bins = 20;
  bool scale = true;
  double scale_clip = 10.0;
  bool pca = true;
  Index pca_components = 200;
};

/// Keeps genes detected in at least `min_cells` spots with at least `min_total` counts.
inline ExpressionMatrix filter_genes(const ExpressionMatrix& expr, double min_cells = 50, double min_total = 10) {
  ExpressionMatrix out;
  out.barcodes = expr.barcodes;
  std::vector<Index> keep;
  for (Index g = 0; g < expr.num_genes(); ++g) {
    const auto col = expr.values.col(g);
    const double detected = static_cast<double>((col.array() > 0.0).count());
    if (detected >= min_cells && col.sum() >= min_total) keep.push_back(g);
  }
  require(!keep.empty(), ErrorCode::EmptyResult, "no genes pass the expression filter");
  out.values.resize(expr.spots(), static_cast<Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) {
    out.values.col(static_cast<Index>(k)) = expr.values.col(keep[k]);
    out.genes.push_back(expr.genes[static_cast<std::size_t>(keep[k])]);
  }
  return out;
}

struct CpmResult {
  ExpressionMatrix matrix;
  std::vector<Index> kept_spots;
};

/// Scales each spot to `target_sum` total counts. Spots with zero total are dropped.
inline CpmResult normalize_cpm(const ExpressionMatrix& expr, double target_sum = 1e6) {
  CpmResult r;
  r.matrix.genes = expr.genes;
  for (Index i = 0; i < expr.spots(); ++i) {
    if (expr.values.row(i).sum() > 0.0)
      r.kept_spots.push_back(i);
    else
      log::warn("dropping spot " + expr.barcodes[static_cast<std::size_t>(i)] + " with zero total count");
  }
  require(!r.kept_spots.empty(), ErrorCode::EmptyResult, "every spot has zero total count");
  r.matrix.values.resize(static_cast<Index>(r.kept_spots.size()), expr.num_genes());
  for (std::size_t k = 0; k < r.kept_spots.size(); ++k) {
    const auto row = expr.values.row(r.kept_spots[k]);
    r.matrix.values.row(static_cast<Index>(k)) = row * (target_sum / row.sum());
    r.matrix.barcodes.push_back(expr.barcodes[static_cast<std::size_t>(r.kept_spots[k])]);
  }
  return r;
}

inline void log1p_inplace(Matrix& m) { m = m.unaryExpr([](double x) { return std::log1p(x); }); }

/// Per-gene variance standardized within equal-width mean-expression bins.
/// Zero-variance genes score -inf so they rank below every variable gene.
inline std::vector<double> hvg_scores(const Matrix& values, int bins = 20) {
  const Index g = values.cols();
  const double n = static_cast<double>(values.rows());
  std::vector<double> mean(static_cast<std::size_t>(g)), var(static_cast<std::size_t>(g));
  for (Index j = 0; j < g; ++j) {
    const double mu = values.col(j).mean();
    mean[static_cast<std::size_t>(j)] = mu;
    var[static_cast<std::size_t>(j)] = (values.col(j).array() - mu).square().sum() / n;
  }
  const double lo = *std::min_element(mean.begin(), mean.end());
  const double hi = *std::max_element(mean.begin(), mean.end());
  const double width = (hi - lo) / bins;
  std::vector<int> bin(static_cast<std::size_t>(g));
  for (std::size_t j = 0; j < bin.size(); ++j)
    bin[j] = width > 0.0 ? std::min(bins - 1, static_cast<int>((mean[j] - lo) / width)) : 0;

  std::vector<double> bsum(static_cast<std::size_t>(bins), 0.0), bsq(static_cast<std::size_t>(bins), 0.0),
      bcnt(static_cast<std::size_t>(bins), 0.0);
  for (std::size_t j = 0; j < bin.size(); ++j) {
    const auto b = static_cast<std::size_t>(bin[j]);
    bsum[b] += var[j];
    bsq[b] += var[j] * var[j];
    bcnt[b] += 1.0;
  }
  std::vector<double> score(static_cast<std::size_t>(g));
  for (std::size_t j = 0; j < score.size(); ++j) {
    if (var[j] <= 0.0) {
      score[j] = -std::numeric_limits<double>::infinity();
      continue;
    }
    const auto b = static_cast<std::size_t>(bin[j]);
    const double m = bsum[b] / bcnt[b];
    const double sd = std::sqrt(std::max(0.0, bsq[b] / bcnt[b] - m * m));
    score[j] = sd > 0.0 ? (var[j] - m) / sd : 0.0;
  }
  return score;
}

/// Top `n_top` genes by `hvg_scores`, kept in their original column order.
inline PreprocessedMatrix select_hvgs(const ExpressionMatrix& expr, Index n_top = 2000, int bins = 20) {
  require(n_top >= 0, ErrorCode::InvalidArgument, "n_top must be non-negative");
  const Index keep_n = std::min(n_top, expr.num_genes());
  const auto score = hvg_scores(expr.values, bins);
  std::vector<Index> order(static_cast<std::size_t>(expr.num_genes()));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return score[static_cast<std::size_t>(a)] > score[static_cast<std::size_t>(b)];
  });
  order.resize(static_cast<std::size_t>(keep_n));
  std::sort(order.begin(), order.end());
  PreprocessedMatrix r;
  r.values.resize(expr.spots(), keep_n);
  for (std::size_t k = 0; k < order.size(); ++k) {
    r.values.col(static_cast<Index>(k)) = expr.values.col(order[k]);
    r.gene_index.push_back(expr.genes[static_cast<std::size_t>(order[k])]);
  }
  r.manifest.push_back({"select_hvgs", {{"n_top", static_cast<double>(n_top)}, {"bins", static_cast<double>(bins)}}});
  return r;
}

/// Per-gene z-scoring with clipping; constant genes become zero.
inline void zscale_inplace(Matrix& m, double clip) {
  const double n = static_cast<double>(m.rows());
  for (Index j = 0; j < m.cols(); ++j) {
    const double mu = m.col(j).mean();
    const double sd = std::sqrt((m.col(j).array() - mu).square().sum() / n);
    if (sd > 0.0)
      m.col(j) = ((m.col(j).array() - mu) / sd).max(-clip).min(clip).matrix();
    else
      m.col(j).setZero();
  }
}

inline PreprocessManifest make_manifest(const PreprocessOptions& o) {
  PreprocessManifest m;
  m.push_back({"filter_genes", {{"min_cells", o.min_cells}, {"min_total", o.min_total}}});
  m.push_back({"normalize_cpm", {{"target_sum", o.target_sum}}});
  if (o.log1p) m.push_back({"log1p", {}});
  m.push_back({"select_hvgs", {{"n_top", static_cast<double>(o.n_top_hvgs)}, {"bins", static_cast<double>(o.hvg_bins)}}});
  if (o.scale) m.push_back({"scale", {{"clip", o.scale_clip}}});
  if (o.pca) m.push_back({"pca", {{"components", static_cast<double>(o.pca_components)}}});
  return m;
}

/// Applies the manifest's steps, in order, to raw counts.
inline PreprocessedMatrix replay_manifest(const ExpressionMatrix& raw, const PreprocessManifest& manifest) {
  ExpressionMatrix cur = raw;
  std::vector<Index> kept(static_cast<std::size_t>(raw.spots()));
  std::iota(kept.begin(), kept.end(), Index{0});
  PreprocessedMatrix out;
  for (const auto& step : manifest) {
    if (step.name == "filter_genes") {
      cur = filter_genes(cur, step.param("min_cells"), step.param("min_total"));
    } else if (step.name == "normalize_cpm") {
      auto r = normalize_cpm(cur, step.param("target_sum"));
      std::vector<Index> k2;
      for (Index i : r.kept_spots) k2.push_back(kept[static_cast<std::size_t>(i)]);
      kept = std::move(k2);
      cur = std::move(r.matrix);
    } else if (step.name == "log1p") {
      log1p_inplace(cur.values);
    } else if (step.name == "select_hvgs") {
      auto r = select_hvgs(cur, static_cast<Index>(step.param("n_top")), static_cast<int>(step.param("bins")));
      cur.values = std::move(r.values);
      cur.genes = std::move(r.gene_index);
    } else if (step.name == "scale") {
      zscale_inplace(cur.values, step.param("clip"));
    } else if (step.name == "pca") {
      const Index want = static_cast<Index>(step.param("components"));
      const Index c = std::min({want, cur.spots(), cur.num_genes()});
      cur.values = pca_fit_transform(cur.values, c);
      cur.genes.clear();
      for (Index k = 0; k < c; ++k) cur.genes.push_back("PC" + std::to_string(k + 1));
    } else {
      throw Error(ErrorCode::InvalidArgument, "unknown preprocess step " + step.name);
    }
  }
  require_finite(cur.values, "preprocessed matrix");
  out.values = std::move(cur.values);
  out.gene_index = std::move(cur.genes);
  out.manifest = manifest;
  out.kept_spots = std::move(kept);
  return out;
}

/// filter -> CPM -> log1p -> HVG -> scale -> PCA.
inline PreprocessedMatrix preprocess(const ExpressionMatrix& raw, const PreprocessOptions& opts = {}) {
  return replay_manifest(raw, make_manifest(opts));
}

/// One step per line: `name key=value ...`.
inline std::string manifest_to_text(const PreprocessManifest& m) {
  std::ostringstream os;
  for (const auto& s : m) {
    os << s.name;
    for (const auto& [k, v] : s.params) os << ' ' << k << '=' << csv::format_double(v);
    os << '\n';
  }
  return os.str();
}

inline PreprocessManifest manifest_from_text(const std::string& text) {
  PreprocessManifest m;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    PreprocessStep step;
    if (!(ls >> step.name)) continue;
    std::string kv;
    while (ls >> kv) {
      const auto eq = kv.find('=');
      require(eq != std::string::npos, ErrorCode::MalformedRow, "bad manifest entry " + kv);
      step.params.emplace_back(kv.substr(0, eq), csv::parse_double(kv.substr(eq + 1), "manifest", 0));
    }
    m.push_back(std::move(step));
  }
  return m;
}

}  // namespace multist
