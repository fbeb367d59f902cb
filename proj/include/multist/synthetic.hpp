#pragma once

// Ground-truth generator: a hexagonal spot grid split into Voronoi domains,
// Poisson counts with per-domain marker genes, and an optional raster whose
// tissue color follows the domains.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "multist/dataset.hpp"
#include "multist/rng.hpp"

namespace multist {

struct SyntheticSpec {
  Index grid_rows = 16;
  Index grid_cols = 16;
  int domains = 4;
  Index genes = 100;
  Index markers_per_domain = 10;
  double noise = 0.5;
  double base_rate = 1.0;
  double marker_rate = 4.0;
  // Domains d and d' share a marker set when d % groups == d' % groups; 0 means
  // every domain has its own markers. The image still colors each domain apart.
  int expression_groups = 0;
  bool with_image = true;
  double spot_spacing = 24.0;  // image pixels between neighboring spots
  double scale_factor = 0.5;   // image pixels per coordinate unit
};

namespace detail {

inline const std::array<std::array<double, 3>, 8>& domain_palette() {
  static const std::array<std::array<double, 3>, 8> p{{{205, 105, 160},
                                                       {120, 70, 165},
                                                       {225, 150, 185},
                                                       {150, 45, 95},
                                                       {185, 125, 205},
                                                       {95, 55, 120},
                                                       {215, 95, 120},
                                                       {160, 110, 140}}};
  return p;
}

inline std::string padded(const char* prefix, Index i, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%0*lld", prefix, width, static_cast<long long>(i));
  return buf;
}

}  // namespace detail

struct SyntheticLayout {
  Matrix pixel_positions;  // N x 2 spot centers in image pixels
  Matrix sites;            // K x 2 Voronoi sites in image pixels
  Labels labels;
  int width = 0;
  int height = 0;
};

/// Spot centers on an offset-row hexagonal lattice and their Voronoi domains.
inline SyntheticLayout synthetic_layout(const SyntheticSpec& s, SeededRng& rng) {
  require(s.domains >= 2, ErrorCode::InvalidArgument, "need at least 2 domains");
  require(s.grid_rows >= 8 && s.grid_cols >= 8, ErrorCode::InvalidArgument, "grid must be at least 8x8");
  require(s.domains <= static_cast<int>(detail::domain_palette().size()), ErrorCode::InvalidArgument,
          "at most 8 domains are supported");
  SyntheticLayout L;
  const double margin = 2.0 * s.spot_spacing;
  const double dy = s.spot_spacing * std::sqrt(3.0) / 2.0;
  const Index n = s.grid_rows * s.grid_cols;
  L.pixel_positions.resize(n, 2);
  for (Index r = 0; r < s.grid_rows; ++r)
    for (Index c = 0; c < s.grid_cols; ++c) {
      const Index i = r * s.grid_cols + c;
      L.pixel_positions(i, 0) = margin + s.spot_spacing * (static_cast<double>(c) + 0.5 * static_cast<double>(r % 2));
      L.pixel_positions(i, 1) = margin + dy * static_cast<double>(r);
    }
  L.width = static_cast<int>(std::ceil(2.0 * margin + s.spot_spacing * (static_cast<double>(s.grid_cols) - 0.5)));
  L.height = static_cast<int>(std::ceil(2.0 * margin + dy * static_cast<double>(s.grid_rows - 1)));

  const double x0 = L.pixel_positions.col(0).minCoeff(), x1 = L.pixel_positions.col(0).maxCoeff();
  const double y0 = L.pixel_positions.col(1).minCoeff(), y1 = L.pixel_positions.col(1).maxCoeff();
  const double min_sep = 0.6 * std::min(x1 - x0, y1 - y0) / std::sqrt(static_cast<double>(s.domains));
  const Index min_size = n / (4 * s.domains);
  for (;;) {
    L.sites.resize(s.domains, 2);
    for (int k = 0; k < s.domains; ++k) {
      bool ok = false;
      while (!ok) {
        L.sites(k, 0) = rng.uniform(x0, x1);
        L.sites(k, 1) = rng.uniform(y0, y1);
        ok = true;
        for (int j = 0; j < k; ++j) ok = ok && (L.sites.row(k) - L.sites.row(j)).norm() >= min_sep;
      }
    }
    L.labels.assign(static_cast<std::size_t>(n), 0);
    std::vector<Index> sizes(static_cast<std::size_t>(s.domains), 0);
    for (Index i = 0; i < n; ++i) {
      Index best = 0;
      (L.sites.rowwise() - L.pixel_positions.row(i)).rowwise().squaredNorm().minCoeff(&best);
      L.labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
      ++sizes[static_cast<std::size_t>(best)];
    }
    if (*std::min_element(sizes.begin(), sizes.end()) >= min_size) break;
  }
  return L;
}

inline Dataset generate_synthetic(const SyntheticSpec& s, SeededRng& rng) {
  const int groups = s.expression_groups > 0 ? s.expression_groups : s.domains;
  require(s.genes >= s.markers_per_domain * groups, ErrorCode::InvalidArgument,
          "genes must cover every marker set");
  require(s.noise >= 0.0, ErrorCode::InvalidArgument, "noise must be non-negative");
  require(s.scale_factor > 0.0, ErrorCode::InvalidArgument, "scale_factor must be positive");

  const SyntheticLayout L = synthetic_layout(s, rng);
  const Index n = L.pixel_positions.rows();

  Dataset ds;
  ds.scale_factor = s.scale_factor;
  ds.coords = L.pixel_positions / s.scale_factor;
  ds.labels = L.labels;
  for (int k = 0; k < s.domains; ++k) ds.label_names.push_back("domain" + std::to_string(k));
  for (Index g = 0; g < s.genes; ++g) ds.expression.genes.push_back(detail::padded("gene", g, 3));
  for (Index i = 0; i < n; ++i) ds.expression.barcodes.push_back(detail::padded("spot", i, 4));

  // Rates jitter log-normally with sd `noise` (mean preserving), then Poisson.
  ds.expression.values.resize(n, s.genes);
  for (Index i = 0; i < n; ++i) {
    const int group = L.labels[static_cast<std::size_t>(i)] % groups;
    for (Index g = 0; g < s.genes; ++g) {
      const bool marker = g >= group * s.markers_per_domain && g < (group + 1) * s.markers_per_domain;
      const double rate = (marker ? s.marker_rate : s.base_rate) *
                          std::exp(s.noise * rng.normal() - 0.5 * s.noise * s.noise);
      ds.expression.values(i, g) = static_cast<double>(rng.poisson(rate));
    }
  }

  if (s.with_image) {
    RgbImage img(L.width, L.height, 255);
    const double x0 = L.pixel_positions.col(0).minCoeff() - s.spot_spacing;
    const double x1 = L.pixel_positions.col(0).maxCoeff() + s.spot_spacing;
    const double y0 = L.pixel_positions.col(1).minCoeff() - s.spot_spacing;
    const double y1 = L.pixel_positions.col(1).maxCoeff() + s.spot_spacing;
    const double sd = 40.0 * s.noise;
    const auto& palette = detail::domain_palette();
    for (int y = 0; y < L.height; ++y)
      for (int x = 0; x < L.width; ++x) {
        const bool tissue = x >= x0 && x <= x1 && y >= y0 && y <= y1;
        if (!tissue) continue;
        Index k = 0;
        (L.sites.rowwise() - RowVector((RowVector(2) << x, y).finished())).rowwise().squaredNorm().minCoeff(&k);
        for (int c = 0; c < 3; ++c) {
          const double v = palette[static_cast<std::size_t>(k)][static_cast<std::size_t>(c)] + sd * rng.normal();
          img.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::nearbyint(v), 0.0, 255.0));
        }
      }
    ds.image = std::move(img);
  }
  return ds;
}

}  // namespace multist
