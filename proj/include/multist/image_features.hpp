#pragma once

// Histology branch: patch extraction around each spot, quality scoring and
// target selection, foreground stain normalization, patch featurization and
// Gaussian KNN smoothing of the per-spot features.

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "multist/image.hpp"
#include "multist/kmeans.hpp"
#include "multist/linalg.hpp"
#include "multist/spatial_graph.hpp"

namespace multist {

inline constexpr int kPatchSize = 64;
inline constexpr int kPatchHalf = 32;
inline constexpr double kForegroundLuminance = 0.85 * 255.0;
inline constexpr double kStainSigmaFloor = 1e-3;

struct Patch {
  Index spot = 0;
  RgbImage pixels;  // kPatchSize x kPatchSize
  double cx = 0.0;  // scaled center in image pixels
  double cy = 0.0;
};

inline bool is_foreground(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  return luminance(r, g, b) < kForegroundLuminance;
}

/// Mirror index about the borders without repeating the edge pixel
/// (-1 -> 1, n -> n-2); periodic beyond one full reflection.
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  int m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - m;
}

/// One 64x64 patch per spot, centered on pixel (floor(gamma*y), floor(gamma*x))
/// which lands at patch index (32, 32).
inline std::vector<Patch> extract_patches(const RgbImage& image, const Matrix& coords, double gamma) {
  require(gamma > 0.0, ErrorCode::InvalidArgument, "scale factor must be positive");
  require(coords.cols() == 2, ErrorCode::DimensionMismatch, "coords must be N x 2");
  require(image.width > 0 && image.height > 0, ErrorCode::InvalidArgument, "empty image");
  std::vector<Patch> out;
  out.reserve(static_cast<std::size_t>(coords.rows()));
  for (Index i = 0; i < coords.rows(); ++i) {
    Patch p;
    p.spot = i;
    p.cx = gamma * coords(i, 0);
    p.cy = gamma * coords(i, 1);
    const double fx = std::floor(p.cx), fy = std::floor(p.cy);
    require(fx >= 0 && fx < image.width && fy >= 0 && fy < image.height, ErrorCode::CenterOutsideImage,
            "spot " + std::to_string(i) + " maps outside the image");
    const int x0 = static_cast<int>(fx) - kPatchHalf, y0 = static_cast<int>(fy) - kPatchHalf;
    p.pixels = RgbImage(kPatchSize, kPatchSize);
    for (int y = 0; y < kPatchSize; ++y) {
      const int sy = reflect_index(y0 + y, image.height);
      for (int x = 0; x < kPatchSize; ++x) {
        const int sx = reflect_index(x0 + x, image.width);
        for (int c = 0; c < 3; ++c) p.pixels.at(y, x, c) = image.at(sy, sx, c);
      }
    }
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Quality scoring

struct PatchQuality {
  double coverage = 0.0;         // foreground fraction
  double contrast = 0.0;         // luminance std
  double texture = 0.0;          // mean gradient magnitude of luminance
  double color_diversity = 0.0;  // mean of per-channel std
};

inline Matrix luminance_map(const RgbImage& img) {
  Matrix l(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) l(y, x) = luminance(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
  return l;
}

/// Mean forward-difference gradient magnitude over pixels with both neighbors.
inline double mean_gradient(const Matrix& l) {
  if (l.rows() < 2 || l.cols() < 2) return 0.0;
  double s = 0.0;
  for (Index y = 0; y + 1 < l.rows(); ++y)
    for (Index x = 0; x + 1 < l.cols(); ++x) s += std::hypot(l(y, x + 1) - l(y, x), l(y + 1, x) - l(y, x));
  return s / static_cast<double>((l.rows() - 1) * (l.cols() - 1));
}

inline double population_std(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

inline PatchQuality patch_quality(const Patch& p) {
  const RgbImage& img = p.pixels;
  const std::size_t n = static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height);
  std::array<std::vector<double>, 3> ch;
  std::vector<double> lum;
  lum.reserve(n);
  std::size_t fg = 0;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const auto r = img.at(y, x, 0), g = img.at(y, x, 1), b = img.at(y, x, 2);
      ch[0].push_back(r);
      ch[1].push_back(g);
      ch[2].push_back(b);
      lum.push_back(luminance(r, g, b));
      fg += is_foreground(r, g, b);
    }
  PatchQuality q;
  q.coverage = static_cast<double>(fg) / static_cast<double>(n);
  q.contrast = population_std(lum);
  q.texture = mean_gradient(luminance_map(img));
  q.color_diversity = (population_std(ch[0]) + population_std(ch[1]) + population_std(ch[2])) / 3.0;
  return q;
}

/// 0.4 coverage + 0.2 (contrast + texture + color diversity), each component
/// min-max scaled over the slide (a constant component scales to 0).
inline std::vector<double> score_patches(const std::vector<Patch>& patches) {
  std::vector<PatchQuality> q;
  q.reserve(patches.size());
  for (const auto& p : patches) q.push_back(patch_quality(p));
  auto scaled = [&](double PatchQuality::*m) {
    std::vector<double> v;
    for (const auto& x : q) v.push_back(x.*m);
    if (v.empty()) return v;
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    const double a = *lo, b = *hi;
    for (double& x : v) x = b > a ? (x - a) / (b - a) : 0.0;
    return v;
  };
  const auto cov = scaled(&PatchQuality::coverage), con = scaled(&PatchQuality::contrast),
             tex = scaled(&PatchQuality::texture), div = scaled(&PatchQuality::color_diversity);
  std::vector<double> s(q.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = 0.4 * cov[i] + 0.2 * con[i] + 0.2 * tex[i] + 0.2 * div[i];
  return s;
}

// ---------------------------------------------------------------------------
// Stain statistics and normalization

struct StainStats {
  std::array<double, 3> mu{};
  std::array<double, 3> sigma{};
};

/// Accumulates foreground pixel moments across one or more rasters.
class ForegroundMoments {
 public:
  void add(const RgbImage& img) {
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        const auto r = img.at(y, x, 0), g = img.at(y, x, 1), b = img.at(y, x, 2);
        if (!is_foreground(r, g, b)) continue;
        const double v[3] = {double(r), double(g), double(b)};
        for (int c = 0; c < 3; ++c) {
          sum_[c] += v[c];
          sq_[c] += v[c] * v[c];
        }
        ++count_;
      }
  }

  std::size_t count() const { return count_; }

  /// Pooled mean and std; sigma is floored at 1e-3.
  StainStats stats() const {
    require(count_ > 0, ErrorCode::DegenerateStats, "no foreground pixels");
    StainStats s;
    const double n = static_cast<double>(count_);
    for (int c = 0; c < 3; ++c) {
      s.mu[c] = sum_[c] / n;
      s.sigma[c] = std::max(kStainSigmaFloor, std::sqrt(std::max(0.0, sq_[c] / n - s.mu[c] * s.mu[c])));
    }
    return s;
  }

 private:
  std::array<double, 3> sum_{}, sq_{};
  std::size_t count_ = 0;
};

inline StainStats foreground_stats(const RgbImage& img) {
  ForegroundMoments m;
  m.add(img);
  return m.stats();
}

/// Eq. for one channel value before clamping and rounding.
inline double stain_affine(double v, int c, const StainStats& raw, const StainStats& tgt) {
  return (v - raw.mu[c]) / raw.sigma[c] * tgt.sigma[c] + tgt.mu[c];
}

inline double stain_affine_inverse(double v, int c, const StainStats& raw, const StainStats& tgt) {
  return (v - tgt.mu[c]) / tgt.sigma[c] * raw.sigma[c] + raw.mu[c];
}

/// Recolors foreground pixels so their channel moments match `tgt`; background
/// pixels are left untouched. Results are clamped to [0,255] and rounded half
/// to even.
inline RgbImage stain_normalize(const RgbImage& image, const StainStats& raw, const StainStats& tgt) {
  for (int c = 0; c < 3; ++c)
    require(raw.sigma[c] >= kStainSigmaFloor && tgt.sigma[c] >= kStainSigmaFloor, ErrorCode::DegenerateStats,
            "channel std below the 1e-3 floor");
  RgbImage out = image;
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      if (!is_foreground(image.at(y, x, 0), image.at(y, x, 1), image.at(y, x, 2))) continue;
      for (int c = 0; c < 3; ++c) {
        const double v = stain_affine(image.at(y, x, c), c, raw, tgt);
        out.at(y, x, c) = static_cast<std::uint8_t>(std::nearbyint(std::clamp(v, 0.0, 255.0)));
      }
    }
  return out;
}

struct TargetSelection {
  std::vector<std::size_t> targets;  // positions in the patch list, ascending
  StainStats stats;
};

/// Clusters the top-scoring patches by (mean RGB / 255, score) and keeps the
/// best patch of every cluster; the targets' pooled foreground moments become
/// the normalization target.
inline TargetSelection select_target_patches(const std::vector<Patch>& patches, const std::vector<double>& scores,
                                             int n_clusters, double top_fraction, SeededRng& rng) {
  require(scores.size() == patches.size(), ErrorCode::DimensionMismatch, "one score per patch is required");
  require(n_clusters >= 1, ErrorCode::InvalidArgument, "need at least one target cluster");
  require(top_fraction > 0.0 && top_fraction <= 1.0, ErrorCode::InvalidArgument, "top fraction must lie in (0,1]");
  std::vector<std::size_t> order(patches.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const auto keep = static_cast<std::size_t>(std::ceil(top_fraction * static_cast<double>(patches.size()) - 1e-12));
  order.resize(std::min(keep, order.size()));
  require(order.size() >= static_cast<std::size_t>(n_clusters), ErrorCode::TooFewQualifiedPatches,
          std::to_string(order.size()) + " qualified patches for " + std::to_string(n_clusters) + " clusters");

  Matrix feats(static_cast<Index>(order.size()), 4);
  for (std::size_t r = 0; r < order.size(); ++r) {
    const RgbImage& img = patches[order[r]].pixels;
    std::array<double, 3> mean{};
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        for (int c = 0; c < 3; ++c) mean[c] += img.at(y, x, c);
    const double np = static_cast<double>(img.width) * img.height;
    for (int c = 0; c < 3; ++c) feats(static_cast<Index>(r), c) = mean[c] / np / 255.0;
    feats(static_cast<Index>(r), 3) = scores[order[r]];
  }
  const auto km = kmeans_fit(feats, n_clusters, rng);

  TargetSelection sel;
  std::vector<long> best(static_cast<std::size_t>(n_clusters), -1);
  for (std::size_t r = 0; r < order.size(); ++r) {
    auto& b = best[static_cast<std::size_t>(km.labels[r])];
    // `order` is sorted by descending score, so the first member is the best.
    if (b < 0) b = static_cast<long>(order[r]);
  }
  ForegroundMoments m;
  for (long b : best)
    if (b >= 0) sel.targets.push_back(static_cast<std::size_t>(b));
  std::sort(sel.targets.begin(), sel.targets.end());
  for (std::size_t t : sel.targets) m.add(patches[t].pixels);
  sel.stats = m.stats();
  return sel;
}

// ---------------------------------------------------------------------------
// Patch encoders

class PatchEncoder {
 public:
  virtual ~PatchEncoder() = default;
  virtual std::string id() const = 0;
  virtual Matrix encode(const std::vector<Patch>& patches) const = 0;
};

inline constexpr Index kToyFeatureWidth = 48;

/// Unscaled toy features of one patch: 8-bin histograms per channel, channel
/// means and stds, 4x4 luminance block means, foreground fraction and mean
/// gradient magnitude.
inline RowVector toy_features_raw(const Patch& p) {
  const RgbImage& img = p.pixels;
  RowVector f = RowVector::Zero(kToyFeatureWidth);
  const double np = static_cast<double>(img.width) * img.height;
  std::array<double, 3> sum{}, sq{};
  std::size_t fg = 0;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = img.at(y, x, c);
        f(c * 8 + img.at(y, x, c) / 32) += 1.0 / np;
        sum[c] += v;
        sq[c] += v * v;
      }
      fg += is_foreground(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
    }
  for (int c = 0; c < 3; ++c) {
    const double m = sum[c] / np;
    f(24 + c) = m;
    f(27 + c) = std::sqrt(std::max(0.0, sq[c] / np - m * m));
  }
  const Matrix lum = luminance_map(img);
  const Index bh = lum.rows() / 4, bw = lum.cols() / 4;
  for (Index by = 0; by < 4; ++by)
    for (Index bx = 0; bx < 4; ++bx) f(30 + by * 4 + bx) = lum.block(by * bh, bx * bw, bh, bw).mean();
  f(46) = static_cast<double>(fg) / np;
  f(47) = mean_gradient(lum);
  return f;
}

/// Z-scores every column over the rows; constant columns become zero.
inline void zscore_columns(Matrix& m) {
  const double n = static_cast<double>(m.rows());
  for (Index j = 0; j < m.cols(); ++j) {
    const double mu = m.col(j).mean();
    const double sd = std::sqrt((m.col(j).array() - mu).square().sum() / n);
    if (sd > 1e-12)
      m.col(j) = (m.col(j).array() - mu) / sd;
    else
      m.col(j).setZero();
  }
}

class ToyFeaturizer final : public PatchEncoder {
 public:
  std::string id() const override { return "toy"; }

  Matrix encode(const std::vector<Patch>& patches) const override {
    Matrix out(static_cast<Index>(patches.size()), kToyFeatureWidth);
    for (std::size_t i = 0; i < patches.size(); ++i) out.row(static_cast<Index>(i)) = toy_features_raw(patches[i]);
    zscore_columns(out);
    return out;
  }
};

/// Rows of a precomputed embedding matrix, looked up by each patch's spot.
class PrecomputedEmbeddings final : public PatchEncoder {
 public:
  explicit PrecomputedEmbeddings(Matrix rows) : rows_(std::move(rows)) {}

  std::string id() const override { return "precomputed"; }
  const Matrix& rows() const { return rows_; }

  Matrix encode(const std::vector<Patch>& patches) const override {
    Matrix out(static_cast<Index>(patches.size()), rows_.cols());
    for (std::size_t i = 0; i < patches.size(); ++i) {
      const Index s = patches[i].spot;
      require(s >= 0 && s < rows_.rows(), ErrorCode::EmbeddingShapeMismatch,
              "no embedding row for spot " + std::to_string(s));
      out.row(static_cast<Index>(i)) = rows_.row(s);
    }
    return out;
  }

 private:
  Matrix rows_;
};

inline Matrix encode_patches(const std::vector<Patch>& patches, const PatchEncoder& encoder) {
  return encoder.encode(patches);
}

// ---------------------------------------------------------------------------
// Smoothing

struct PatchEmbeddingSet {
  Matrix raw;
  Matrix smoothed;
  std::string encoder_id;
};

/// v~_i = (1 - lambda) v_i + lambda sum_j w_ij v_j over the k nearest spots,
/// w_ij proportional to exp(-d_ij^2 / (2 sigma^2)), sigma the median neighbor distance.
inline Matrix smooth_embeddings(const Matrix& raw, const Matrix& coords, Index k, double lambda) {
  require(lambda >= 0.0 && lambda <= 1.0, ErrorCode::InvalidArgument, "smoothing lambda must lie in [0,1]");
  require(raw.rows() == coords.rows(), ErrorCode::RowMisalignment, "embeddings and coords differ in row count");
  if (lambda == 0.0) return raw;
  const Matrix xy = deduplicate_coords(coords);
  const auto nb = knn_indices(xy, k);
  const double sigma = median_neighbor_distance(xy, nb);
  require(sigma > 0.0, ErrorCode::ZeroBandwidth, "all neighbor distances are zero");
  Matrix out(raw.rows(), raw.cols());
  for (Index i = 0; i < raw.rows(); ++i) {
    const auto& ni = nb[static_cast<std::size_t>(i)];
    std::vector<double> w;
    for (Index j : ni) w.push_back(std::exp(-(xy.row(i) - xy.row(j)).squaredNorm() / (2.0 * sigma * sigma)));
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    RowVector mix = RowVector::Zero(raw.cols());
    for (std::size_t r = 0; r < ni.size(); ++r) mix += (w[r] / total) * raw.row(ni[r]);
    out.row(i) = (1.0 - lambda) * raw.row(i) + lambda * mix;
  }
  return out;
}

}  // namespace multist
