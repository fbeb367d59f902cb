#pragma once

// Run configuration: every hyperparameter of the pipeline, serialized as
// `key=value` lines. Unknown keys are rejected.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "multist/clustering.hpp"
#include "multist/csv.hpp"
#include "multist/error.hpp"
#include "multist/fusion.hpp"
#include "multist/gene_encoder.hpp"
#include "multist/preprocess.hpp"

namespace multist {

struct RunConfig {
  std::string data;
  std::string out = "out";
  std::uint64_t seed = 0;
  int clusters = 0;

  PreprocessOptions preprocess;

  Index graph_k = 6;
  Index diffusion_k = 0;  // 0 reuses graph_k

  Stage1Config stage1;
  Stage2Config stage2;

  bool use_image = true;
  std::string patch_encoder = "toy";  // toy | precomputed
  bool stain_normalize = true;
  int stain_clusters = 8;
  double stain_top_fraction = 0.2;
  Index smooth_k = 0;  // 0 reuses graph_k
  double smooth_lambda = 0.3;

  Stage3Config stage3;

  double anchor_fraction = 0.01;
  int diffusion_max_iter = 50;
  double diffusion_tol = 1e-6;
  int gmm_max_iter = 200;
  bool write_checkpoint = true;
};

namespace detail {

template <class T>
std::string config_format(const T& v) {
  if constexpr (std::is_same_v<T, bool>)
    return v ? "true" : "false";
  else if constexpr (std::is_same_v<T, std::string>)
    return v;
  else if constexpr (std::is_same_v<T, FusionDirection>)
    return to_string(v);
  else if constexpr (std::is_floating_point_v<T>)
    return csv::format_double(v);
  else
    return std::to_string(v);
}

template <class T>
void config_parse(const std::string& key, const std::string& s, T& v) {
  const auto bad = [&] { return Error(ErrorCode::InvalidArgument, "bad value '" + s + "' for " + key); };
  if constexpr (std::is_same_v<T, bool>) {
    if (s == "true" || s == "1" || s == "yes" || s == "on")
      v = true;
    else if (s == "false" || s == "0" || s == "no" || s == "off")
      v = false;
    else
      throw bad();
  } else if constexpr (std::is_same_v<T, std::string>) {
    v = s;
  } else if constexpr (std::is_same_v<T, FusionDirection>) {
    try {
      v = parse_direction(s);
    } catch (const Error&) {
      throw bad();
    }
  } else {
    const auto* end = s.data() + s.size();
    const auto [ptr, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || ptr != end) throw bad();
  }
}

}  // namespace detail

/// Calls f(key, field, help) for every configurable field, in file order.
template <class Config, class F>
void for_each_field(Config& c, F&& f) {
  f("data", c.data, "dataset directory");
  f("out", c.out, "output directory");
  f("seed", c.seed, "random seed");
  f("clusters", c.clusters, "number of spatial domains");

  auto& p = c.preprocess;
  f("min_cells", p.min_cells, "keep genes detected in at least this many spots");
  f("min_total", p.min_total, "keep genes with at least this many total counts");
  f("target_sum", p.target_sum, "per-spot total after CPM scaling");
  f("log1p", p.log1p, "apply ln(1+x) after CPM");
  f("n_top_hvgs", p.n_top_hvgs, "highly variable genes to keep");
  f("hvg_bins", p.hvg_bins, "mean-expression bins for HVG ranking");
  f("scale", p.scale, "z-scale genes before PCA");
  f("scale_clip", p.scale_clip, "clip z-scores at this magnitude");
  f("pca", p.pca, "project onto principal components");
  f("pca_components", p.pca_components, "principal components to keep");

  f("graph_k", c.graph_k, "spatial neighbors per spot");
  f("diffusion_k", c.diffusion_k, "neighbors of the diffusion kernel (0 = graph_k)");

  auto& s1 = c.stage1;
  f("stage1_lambda_rec", s1.lambda_rec, "stage I reconstruction weight");
  f("stage1_lambda_graph", s1.lambda_graph, "stage I graph reconstruction weight");
  f("stage1_lambda_mask", s1.lambda_mask, "stage I masked reconstruction weight");
  f("stage1_lambda_gan", s1.lambda_gan, "stage I adversarial weight");
  f("stage1_lambda_kl", s1.lambda_kl, "stage I latent KL weight");
  f("mask_ratio", s1.mask_ratio, "fraction of spots masked per epoch");
  f("mask_alpha", s1.mask_alpha, "exponent of the masked cosine loss");
  f("stage1_epochs", s1.epochs, "stage I epochs");
  f("stage1_lr", s1.lr, "stage I learning rate");
  f("d1", s1.dims.d1, "first MLP width");
  f("d2", s1.dims.d2, "second MLP width");
  f("gcn_hidden", s1.dims.gcn_hidden, "GCN width");
  f("noise_dim", s1.dims.noise_dim, "generator noise width");
  f("disc_hidden", s1.dims.disc_hidden, "discriminator hidden width");
  f("n_generated", s1.n_generated, "generated samples per epoch (0 = one per spot)");
  f("bn_momentum", s1.bn_momentum, "batch-norm running-stat momentum");

  auto& s2 = c.stage2;
  f("stage2_lambda_rec", s2.lambda_rec, "stage II reconstruction weight");
  f("stage2_lambda_graph", s2.lambda_graph, "stage II graph reconstruction weight");
  f("stage2_lambda_dec", s2.lambda_dec, "stage II DEC weight");
  f("stage2_lambda_gan", s2.lambda_gan, "stage II consistency weight");
  f("stage2_lambda_kl", s2.lambda_kl, "stage II latent KL weight");
  f("alpha_dec", s2.alpha_dec, "Student-t degrees of freedom");
  f("stage2_epochs", s2.epochs, "stage II epochs");
  f("stage2_lr", s2.lr, "stage II learning rate");
  f("refresh_interval", s2.refresh_interval, "epochs between target refreshes");
  f("stop_fraction", s2.stop_fraction, "stop when fewer assignments change");

  f("use_image", c.use_image, "run the histology branch and fusion");
  f("patch_encoder", c.patch_encoder, "toy or precomputed");
  f("stain_normalize", c.stain_normalize, "normalize stain before featurizing");
  f("stain_clusters", c.stain_clusters, "clusters for target patch selection");
  f("stain_top_fraction", c.stain_top_fraction, "top-scoring patch fraction eligible as targets");
  f("smooth_k", c.smooth_k, "neighbors for feature smoothing (0 = graph_k)");
  f("smooth_lambda", c.smooth_lambda, "neighbor weight of feature smoothing");

  auto& s3 = c.stage3;
  f("stage3_lambda_sdm", s3.lambda_sdm, "stage III similarity-distribution weight");
  f("stage3_lambda_con", s3.lambda_con, "stage III contrastive weight");
  f("stage3_lambda_reg", s3.lambda_reg, "stage III norm regularizer weight");
  f("stage3_epochs", s3.epochs, "stage III epochs");
  f("stage3_lr", s3.lr, "stage III learning rate");
  f("fusion_dim", s3.dim, "fused embedding width");
  f("heads", s3.heads, "attention heads");
  f("alpha", s3.alpha, "gene share of the fused embedding");
  f("tau", s3.tau, "similarity temperature");
  f("direction", s3.direction, "bidirectional or image_to_gene");
  f("freeze_encoder", s3.freeze_encoder, "keep the gene encoder fixed in stage III");

  f("anchor_fraction", c.anchor_fraction, "anchor share of every cluster");
  f("diffusion_max_iter", c.diffusion_max_iter, "label diffusion iteration cap");
  f("diffusion_tol", c.diffusion_tol, "label diffusion tolerance");
  f("gmm_max_iter", c.gmm_max_iter, "GMM EM iteration cap");
  f("write_checkpoint", c.write_checkpoint, "save model parameters");
}

inline std::vector<std::string> config_keys() {
  RunConfig c;
  std::vector<std::string> keys;
  for_each_field(c, [&](const char* k, auto&, const char*) { keys.emplace_back(k); });
  return keys;
}

inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  bool found = false;
  for_each_field(c, [&](const char* k, auto& field, const char*) {
    if (key == k) {
      detail::config_parse(key, value, field);
      found = true;
    }
  });
  require(found, ErrorCode::UnknownConfigKey, "unknown config key '" + key + "'");
}

inline std::string get_config_value(const RunConfig& c, const std::string& key) {
  std::string out;
  bool found = false;
  for_each_field(const_cast<RunConfig&>(c), [&](const char* k, auto& field, const char*) {
    if (key == k) {
      out = detail::config_format(field);
      found = true;
    }
  });
  require(found, ErrorCode::UnknownConfigKey, "unknown config key '" + key + "'");
  return out;
}

inline std::string config_to_text(const RunConfig& c) {
  std::ostringstream os;
  for_each_field(const_cast<RunConfig&>(c),
                 [&](const char* k, auto& field, const char*) { os << k << '=' << detail::config_format(field) << '\n'; });
  return os.str();
}

/// Applies `key=value` lines on top of `base`. Blank lines and lines starting
/// with '#' are skipped.
inline RunConfig config_from_text(const std::string& text, RunConfig base = {}) {
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = csv::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    require(eq != std::string::npos, ErrorCode::InvalidArgument,
            "config line " + std::to_string(lineno) + ": expected key=value");
    set_config_value(base, csv::trim(t.substr(0, eq)), csv::trim(t.substr(eq + 1)));
  }
  return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::InvalidArgument, "cannot read config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return config_from_text(ss.str(), std::move(base));
}

inline void save_config(const std::string& path, const RunConfig& c) {
  std::ofstream out(path);
  require(out.good(), ErrorCode::MissingFile, "cannot write " + path);
  out << config_to_text(c);
}

inline void validate_config(const RunConfig& c) {
  const auto check = [](bool ok, const std::string& what) { require(ok, ErrorCode::InvalidArgument, what); };
  check(c.clusters >= 1, "clusters must be at least 1");
  check(c.graph_k >= 1 && c.diffusion_k >= 0 && c.smooth_k >= 0, "neighbor counts must be positive");
  check(c.patch_encoder == "toy" || c.patch_encoder == "precomputed", "patch_encoder must be toy or precomputed");
  check(c.stage1.mask_ratio >= 0.0 && c.stage1.mask_ratio <= 1.0, "mask_ratio must lie in [0,1]");
  check(c.stage1.epochs >= 0 && c.stage2.epochs >= 0 && c.stage3.epochs >= 0, "epochs must be non-negative");
  check(c.stage1.lr > 0.0 && c.stage2.lr > 0.0 && c.stage3.lr > 0.0, "learning rates must be positive");
  check(c.stage3.alpha >= 0.0 && c.stage3.alpha <= 1.0, "alpha must lie in [0,1]");
  check(c.stage3.tau > 0.0, "tau must be positive");
  check(c.stage3.heads >= 1 && c.stage3.dim % c.stage3.heads == 0, "fusion_dim must be a multiple of heads");
  check(c.smooth_lambda >= 0.0 && c.smooth_lambda <= 1.0, "smooth_lambda must lie in [0,1]");
  check(c.anchor_fraction > 0.0 && c.anchor_fraction <= 1.0, "anchor_fraction must lie in (0,1]");
  check(c.stage2.alpha_dec > 0.0, "alpha_dec must be positive");
  check(c.stage2.refresh_interval >= 1, "refresh_interval must be at least 1");
}

}  // namespace multist
