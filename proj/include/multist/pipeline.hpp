#pragma once

// End-to-end run: preprocess -> graph -> stage I -> stage II -> image features
// -> stage III -> GMM -> anchors -> diffusion -> metrics, and the files it writes.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include <json.hpp>

#include "multist/checkpoint.hpp"
#include "multist/clustering.hpp"
#include "multist/dataset.hpp"
#include "multist/fusion.hpp"
#include "multist/gene_encoder.hpp"
#include "multist/image_features.hpp"
#include "multist/log.hpp"
#include "multist/metrics.hpp"
#include "multist/plot.hpp"
#include "multist/preprocess.hpp"
#include "multist/run_config.hpp"
#include "multist/spatial_graph.hpp"

namespace multist {

inline constexpr const char* kVersion = "0.1.0";

// Independent RNG streams per stage so that disabling one stage leaves the
// others' draws unchanged.
enum class Stream : std::uint64_t { Stage1 = 1, Stage2 = 2, Image = 3, Stage3 = 4, Refine = 5 };

inline SeededRng stage_rng(std::uint64_t seed, Stream s) {
  return SeededRng(seed).split(static_cast<std::uint64_t>(s));
}

/// Runs `f` and prefixes any library error with the stage name.
template <class F>
auto with_stage(const char* stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    rethrow_with_context(e, stage);
  }
}

struct PreparedData {
  Dataset data;  // spots that survived preprocessing
  PreprocessedMatrix expression;
  SpatialGraph graph;
};

inline PreparedData prepare_data(Dataset ds, const RunConfig& cfg) {
  PreparedData p;
  p.expression = with_stage("preprocess", [&] { return preprocess(ds.expression, cfg.preprocess); });
  if (p.expression.kept_spots.size() != static_cast<std::size_t>(ds.spots())) ds.subset_spots(p.expression.kept_spots);
  p.data = std::move(ds);
  p.graph = with_stage("graph", [&] { return build_knn_graph(p.data.coords, cfg.graph_k); });
  return p;
}

struct ImageFeatures {
  Matrix raw;
  Matrix smoothed;
  std::optional<TargetSelection> stain_targets;
  std::optional<StainStats> slide_stats;
};

inline ImageFeatures compute_image_features(const Dataset& ds, const RunConfig& cfg, SeededRng& rng) {
  return with_stage("image features", [&] {
    ImageFeatures f;
    if (cfg.patch_encoder == "precomputed") {
      require(ds.patch_embeddings.has_value(), ErrorCode::MissingEmbeddingFile,
              "patch_encoder=precomputed needs patch_embeddings.bin");
      require(ds.patch_embeddings->rows() == ds.spots(), ErrorCode::EmbeddingShapeMismatch,
              "patch embeddings have a different number of rows than spots");
      f.raw = *ds.patch_embeddings;
    } else {
      require(ds.image.has_value(), ErrorCode::MissingFile, "the toy featurizer needs image.png");
      RgbImage slide = *ds.image;
      if (cfg.stain_normalize) {
        const auto patches = extract_patches(slide, ds.coords, ds.scale_factor);
        const auto scores = score_patches(patches);
        f.stain_targets = select_target_patches(patches, scores, cfg.stain_clusters, cfg.stain_top_fraction, rng);
        f.slide_stats = foreground_stats(slide);
        slide = stain_normalize(slide, *f.slide_stats, f.stain_targets->stats);
      }
      f.raw = ToyFeaturizer().encode(extract_patches(slide, ds.coords, ds.scale_factor));
    }
    const Index k = cfg.smooth_k > 0 ? cfg.smooth_k : cfg.graph_k;
    f.smoothed = smooth_embeddings(f.raw, ds.coords, k, cfg.smooth_lambda);
    require_finite(f.smoothed, "image features");
    return f;
  });
}

struct PipelineResult {
  PreparedData prepared;
  Stage1Result stage1;
  Stage2Result stage2;
  std::optional<ImageFeatures> image;
  std::optional<Stage3Result> stage3;
  Matrix embedding;  // what the refinement clustered
  KernelWeights kernel;
  RefinementResult refinement;
  Labels labels;
  std::optional<MetricsReport> metrics;
  SeededRng rng_state;  // last training stream, saved with the checkpoint
};

/// GMM on `h`, anchors, then label diffusion over the Gaussian KNN kernel.
inline RefinementResult cluster_embedding(const Matrix& h, const Matrix& coords, const RunConfig& cfg,
                                          KernelWeights* kernel_out = nullptr) {
  return with_stage("refinement", [&] {
    const Index k = cfg.diffusion_k > 0 ? cfg.diffusion_k : cfg.graph_k;
    KernelWeights kw = build_gaussian_kernel(coords, k);
    SeededRng rng = stage_rng(cfg.seed, Stream::Refine);
    GmmOptions opts;
    opts.max_iter = cfg.gmm_max_iter;
    RefinementResult r;
    r.gmm = gmm_cluster(h, cfg.clusters, rng, opts);
    const auto anchors = find_anchors(r.gmm.labels, kw.W, cfg.anchor_fraction);
    r.diffusion =
        propagate_labels(one_hot(r.gmm.labels, cfg.clusters), kw.W, anchors, cfg.diffusion_max_iter, cfg.diffusion_tol);
    if (kernel_out) *kernel_out = std::move(kw);
    return r;
  });
}

/// Preprocessing and the three training stages; `embedding` is set, labels are not.
inline PipelineResult train_pipeline(const RunConfig& cfg, Dataset ds) {
  validate_config(cfg);
  PipelineResult r;
  r.prepared = prepare_data(std::move(ds), cfg);
  const Matrix& x = r.prepared.expression.values;
  const SpatialGraph& graph = r.prepared.graph;
  log::info("spots " + std::to_string(x.rows()) + ", features " + std::to_string(x.cols()));

  SeededRng rng1 = stage_rng(cfg.seed, Stream::Stage1);
  r.stage1 = with_stage("stage I", [&] { return train_stage1(x, graph, cfg.stage1, rng1); });

  SeededRng rng2 = stage_rng(cfg.seed, Stream::Stage2);
  r.stage2 = with_stage("stage II", [&] {
    return train_stage2(r.stage1.encoder, r.stage1.gan, x, graph, cfg.clusters, cfg.stage2, rng2);
  });

  if (cfg.use_image) {
    SeededRng rng_img = stage_rng(cfg.seed, Stream::Image);
    r.image = compute_image_features(r.prepared.data, cfg, rng_img);
    SeededRng rng3 = stage_rng(cfg.seed, Stream::Stage3);
    r.stage3 = with_stage("stage III", [&] {
      return train_stage3(r.stage2.encoder, x, graph, r.image->smoothed, cfg.stage3, rng3);
    });
    r.embedding = r.stage3->embedding.h_fusion;
    r.rng_state = rng3;
  } else {
    r.embedding = r.stage2.z;
    r.rng_state = rng2;
  }
  return r;
}

/// GMM, anchors and diffusion on a trained result, then metrics when labels exist.
inline void refine_pipeline(PipelineResult& r, const RunConfig& cfg) {
  r.refinement = cluster_embedding(r.embedding, r.prepared.data.coords, cfg, &r.kernel);
  r.labels = r.refinement.diffusion.labels;
  if (r.prepared.data.labels) r.metrics = evaluate_labels(r.labels, *r.prepared.data.labels);
}

/// The whole pipeline on an in-memory dataset; no files are touched.
inline PipelineResult run_pipeline(const RunConfig& cfg, Dataset ds) {
  PipelineResult r = train_pipeline(cfg, std::move(ds));
  refine_pipeline(r, cfg);
  return r;
}

// ---------------------------------------------------------------------------
// Files

inline nlohmann::ordered_json metrics_json(const MetricsReport& m) {
  nlohmann::ordered_json j;
  j["ari"] = m.ari;
  j["ami"] = m.ami;
  j["completeness"] = m.completeness;
  j["n_spots"] = m.n_spots;
  j["n_clusters_pred"] = m.n_clusters_pred;
  j["n_clusters_true"] = m.n_clusters_true;
  return j;
}

inline void write_metrics_json(const std::string& path, const MetricsReport& m) {
  std::ofstream out(path);
  require(out.good(), ErrorCode::MissingFile, "cannot write " + path);
  out << metrics_json(m).dump(2) << '\n';
}

inline MetricsReport read_metrics_json(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::MissingFile, "cannot read " + path);
  const auto j = nlohmann::json::parse(in);
  MetricsReport m;
  m.ari = j.at("ari");
  m.ami = j.at("ami");
  m.completeness = j.at("completeness");
  m.n_spots = j.at("n_spots");
  m.n_clusters_pred = j.at("n_clusters_pred");
  m.n_clusters_true = j.at("n_clusters_true");
  return m;
}

/// Config lines preceded by version and seed comments; loadable as a config.
inline std::string run_manifest_text(const RunConfig& cfg) {
  std::string s = "# multist " + std::string(kVersion) + "\n";
  s += "# eigen " + std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
       std::to_string(EIGEN_MINOR_VERSION) + "\n";
  s += "# seed " + std::to_string(cfg.seed) + "\n";
  return s + config_to_text(cfg);
}

inline std::vector<std::string> label_strings(const Labels& labels) {
  std::vector<std::string> out;
  out.reserve(labels.size());
  for (int l : labels) out.push_back(std::to_string(l));
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  require(out.good(), ErrorCode::MissingFile, "cannot write " + path.string());
  out << text;
}

inline void write_outputs(const PipelineResult& r, const RunConfig& cfg, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path root(dir);
  const auto& barcodes = r.prepared.data.expression.barcodes;

  if (!r.labels.empty()) {
    write_labels_csv((root / "labels.csv").string(), barcodes, label_strings(r.labels));
    write_labels_csv((root / "labels_gmm.csv").string(), barcodes, label_strings(r.refinement.gmm.labels));
    write_domains_svg((root / "domains.svg").string(), r.prepared.data.coords, r.labels);
  }
  write_edges_csv((root / "edges.csv").string(), r.prepared.graph);
  write_text(root / "preprocess_manifest.txt", manifest_to_text(r.prepared.expression.manifest));
  write_text(root / "run_manifest.cfg", run_manifest_text(cfg));

  r.stage1.trace.write_csv((root / "losses_stage1.csv").string());
  r.stage2.trace.write_csv((root / "losses_stage2.csv").string());
  write_embeddings((root / "z_stage1.bin").string(), r.stage1.z);
  write_embeddings((root / "z.bin").string(), r.stage2.z);
  write_embeddings((root / "soft_assignment.bin").string(), r.stage2.state.q);
  write_embeddings((root / "centroids.bin").string(), r.stage2.state.centroids);
  if (r.image) {
    write_embeddings((root / "image_features_raw.bin").string(), r.image->raw);
    write_embeddings((root / "image_features.bin").string(), r.image->smoothed);
  }
  if (r.stage3) {
    r.stage3->trace.write_csv((root / "losses_stage3.csv").string());
    write_embeddings((root / "h_gene.bin").string(), r.stage3->embedding.h_gene);
    write_embeddings((root / "h_image.bin").string(), r.stage3->embedding.h_image);
  }
  write_embeddings((root / "h_fusion.bin").string(), r.embedding);

  if (cfg.write_checkpoint) {
    Checkpoint ck;
    ck.set_rng(r.rng_state);
    store_encoder(ck, r.stage3 ? r.stage3->encoder : r.stage2.encoder);
    store_gan(ck, r.stage1.gan);
    ck.tensors["mask.perturbation"] = r.stage1.mask.perturbation;
    ck.tensors["dec.centroids"] = r.stage2.state.centroids;
    if (r.stage3) store_fusion(ck, r.stage3->params);
    save_checkpoint((root / "checkpoint.bin").string(), ck);
  }

  if (r.metrics) write_metrics_json((root / "metrics.json").string(), *r.metrics);
}

/// Loads `cfg.data`, runs the pipeline and writes everything under `cfg.out`.
inline PipelineResult run_pipeline(const RunConfig& cfg) {
  validate_config(cfg);
  Dataset ds = with_stage("load", [&] { return load_dataset(cfg.data); });
  PipelineResult r = run_pipeline(cfg, std::move(ds));
  write_outputs(r, cfg, cfg.out);
  return r;
}

}  // namespace multist
