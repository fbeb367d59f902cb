// Command-line front end: synth, preprocess, train, cluster, evaluate, run.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "multist/pipeline.hpp"
#include "multist/synthetic.hpp"

namespace {

using namespace multist;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;

std::string flag_name(std::string key) {
  for (char& c : key)
    if (c == '_') c = '-';
  return "--" + key;
}

/// Every config key becomes `--key-with-hyphens VALUE`; values given on the
/// command line are applied after the config file; a repeated flag keeps its
/// last value.
struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> values;
  bool no_log = false;

  void attach(CLI::App& app) {
    app.add_option("--config", config_path, "key=value config file");
    RunConfig defaults;
    for_each_field(defaults, [&](const char* key, auto& field, const char* help) {
      app.add_option(flag_name(key), values[key], std::string(help) + " (default " + detail::config_format(field) + ")")
          ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    });
    app.add_flag("--no-log", no_log, "skip ln(1+x) after CPM");
  }

  RunConfig resolve(const CLI::App& app) const {
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_config(config_path);
    for (const auto& [key, value] : values)
      if (app.count(flag_name(key)) > 0) set_config_value(cfg, key, value);
    if (no_log) cfg.preprocess.log1p = false;
    return cfg;
  }
};

/// SPF_THREADS caps worker threads; every stage runs on one thread, so any
/// valid positive value is accepted and the cap is always met.
int worker_threads() {
  const char* env = std::getenv("SPF_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  require(*end == '\0' && n >= 1, ErrorCode::InvalidArgument, "SPF_THREADS must be a positive integer");
  return 1;
}

std::map<std::string, std::string> read_label_column(const std::string& path) {
  const auto t = csv::read(path);
  require(t.header.size() == 2, ErrorCode::MalformedRow, path + ": expected barcode,label");
  std::map<std::string, std::string> out;
  for (const auto& row : t.rows) out[row[0]] = row[1];
  return out;
}

/// Maps label strings to dense ids in order of first appearance.
Labels encode_strings(const std::vector<std::string>& s) {
  std::map<std::string, int> ids;
  Labels out;
  for (const auto& v : s) out.push_back(ids.emplace(v, static_cast<int>(ids.size())).first->second);
  return out;
}

void print_metrics(const MetricsReport& m) {
  std::cout << "ARI=" << m.ari << " AMI=" << m.ami << " Completeness=" << m.completeness << '\n';
}

int exit_code_for(const Error& e) {
  switch (e.category()) {
    case ErrorCategory::Config: return kExitConfig;
    case ErrorCategory::Data: return kExitData;
    case ErrorCategory::Numerical: return kExitDivergence;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal spatial domain identification"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "progress messages on stderr");

  // synth
  auto* synth = app.add_subcommand("synth", "write a synthetic dataset with ground-truth domains");
  SyntheticSpec spec;
  std::string synth_out;
  std::uint64_t synth_seed = 7;
  bool no_image = false;
  synth->add_option("--out", synth_out, "dataset directory")->required();
  synth->add_option("--seed", synth_seed, "random seed");
  synth->add_option("--grid-rows", spec.grid_rows, "spot rows");
  synth->add_option("--grid-cols", spec.grid_cols, "spot columns");
  synth->add_option("--domains", spec.domains, "number of domains");
  synth->add_option("--genes", spec.genes, "number of genes");
  synth->add_option("--markers", spec.markers_per_domain, "marker genes per domain");
  synth->add_option("--noise", spec.noise, "log-normal rate jitter and image noise level");
  synth->add_option("--expression-groups", spec.expression_groups, "domains sharing marker sets (0 = none)");
  synth->add_flag("--no-image", no_image, "omit image.png");

  // pipeline commands share the config flags
  ConfigFlags pre_flags, train_flags, cluster_flags, run_flags;
  auto* pre = app.add_subcommand("preprocess", "filter, normalize, select genes and build the spatial graph");
  pre_flags.attach(*pre);
  auto* train = app.add_subcommand("train", "train stages I-III and write embeddings and checkpoint");
  train_flags.attach(*train);
  auto* cluster = app.add_subcommand("cluster", "GMM, anchors and label diffusion on an embedding");
  cluster_flags.attach(*cluster);
  std::string embedding_path;
  cluster->add_option("--embedding", embedding_path, "embedding .bin (default OUT/h_fusion.bin)");
  auto* run = app.add_subcommand("run", "full pipeline");
  run_flags.attach(*run);

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "compare predicted and true labels");
  std::string pred_path, truth_path, metrics_out;
  evaluate->add_option("--pred", pred_path, "predicted labels.csv")->required();
  evaluate->add_option("--truth", truth_path, "ground-truth labels.csv")->required();
  evaluate->add_option("--out", metrics_out, "metrics.json to write");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }
  if (verbose) log::level() = log::Level::Info;

  try {
    worker_threads();
    if (*synth) {
      SeededRng rng(synth_seed);
      spec.with_image = !no_image;
      save_dataset(generate_synthetic(spec, rng), synth_out);
    } else if (*pre) {
      const RunConfig cfg = pre_flags.resolve(*pre);
      require(!cfg.data.empty(), ErrorCode::InvalidArgument, "--data is required");
      const PreparedData p = prepare_data(with_stage("load", [&] { return load_dataset(cfg.data); }), cfg);
      std::filesystem::create_directories(cfg.out);
      const std::filesystem::path root(cfg.out);
      write_embeddings((root / "preprocessed.bin").string(), p.expression.values);
      write_text(root / "preprocess_manifest.txt", manifest_to_text(p.expression.manifest));
      write_edges_csv((root / "edges.csv").string(), p.graph);
    } else if (*train) {
      const RunConfig cfg = train_flags.resolve(*train);
      require(!cfg.data.empty(), ErrorCode::InvalidArgument, "--data is required");
      validate_config(cfg);
      const auto r = train_pipeline(cfg, with_stage("load", [&] { return load_dataset(cfg.data); }));
      write_outputs(r, cfg, cfg.out);
    } else if (*cluster) {
      const RunConfig cfg = cluster_flags.resolve(*cluster);
      require(!cfg.data.empty(), ErrorCode::InvalidArgument, "--data is required");
      validate_config(cfg);
      const Dataset ds = with_stage("load", [&] { return load_dataset(cfg.data); });
      const std::string path =
          embedding_path.empty() ? (std::filesystem::path(cfg.out) / "h_fusion.bin").string() : embedding_path;
      const Matrix h = with_stage("load", [&] { return read_embeddings(path); });
      // train may have dropped empty spots; keep the ones the embedding covers
      const PreparedData p = prepare_data(ds, cfg);
      require(h.rows() == p.data.spots(), ErrorCode::RowMisalignment,
              path + " has " + std::to_string(h.rows()) + " rows for " + std::to_string(p.data.spots()) + " spots");
      const auto ref = cluster_embedding(h, p.data.coords, cfg);
      std::filesystem::create_directories(cfg.out);
      const std::filesystem::path root(cfg.out);
      write_labels_csv((root / "labels.csv").string(), p.data.expression.barcodes, label_strings(ref.diffusion.labels));
      write_labels_csv((root / "labels_gmm.csv").string(), p.data.expression.barcodes,
                       label_strings(ref.gmm.labels));
      write_domains_svg((root / "domains.svg").string(), p.data.coords, ref.diffusion.labels);
      if (p.data.labels) {
        const auto m = evaluate_labels(ref.diffusion.labels, *p.data.labels);
        write_metrics_json((root / "metrics.json").string(), m);
        print_metrics(m);
      }
    } else if (*evaluate) {
      const auto pred = read_label_column(pred_path);
      const auto truth = read_label_column(truth_path);
      std::vector<std::string> ps, ts;
      for (const auto& [barcode, label] : pred) {
        const auto it = truth.find(barcode);
        require(it != truth.end(), ErrorCode::BarcodeMismatch, "barcode " + barcode + " missing from " + truth_path);
        ps.push_back(label);
        ts.push_back(it->second);
      }
      require(pred.size() == truth.size(), ErrorCode::BarcodeMismatch, "label files cover different spots");
      const auto m = evaluate_labels(encode_strings(ps), encode_strings(ts));
      if (!metrics_out.empty()) write_metrics_json(metrics_out, m);
      print_metrics(m);
    } else if (*run) {
      const RunConfig cfg = run_flags.resolve(*run);
      require(!cfg.data.empty(), ErrorCode::InvalidArgument, "--data is required");
      const auto r = run_pipeline(cfg);
      if (r.metrics) print_metrics(*r.metrics);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kExitOk;
}
