// Acceptance checks: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria unless --report is given.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include <CLI11.hpp>

#include "multist/clustering.hpp"
#include "multist/fusion.hpp"
#include "multist/gradcheck.hpp"
#include "multist/image_features.hpp"
#include "multist/metrics.hpp"
#include "multist/pipeline.hpp"
#include "multist/synthetic.hpp"
#include "instances.hpp"

using namespace multist;
using multist::testing::random_matrix;
using multist::testing::small_instance;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

// ---------------------------------------------------------------- criterion 1

Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  const auto inst = small_instance(5, 6, 20, 2024);
  SeededRng rng(5);
  double worst = 0.0;
  std::string worst_name;
  auto record = [&](const std::string& stage, const GradCheckReport& r) {
    for (const auto& [name, err] : r.per_parameter_errors)
      if (err > worst) {
        worst = err;
        worst_name = stage + ":" + name;
      }
  };

  Stage1Config c1;
  const EncoderParams enc = init_encoder(20, c1.dims, rng);
  const GanParams gan = init_gan(20, enc.latent_dim(), c1.dims, rng);
  {
    Stage1Trainables<Matrix> p{enc.w, random_matrix(1, 20, 6, -0.3, 0.3), gan.gen};
    Stage1Batch b;
    b.x = &inst.x;
    b.graph = &inst.graph;
    b.masked = sample_mask(30, c1.mask_ratio, rng);
    b.noise = sample_noise(30, c1.dims.noise_dim, rng);
    b.disc = gan.disc;
    record("stage1", gradient_check(stage1_objective(p, b, c1), flatten(p), 1e-4, param_blocks(p), 1));
  }
  const Matrix z0 = encode_eval(enc, inst.x, inst.graph.normalized);
  {
    Stage2Config c2;
    Stage2Trainables<Matrix> p{enc.w, kmeans_fit(z0, 3, rng).centroids};
    Stage2Batch b;
    b.x = &inst.x;
    b.graph = &inst.graph;
    b.target = target_distribution(soft_assign(z0, p.centroids, c2.alpha_dec));
    b.noise = sample_noise(30, gan.noise_dim(), rng);
    b.generator = gan.gen;
    record("stage2", gradient_check(stage2_objective(p, b, c2), flatten(p), 1e-4, param_blocks(p), 2));
  }
  {
    Stage3Config c3;
    const Matrix v = random_matrix(30, 48, 7);
    const FusionParams fp = init_fusion(z0.cols(), v.cols(), c3.dim, c3.heads, rng);
    Stage3Trainables<Matrix> p{fp.w, {}, false};
    Stage3Batch b;
    b.z = &z0;
    b.v = &v;
    record("stage3", gradient_check(stage3_objective(p, b, c3), flatten(p), 1e-4, param_blocks(p), 3));
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-3 && secs < 60.0,
          "max rel error " + fmt(worst) + " (" + worst_name + "), " + fmt(secs, 3) + " s"};
}

// ---------------------------------------------------------------- criterion 2

Outcome equation_oracles() {
  std::vector<std::pair<std::string, double>> errs;
  auto add = [&](const std::string& n, double e) { errs.emplace_back(n, e); };

  {  // Student-t assignment: z at mu_1, mu_2 at distance 10
    Matrix z(1, 2), mu(2, 2);
    z << 0, 0;
    mu << 0, 0, 10, 0;
    const Matrix q = soft_assign(z, mu, 1.0);
    add("soft_assign", std::abs(q(0, 0) - 101.0 / 102.0) + std::abs(q(0, 1) - 1.0 / 102.0));
  }
  {  // target distribution on [[0.8,0.2],[0.4,0.6]]: f = (1.2, 0.8)
    Matrix q(2, 2);
    q << 0.8, 0.2, 0.4, 0.6;
    Matrix expect(2, 2);
    expect << 32.0 / 35.0, 3.0 / 35.0, 8.0 / 35.0, 27.0 / 35.0;
    add("target_distribution", (target_distribution(q) - expect).cwiseAbs().maxCoeff());
  }
  {
    Matrix p(1, 2), q(1, 2);
    p << 0.5, 0.5;
    q << 0.25, 0.75;
    add("loss_dec", std::abs(loss_dec(p, q) - (0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0))));
  }
  {  // SDM on three 2-d rows; c = cos 45 degrees
    Matrix hi(3, 2), hg(3, 2);
    hi << 1, 0, 0, 1, 1, 1;
    hg << 1, 0, 1, 1, 0, 1;
    const double tau = 0.5, c = 1.0 / std::sqrt(2.0);
    auto two = [&](double a, double b) { return std::exp(a / tau) / (std::exp(a / tau) + std::exp(b / tau)); };
    auto skl = [](double p, double q) {
      return 0.5 * (p * std::log(p / q) + (1 - p) * std::log((1 - p) / (1 - q)) + q * std::log(q / p) +
                    (1 - q) * std::log((1 - q) / (1 - p)));
    };
    const double expect = (skl(two(0, c), two(c, 0)) + skl(two(0, c), two(c, c)) + skl(two(c, c), two(0, c))) / 3.0;
    add("loss_sdm", std::abs(loss_sdm(hi, hg, tau) - expect));
  }
  {  // InfoNCE on two rows: cosine matrix [[c, 0], [c, 1]]
    Matrix hi(2, 2), hg(2, 2);
    hi << 1, 0, 0, 1;
    hg << 1, 1, 0, 1;
    const double tau = 0.3, c = 1.0 / std::sqrt(2.0);
    auto e = [&](double s) { return std::exp(s / tau); };
    const double expect = (-std::log(e(c) / (e(c) + e(0))) - std::log(e(1) / (e(c) + e(1))) -
                           std::log(e(c) / (e(c) + e(c))) - std::log(e(1) / (e(0) + e(1)))) /
                          4.0;
    add("loss_contrastive", std::abs(loss_contrastive(hi, hg, tau) - expect));
  }
  {  // Fisher MMD, d = 1: k(a,b) = (ab + 1) / 2
    Matrix u(2, 1), v(2, 1);
    u << 1, 3;
    v << 2.9, 1.2;
    auto k = [](double a, double b) { return (a * b + 1.0) / 2.0; };
    const double expect = k(1, 3) + k(2.9, 1.2) - (k(1, 1.2) + k(3, 2.9));
    ad::Tape t;
    add("fisher_mmd", std::abs(fisher_mmd(t.constant(u), t.constant(v)).scalar() - expect));
  }
  {  // stain normalization of a 2 x 2 raster, one background pixel
    RgbImage img(2, 2);
    const double px[4][3] = {{100, 50, 80}, {255, 255, 255}, {140, 90, 60}, {30, 200, 10}};
    for (int p = 0; p < 4; ++p)
      for (int c = 0; c < 3; ++c) img.at(p / 2, p % 2, c) = static_cast<std::uint8_t>(px[p][c]);
    StainStats raw, tgt;
    for (int c = 0; c < 3; ++c) {
      const double m = (px[0][c] + px[2][c] + px[3][c]) / 3.0;
      raw.mu[c] = m;
      raw.sigma[c] = std::sqrt((std::pow(px[0][c] - m, 2) + std::pow(px[2][c] - m, 2) + std::pow(px[3][c] - m, 2)) / 3.0);
    }
    tgt.mu = {150.0, 100.0, 120.0};
    tgt.sigma = {20.0, 35.0, 60.0};
    const RgbImage out = stain_normalize(img, raw, tgt);
    double e = 0.0;
    for (int p = 0; p < 4; ++p)
      for (int c = 0; c < 3; ++c) {
        double expect = px[p][c];
        if (p != 1)
          expect = std::nearbyint(std::clamp((px[p][c] - raw.mu[c]) / raw.sigma[c] * tgt.sigma[c] + tgt.mu[c], 0.0, 255.0));
        e = std::max(e, std::abs(out.at(p / 2, p % 2, c) - expect));
      }
    const StainStats got = foreground_stats(img);
    for (int c = 0; c < 3; ++c) e = std::max({e, std::abs(got.mu[c] - raw.mu[c]), std::abs(got.sigma[c] - raw.sigma[c])});
    add("stain_normalize", e);
  }
  {  // smoothing: spots at x = 0, 1, 3 with k = 2, median neighbor distance 2
    Matrix c(3, 2), v(3, 1);
    c << 0, 0, 1, 0, 3, 0;
    v << 1, 2, 5;
    auto w = [](double d) { return std::exp(-d * d / 8.0); };
    const double lam = 0.3;
    Vector expect(3);
    expect << (1 - lam) * 1 + lam * (w(1) * 2 + w(3) * 5) / (w(1) + w(3)),
        (1 - lam) * 2 + lam * (w(1) * 1 + w(2) * 5) / (w(1) + w(2)),
        (1 - lam) * 5 + lam * (w(3) * 1 + w(2) * 2) / (w(3) + w(2));
    add("smooth_embeddings", (smooth_embeddings(v, c, 2, lam).col(0) - expect).cwiseAbs().maxCoeff());
  }
  {  // path graph 0-1-2 with self loops: degrees 2, 3, 2
    Matrix a(3, 3);
    a << 1, 1, 0, 1, 1, 1, 0, 1, 1;
    Matrix expect(3, 3);
    expect << 0.5, 1 / std::sqrt(6.0), 0, 1 / std::sqrt(6.0), 1.0 / 3.0, 1 / std::sqrt(6.0), 0, 1 / std::sqrt(6.0), 0.5;
    add("normalize_adjacency", (normalize_adjacency(a) - expect).cwiseAbs().maxCoeff());
  }

  double worst = 0.0;
  std::string worst_name, failed;
  for (const auto& [n, e] : errs) {
    if (!(e <= 1e-6)) failed += " " + n;
    if (!(e <= worst)) {
      worst = e;
      worst_name = n;
    }
  }
  return {failed.empty(), std::to_string(errs.size()) + " oracles, max abs error " + fmt(worst) + " (" + worst_name + ")" +
                              (failed.empty() ? "" : ", failing:" + failed)};
}

// ---------------------------------------------------------------- criterion 3

Outcome distributional_identities() {
  const Matrix u = random_matrix(50, 8, 11);
  ad::Tape t;
  const double mmd = fisher_mmd(t.constant(u), t.constant(u)).scalar();
  const Matrix h = random_matrix(20, 6, 12);
  const Matrix h_moved = h + 0.1 * random_matrix(20, 6, 13);
  const double sdm_same = loss_sdm(h, h, 0.12), sdm_moved = loss_sdm(h_moved, h, 0.12);
  const Matrix mu = random_matrix(4, 6, 14);
  const Matrix q = soft_assign(h, mu), q_moved = soft_assign(h_moved, mu);
  const double dec_same = loss_dec(q, q), dec_moved = loss_dec(q, q_moved);
  const bool ok = std::abs(mmd) <= 1e-8 && sdm_same == 0.0 && dec_same == 0.0 && sdm_moved > 1e-6 && dec_moved > 1e-6;
  return {ok, "MMD(U,U)=" + fmt(mmd) + ", sdm " + fmt(sdm_same) + " -> " + fmt(sdm_moved) + ", dec " + fmt(dec_same) +
                  " -> " + fmt(dec_moved)};
}

// ---------------------------------------------------------------- criterion 4

Outcome diffusion_invariants() {
  int anchor_violations = 0, row_violations = 0, adoption_failures = 0;
  for (std::uint64_t s = 1; s <= 100; ++s) {
    const Matrix coords = random_matrix(100, 2, 1000 + s, 0.0, 100.0);
    const Matrix w = build_gaussian_kernel(coords, 6).W;
    SeededRng rng(2000 + s);
    Labels l(100);
    for (auto& x : l) x = static_cast<int>(rng.uniform_index(3));
    l[1] = 0;
    l[2] = 1;
    l[3] = 2;
    // spot 0 gets a unanimous neighborhood (label 2), pinned as anchors
    std::vector<Index> nb;
    for (Index j = 1; j < 100; ++j)
      if (w(0, j) > 0.0) nb.push_back(j);
    for (Index j : nb) l[static_cast<std::size_t>(j)] = 2;
    l[0] = 0;
    std::vector<Index> anchors = find_anchors(l, w, 0.01);
    anchors.insert(anchors.end(), nb.begin(), nb.end());
    std::sort(anchors.begin(), anchors.end());
    anchors.erase(std::unique(anchors.begin(), anchors.end()), anchors.end());
    anchors.erase(std::remove(anchors.begin(), anchors.end(), Index{0}), anchors.end());
    std::set<Index> pinned(anchors.begin(), anchors.end());
    const int c = count_labels(l);
    const Matrix y0 = one_hot(l, c);
    bool adopted = false;
    const auto r = propagate_labels(y0, w, anchors, 50, 1e-6, [&](int it, const Matrix& y) {
      for (Index i = 0; i < 100; ++i) {
        if (pinned.count(i)) {
          anchor_violations += y.row(i) != y0.row(i);
        } else {
          row_violations += y.row(i).minCoeff() < 0.0 || std::abs(y.row(i).sum() - 1.0) > 1e-9;
        }
      }
      if (it == 1) {
        Index best = 0;
        y.row(0).maxCoeff(&best);
        adopted = best == 2;
      }
    });
    adoption_failures += !adopted;
    for (Index a : anchors) anchor_violations += r.labels[static_cast<std::size_t>(a)] != l[static_cast<std::size_t>(a)];
  }
  return {anchor_violations == 0 && row_violations == 0 && adoption_failures == 0,
          "100 instances: anchor changes " + std::to_string(anchor_violations) + ", non-stochastic rows " +
              std::to_string(row_violations) + ", unanimous-neighbor misses " + std::to_string(adoption_failures)};
}

// ---------------------------------------------------------------- criterion 5

Outcome stain_moments() {
  SeededRng rng(7);
  const Dataset ds = generate_synthetic(SyntheticSpec{}, rng);
  const RgbImage& slide = *ds.image;
  const auto patches = extract_patches(slide, ds.coords, ds.scale_factor);
  const RunConfig defaults;
  SeededRng sel_rng = stage_rng(7, Stream::Image);
  const auto sel = select_target_patches(patches, score_patches(patches), defaults.stain_clusters,
                                         defaults.stain_top_fraction, sel_rng);
  const RgbImage out = stain_normalize(slide, foreground_stats(slide), sel.stats);
  double sum[3] = {0, 0, 0}, sq[3] = {0, 0, 0}, n = 0;
  for (int y = 0; y < slide.height; ++y)
    for (int x = 0; x < slide.width; ++x) {
      if (!is_foreground(slide.at(y, x, 0), slide.at(y, x, 1), slide.at(y, x, 2))) continue;
      n += 1;
      for (int c = 0; c < 3; ++c) {
        sum[c] += out.at(y, x, c);
        sq[c] += static_cast<double>(out.at(y, x, c)) * out.at(y, x, c);
      }
    }
  double mean_err = 0.0, std_rel = 0.0;
  for (int c = 0; c < 3; ++c) {
    const double m = sum[c] / n, sd = std::sqrt(sq[c] / n - m * m);
    mean_err = std::max(mean_err, std::abs(m - sel.stats.mu[c]));
    std_rel = std::max(std_rel, std::abs(sd - sel.stats.sigma[c]) / sel.stats.sigma[c]);
  }
  return {mean_err <= 0.5 && std_rel <= 0.02,
          "max mean error " + fmt(mean_err) + " gray levels, max std error " + fmt(100.0 * std_rel) + "%"};
}

// ---------------------------------------------------------------- criteria 6 and 7

struct RunOutput {
  MetricsReport metrics;
  MetricsReport gmm_metrics;
  fs::path dir;
};

fs::path write_synthetic(const fs::path& root, const std::string& name, const SyntheticSpec& spec, std::uint64_t seed) {
  SeededRng rng(seed);
  const fs::path dir = root / name;
  save_dataset(generate_synthetic(spec, rng), dir.string());
  return dir;
}

RunOutput full_run(const fs::path& data, const fs::path& out, bool use_image) {
  RunConfig cfg;
  cfg.data = data.string();
  cfg.out = out.string();
  cfg.seed = 7;
  cfg.clusters = 4;
  cfg.use_image = use_image;
  if (!use_image) cfg.stage3.alpha = 1.0;
  const PipelineResult r = run_pipeline(cfg);
  RunOutput o;
  o.metrics = *r.metrics;
  o.gmm_metrics = evaluate_labels(r.refinement.gmm.labels, *r.prepared.data.labels);
  o.dir = out;
  return o;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string triple(const MetricsReport& m) {
  return "ARI " + fmt(m.ari, 3) + " AMI " + fmt(m.ami, 3) + " Completeness " + fmt(m.completeness, 3);
}

Outcome end_to_end(const fs::path& root, RunOutput& default_run) {
  const auto t0 = Clock::now();
  const fs::path data = write_synthetic(root, "synth_default", SyntheticSpec{}, 7);
  default_run = full_run(data, root / "run_default", true);
  SyntheticSpec grouped;
  grouped.expression_groups = 2;
  const fs::path gdata = write_synthetic(root, "synth_grouped", grouped, 7);
  const RunOutput fused = full_run(gdata, root / "run_grouped_fused", true);
  const RunOutput ablation = full_run(gdata, root / "run_grouped_expr_only", false);
  const double secs = seconds_since(t0);
  const MetricsReport& m = default_run.metrics;
  const bool recovery = m.ari >= 0.9 && m.ami >= 0.9 && m.completeness >= 0.9;
  const bool beats = fused.metrics.ari > ablation.metrics.ari;
  return {recovery && beats && secs < 600.0,
          "default: " + triple(m) + " (GMM before diffusion: ARI " + fmt(default_run.gmm_metrics.ari, 3) +
              "); grouped generator: fused ARI " + fmt(fused.metrics.ari, 3) + " vs expression-only ARI " +
              fmt(ablation.metrics.ari, 3) + "; " + fmt(secs, 3) + " s"};
}

Outcome determinism(const fs::path& root, const RunOutput& first) {
  const RunOutput second = full_run(root / "synth_default", root / "run_default_again", true);
  std::string differ;
  for (const char* f : {"labels.csv", "metrics.json", "losses_stage1.csv", "losses_stage2.csv", "losses_stage3.csv"})
    if (read_bytes(first.dir / f) != read_bytes(second.dir / f) || read_bytes(first.dir / f).empty()) differ += std::string(" ") + f;
  return {differ.empty(), differ.empty() ? "labels.csv, metrics.json and 3 loss traces byte-identical"
                                         : "differing:" + differ};
}

// ---------------------------------------------------------------- criterion 8

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

std::map<int, double> label_counts(const Labels& l) {
  std::map<int, double> m;
  for (int x : l) m[x] += 1;
  return m;
}

double entropy(const Labels& l) {
  double h = 0;
  const double n = static_cast<double>(l.size());
  for (auto [k, c] : label_counts(l)) h -= c / n * std::log(c / n);
  return h;
}

double mutual_info(const Labels& p, const Labels& t) {
  std::map<std::pair<int, int>, double> joint;
  for (std::size_t i = 0; i < p.size(); ++i) joint[{p[i], t[i]}] += 1;
  const auto cp = label_counts(p), ct = label_counts(t);
  const double n = static_cast<double>(p.size());
  double s = 0;
  for (auto [k, c] : joint) s += c / n * std::log(n * c / (cp.at(k.first) * ct.at(k.second)));
  return s;
}

double binom(int n, int k) {
  if (k < 0 || k > n) return 0.0;
  double r = 1;
  for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

double oracle_ari(const Labels& p, const Labels& t) {
  if (p == t) return 1.0;
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

double oracle_ami(const Labels& p, const Labels& t) {
  if (p == t) return 1.0;
  const int n = static_cast<int>(p.size());
  double e = 0;
  for (auto [ki, a] : label_counts(p))
    for (auto [kj, b] : label_counts(t)) {
      const int ai = static_cast<int>(a), bj = static_cast<int>(b);
      for (int nij = 1; nij <= std::min(ai, bj); ++nij) {
        const double prob = binom(ai, nij) * binom(n - ai, bj - nij) / binom(n, bj);
        if (prob > 0.0) e += prob * nij / n * std::log(static_cast<double>(n) * nij / (a * b));
      }
    }
  return (mutual_info(p, t) - e) / (0.5 * (entropy(p) + entropy(t)) - e);
}

double oracle_completeness(const Labels& p, const Labels& t) {
  const double hp = entropy(p);
  if (hp == 0.0) return 1.0;
  std::map<int, Labels> groups;
  for (std::size_t i = 0; i < p.size(); ++i) groups[t[i]].push_back(p[i]);
  double hc = 0;
  for (const auto& [k, members] : groups) hc += static_cast<double>(members.size()) / p.size() * entropy(members);
  return 1.0 - hc / hp;
}

Outcome metric_correctness() {
  double worst = 0.0;
  long pairs = 0;
  for (int n = 1; n <= 8; ++n) {
    const auto all = canonical_labelings(n, 3);
    for (const auto& p : all)
      for (const auto& t : all) {
        ++pairs;
        worst = std::max({worst, std::abs(metric_ari(p, t) - oracle_ari(p, t)),
                          std::abs(metric_ami(p, t) - oracle_ami(p, t)),
                          std::abs(metric_completeness(p, t) - oracle_completeness(p, t))});
      }
  }
  return {worst <= 1e-9, std::to_string(pairs) + " labeling pairs, max deviation " + fmt(worst)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  bool report = false, keep = false;
  std::string work;
  std::vector<int> only;
  app.add_flag("--report", report, "always exit 0 after printing every line");
  app.add_option("--work-dir", work, "directory for synthetic data and run outputs");
  app.add_flag("--keep", keep, "keep the work directory");
  app.add_option("--only", only, "criteria to run");
  CLI11_PARSE(app, argc, argv);

  const fs::path root =
      work.empty() ? fs::temp_directory_path() / ("multist_acceptance_" + std::to_string(::getpid())) : fs::path(work);
  fs::create_directories(root);

  auto wanted = [&](int k) { return only.empty() || std::find(only.begin(), only.end(), k) != only.end(); };
  int failures = 0;
  auto line = [&](int k, const std::string& title, const std::function<Outcome()>& f) {
    if (!wanted(k)) return;
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  [" << k << "] " << title << ": " << o.detail << std::endl;
  };

  RunOutput default_run;
  bool have_default = false;
  line(1, "gradient correctness", gradient_correctness);
  line(2, "equation-level oracles", equation_oracles);
  line(3, "distributional identities", distributional_identities);
  line(4, "diffusion invariants", diffusion_invariants);
  line(5, "stain normalization moments", stain_moments);
  line(6, "end-to-end synthetic recovery", [&] {
    Outcome o = end_to_end(root, default_run);
    have_default = true;
    return o;
  });
  line(7, "determinism", [&] {
    if (!have_default) {
      const fs::path data = write_synthetic(root, "synth_default", SyntheticSpec{}, 7);
      default_run = full_run(data, root / "run_default", true);
    }
    return determinism(root, default_run);
  });
  line(8, "metric correctness", metric_correctness);

  if (!keep && work.empty()) fs::remove_all(root);
  std::cout << failures << " criteria failed" << std::endl;
  return report ? 0 : failures;
}
