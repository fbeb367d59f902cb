#pragma once

// Deep embedded clustering on the Stage I latent space, plus the final
// refinement: GMM labels, high-agreement anchors and spatial label diffusion.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "multist/gene_encoder.hpp"
#include "multist/gmm.hpp"
#include "multist/kmeans.hpp"

namespace multist {

// ---------------------------------------------------------------------------
// Soft assignment

/// Student-t soft assignment of each row of `z` to each centroid.
inline Matrix soft_assign(const Matrix& z, const Matrix& centroids, double alpha = 1.0) {
  require(z.cols() == centroids.cols(), ErrorCode::DimensionMismatch, "latent and centroid widths differ");
  require(alpha > 0.0, ErrorCode::InvalidArgument, "alpha must be positive");
  Matrix q(z.rows(), centroids.rows());
  const double power = -(alpha + 1.0) / 2.0;
  for (Index i = 0; i < z.rows(); ++i) {
    for (Index j = 0; j < centroids.rows(); ++j)
      q(i, j) = std::pow(1.0 + (z.row(i) - centroids.row(j)).squaredNorm() / alpha, power);
    q.row(i) /= q.row(i).sum();
  }
  return q;
}

/// p_ij = (q_ij^2 / f_j) / sum_j' (q_ij'^2 / f_j'), f_j = sum_i q_ij.
inline Matrix target_distribution(const Matrix& q) {
  const RowVector f = q.colwise().sum();
  Matrix p(q.rows(), q.cols());
  for (Index i = 0; i < q.rows(); ++i) {
    for (Index j = 0; j < q.cols(); ++j) p(i, j) = f(j) > 0.0 ? q(i, j) * q(i, j) / f(j) : 0.0;
    const double s = p.row(i).sum();
    if (s > 0.0) p.row(i) /= s;
  }
  return p;
}

/// KL(P || Q) = sum_ij p_ij log(p_ij / q_ij), with 0 log 0 = 0.
inline double loss_dec(const Matrix& p, const Matrix& q) {
  require(p.rows() == q.rows() && p.cols() == q.cols(), ErrorCode::DimensionMismatch, "P and Q shapes differ");
  double kl = 0.0;
  for (Index i = 0; i < p.rows(); ++i)
    for (Index j = 0; j < p.cols(); ++j)
      if (p(i, j) > 0.0) kl += p(i, j) * std::log(p(i, j) / q(i, j));
  return kl;
}

/// Index of the nearest row of `real` for every row of `generated`.
inline std::vector<Index> nearest_rows(const Matrix& generated, const Matrix& real) {
  std::vector<Index> out(static_cast<std::size_t>(generated.rows()));
  for (Index i = 0; i < generated.rows(); ++i) {
    Index best = 0;
    (real.rowwise() - generated.row(i)).rowwise().squaredNorm().minCoeff(&best);
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

/// Mean over generated rows of KL(q~_i || q_m(i)), m(i) the nearest real
/// latent, plus the Fisher-kernel MMD between the two latent sets.
inline double consistency_loss(const Matrix& z, const Matrix& z_gen, const Matrix& q, const Matrix& q_gen) {
  require(z_gen.rows() > 0, ErrorCode::EmptyGenerated, "no generated samples");
  require(z.rows() == q.rows() && z_gen.rows() == q_gen.rows() && q.cols() == q_gen.cols(),
          ErrorCode::DimensionMismatch, "latent and assignment shapes differ");
  const auto match = nearest_rows(z_gen, z);
  double kl = 0.0;
  for (Index i = 0; i < z_gen.rows(); ++i) {
    const Index m = match[static_cast<std::size_t>(i)];
    for (Index j = 0; j < q.cols(); ++j)
      if (q_gen(i, j) > 0.0) kl += q_gen(i, j) * std::log(q_gen(i, j) / q(m, j));
  }
  kl /= static_cast<double>(z_gen.rows());
  ad::Tape t;
  return kl + fisher_mmd(t.constant(z), t.constant(z_gen)).scalar();
}

// Tape versions used by Stage II training.

inline ad::Var soft_assign(ad::Var z, ad::Var centroids, double alpha) {
  const ad::Var d2 = ad::add_row(ad::add_col(ad::matmul_bt(z, centroids) * -2.0, ad::row_sum(ad::square(z))),
                                 ad::transpose(ad::row_sum(ad::square(centroids))));
  const ad::Var kernel = ad::pow(d2 * (1.0 / alpha) + 1.0, -(alpha + 1.0) / 2.0);
  return ad::mul_col(kernel, ad::pow(ad::row_sum(kernel), -1.0));
}

/// KL(P || Q) for a constant target P.
inline ad::Var loss_dec(const Matrix& p, ad::Var q) {
  ad::Tape& t = *q.tape();
  double entropy_part = 0.0;
  for (Index k = 0; k < p.size(); ++k)
    if (p(k) > 0.0) entropy_part += p(k) * std::log(p(k));
  return -ad::sum(ad::hadamard(t.constant(p), ad::log(q))) + entropy_part;
}

inline ad::Var consistency_loss(ad::Var z, ad::Var z_gen, ad::Var q, ad::Var q_gen) {
  const auto match = nearest_rows(z_gen.value(), z.value());
  const ad::Var q_match = ad::gather_rows(q, match);
  const ad::Var kl = ad::sum(ad::hadamard(q_gen, ad::log(q_gen) - ad::log(q_match))) *
                     (1.0 / static_cast<double>(z_gen.rows()));
  return kl + fisher_mmd(z, z_gen);
}

// ---------------------------------------------------------------------------
// Stage II training

struct AssignmentState {
  Matrix centroids;  // K x d_z
  Matrix q;
  Matrix p;
  double alpha_dec = 1.0;
  int k = 0;
};

template <class T>
struct Stage2Trainables {
  EncoderWeights<T> encoder;
  T centroids;

  template <class F>
  void visit(F&& f) {
    encoder.visit(f);
    f("centroids", centroids);
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<Stage2Trainables*>(this)->visit([&](const char* n, const T& v) { f(n, v); });
  }
  template <class F>
  auto map(F&& f) const {
    using U = decltype(f("", centroids));
    return Stage2Trainables<U>{encoder.map(f), f("centroids", centroids)};
  }
};

struct Stage2Config {
  double lambda_rec = 1.0;
  double lambda_graph = 0.3;
  double lambda_dec = 1.0;
  double lambda_gan = 0.1;
  double lambda_kl = 0.01;
  double alpha_dec = 1.0;
  int epochs = 200;
  double lr = 1e-3;
  int refresh_interval = 20;
  double stop_fraction = 0.001;
  Index n_generated = 0;
  double bn_momentum = 0.1;
};

struct Stage2Losses {
  double rec = 0, graph = 0, dec = 0, cons = 0, total = 0;
};

struct Stage2Batch {
  const Matrix* x = nullptr;
  const SpatialGraph* graph = nullptr;
  Matrix target;  // P, held fixed between refreshes
  Matrix noise;
  GeneratorWeights<Matrix> generator;
};

struct Stage2Evaluation {
  Stage2Losses losses;
  Stage2Trainables<Matrix> grads;
  BatchNormStats batch_stats;
};

inline Stage2Evaluation evaluate_stage2(const Stage2Trainables<Matrix>& params, const Stage2Batch& b,
                                        const Stage2Config& cfg, bool want_grad) {
  ad::Tape t;
  const auto p = bind_parameters(t, params);
  const ad::Var x = t.constant(*b.x);
  const ad::Var adj = t.constant(b.graph->normalized);

  const EncodeResult enc = encode(p.encoder, x, adj, Mode::Train, {});
  const ad::Var x_hat = decode_expression(p.encoder, enc.z, adj);
  const ad::Var rec = loss_reconstruction(x_hat, x);
  const ad::Var graph = loss_graph(adjacency_logits(enc.z), b.graph->adjacency, enc.z, cfg.lambda_kl);

  const ad::Var q = soft_assign(enc.z, p.centroids, cfg.alpha_dec);
  const ad::Var dec = loss_dec(b.target, q) * (1.0 / static_cast<double>(b.x->rows()));

  const ad::Var x_gen = generate(bind_constants(t, b.generator), t.constant(b.noise));
  const ad::Var ident = t.constant(Matrix::Identity(b.noise.rows(), b.noise.rows()));
  const EncodeResult enc_gen = encode(p.encoder, x_gen, ident, Mode::Train, {}, &enc.stats);
  const ad::Var cons = consistency_loss(enc.z, enc_gen.z, q, soft_assign(enc_gen.z, p.centroids, cfg.alpha_dec));

  const ad::Var total = rec * cfg.lambda_rec + graph * cfg.lambda_graph + dec * cfg.lambda_dec + cons * cfg.lambda_gan;

  Stage2Evaluation out;
  out.losses = {rec.scalar(), graph.scalar(), dec.scalar(), cons.scalar(), total.scalar()};
  out.batch_stats = {enc.stats.mean1.value(), enc.stats.var1.value(), enc.stats.mean2.value(), enc.stats.var2.value()};
  if (want_grad) {
    t.backward(total);
    out.grads = collect_grads(t, p);
  }
  return out;
}

inline Objective stage2_objective(const Stage2Trainables<Matrix>& shape, const Stage2Batch& batch,
                                  const Stage2Config& cfg) {
  return [shape, batch, cfg](const Vector& flat, Vector* grad) {
    Stage2Trainables<Matrix> p = shape;
    unflatten(p, flat);
    const auto e = evaluate_stage2(p, batch, cfg, grad != nullptr);
    if (grad) *grad = flatten(e.grads);
    return e.losses.total;
  };
}

struct Stage2Result {
  EncoderParams encoder;
  AssignmentState state;
  Matrix z;
  Labels labels;
  LossTrace trace;
  int epochs_run = 0;
};

inline Stage2Result train_stage2(const EncoderParams& encoder, const GanParams& gan, const Matrix& x,
                                 const SpatialGraph& graph, int k, const Stage2Config& cfg, SeededRng& rng) {
  require(k >= 1, ErrorCode::InvalidArgument, "cluster count must be at least 1");
  require(graph.n == x.rows(), ErrorCode::DimensionMismatch, "graph size does not match the number of spots");
  require(cfg.refresh_interval >= 1, ErrorCode::InvalidArgument, "refresh interval must be at least 1");
  const Index n = x.rows();
  const Index n_gen = cfg.n_generated > 0 ? cfg.n_generated : n;

  Stage2Result res;
  res.encoder = encoder;
  res.state.alpha_dec = cfg.alpha_dec;
  res.state.k = k;
  res.trace.columns = {"epoch", "rec", "graph", "dec", "cons", "total"};

  const Matrix z0 = encode_eval(encoder, x, graph.normalized);
  Stage2Trainables<Matrix> params{encoder.w, kmeans_fit(z0, k, rng).centroids};
  Adam opt({cfg.lr});

  Stage2Batch batch;
  batch.x = &x;
  batch.graph = &graph;
  batch.generator = gan.gen;
  Labels previous;
  int collapsed_refreshes = 0;
  const double collapse_mass = 1e-3 * static_cast<double>(n) / static_cast<double>(k);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (epoch % cfg.refresh_interval == 0) {
      EncoderParams cur = res.encoder;
      cur.w = params.encoder;
      cur.running = batch_stats_for(cur, x, graph.normalized);
      const Matrix q = soft_assign(encode_eval(cur, x, graph.normalized), params.centroids, cfg.alpha_dec);
      batch.target = target_distribution(q);
      const Labels labels = argmax_rows(q);
      if (!previous.empty()) {
        std::size_t changed = 0;
        for (std::size_t i = 0; i < labels.size(); ++i) changed += labels[i] != previous[i];
        if (static_cast<double>(changed) < cfg.stop_fraction * static_cast<double>(n)) break;
      }
      previous = labels;
      if (q.colwise().sum().minCoeff() < collapse_mass) {
        if (++collapsed_refreshes >= 3)
          throw Error(ErrorCode::ClusterCollapse, "a cluster lost its soft mass at epoch " + std::to_string(epoch));
      } else {
        collapsed_refreshes = 0;
      }
    }
    batch.noise = sample_noise(n_gen, gan.noise_dim(), rng);
    const auto e = evaluate_stage2(params, batch, cfg, true);
    check_finite_loss(e.losses.total, epoch, "stage II");
    Vector flat = flatten(params);
    const Vector g = flatten(e.grads);
    require(g.allFinite(), ErrorCode::DivergedLoss, "stage II gradient became non-finite at epoch " + std::to_string(epoch));
    opt.step(flat, g);
    unflatten(params, flat);

    auto blend = [&](RowVector& run, const Matrix& v) { run = (1.0 - cfg.bn_momentum) * run + cfg.bn_momentum * RowVector(v); };
    blend(res.encoder.running.mean1, e.batch_stats.mean1);
    blend(res.encoder.running.var1, e.batch_stats.var1);
    blend(res.encoder.running.mean2, e.batch_stats.mean2);
    blend(res.encoder.running.var2, e.batch_stats.var2);

    const auto& l = e.losses;
    res.trace.add({static_cast<double>(epoch), l.rec, l.graph, l.dec, l.cons, l.total});
    res.epochs_run = epoch + 1;
  }

  res.encoder.w = params.encoder;
  res.encoder.running = batch_stats_for(res.encoder, x, graph.normalized);
  res.z = encode_eval(res.encoder, x, graph.normalized);
  require_finite(res.z, "stage II latent embedding");
  res.state.centroids = params.centroids;
  res.state.q = soft_assign(res.z, params.centroids, cfg.alpha_dec);
  res.state.p = target_distribution(res.state.q);
  res.labels = argmax_rows(res.state.q);
  return res;
}

// ---------------------------------------------------------------------------
// Final refinement

struct GmmClustering {
  Labels labels;
  Matrix posteriors;
  GmmModel model;
};

inline GmmClustering gmm_cluster(const Matrix& h, int c, SeededRng& rng, const GmmOptions& opts = {}) {
  GmmClustering r;
  r.model = gmm_em_fit(h, c, rng, opts);
  r.posteriors = gmm_posteriors(r.model, h);
  r.labels = argmax_rows(r.posteriors);
  return r;
}

/// Agree_i = sum_j W_ij [l_j == l_i].
inline Vector agreement_scores(const Labels& labels, const Matrix& w) {
  require(static_cast<Index>(labels.size()) == w.rows() && w.rows() == w.cols(), ErrorCode::DimensionMismatch,
          "kernel size does not match the label count");
  Vector agree = Vector::Zero(w.rows());
  for (Index i = 0; i < w.rows(); ++i)
    for (Index j = 0; j < w.cols(); ++j)
      if (w(i, j) != 0.0 && labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(i)])
        agree(i) += w(i, j);
  return agree;
}

/// The ceil(fraction * size) most agreeing spots of every cluster (at least
/// one each); ties go to the lower index. Returned in ascending order.
inline std::vector<Index> find_anchors(const Labels& labels, const Matrix& w, double fraction = 0.01) {
  require(fraction > 0.0 && fraction <= 1.0, ErrorCode::InvalidArgument, "anchor fraction must lie in (0,1]");
  const Vector agree = agreement_scores(labels, w);
  const int c = count_labels(labels);
  std::vector<std::vector<Index>> members(static_cast<std::size_t>(c));
  for (std::size_t i = 0; i < labels.size(); ++i) members[static_cast<std::size_t>(labels[i])].push_back(static_cast<Index>(i));
  std::vector<Index> anchors;
  for (auto& m : members) {
    if (m.empty()) continue;
    const auto take = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(m.size()) - 1e-12)));
    std::stable_sort(m.begin(), m.end(), [&](Index a, Index b) { return agree(a) > agree(b); });
    anchors.insert(anchors.end(), m.begin(), m.begin() + static_cast<std::ptrdiff_t>(std::min(take, m.size())));
  }
  std::sort(anchors.begin(), anchors.end());
  return anchors;
}

inline Matrix one_hot(const Labels& labels, int c) {
  Matrix y = Matrix::Zero(static_cast<Index>(labels.size()), c);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0 && labels[i] < c, ErrorCode::InvalidArgument, "label outside [0, C)");
    y(static_cast<Index>(i), labels[i]) = 1.0;
  }
  return y;
}

struct DiffusionResult {
  Labels labels;
  Matrix y;
  std::vector<Index> anchors;
  int iterations = 0;
  bool converged = false;
};

/// Called after every iteration with the iteration number (1-based) and Y.
using DiffusionObserver = std::function<void(int, const Matrix&)>;

/// Y <- rownorm(W Y) with anchor rows pinned to their initial one-hot rows.
inline DiffusionResult propagate_labels(const Matrix& y0, const Matrix& w, const std::vector<Index>& anchors,
                                        int max_iter = 50, double tol = 1e-6, const DiffusionObserver& observer = {}) {
  require(w.rows() == y0.rows() && w.cols() == y0.rows(), ErrorCode::DimensionMismatch,
          "kernel size does not match the label matrix");
  require((w.array() >= 0.0).all(), ErrorCode::InvalidArgument, "diffusion kernel must be nonnegative");
  std::vector<char> pinned(static_cast<std::size_t>(y0.rows()), 0);
  for (Index a : anchors) {
    require(a >= 0 && a < y0.rows(), ErrorCode::InvalidArgument, "anchor index out of range");
    pinned[static_cast<std::size_t>(a)] = 1;
  }
  DiffusionResult r;
  r.anchors = anchors;
  r.y = y0;
  for (int it = 1; it <= max_iter; ++it) {
    Matrix next = w * r.y;
    for (Index i = 0; i < next.rows(); ++i) {
      if (pinned[static_cast<std::size_t>(i)]) {
        next.row(i) = y0.row(i);
        continue;
      }
      const double s = next.row(i).sum();
      if (s > 0.0)
        next.row(i) /= s;
      else
        next.row(i) = r.y.row(i);
    }
    const double change = (next - r.y).cwiseAbs().rowwise().sum().maxCoeff();
    r.y = std::move(next);
    r.iterations = it;
    if (observer) observer(it, r.y);
    if (change < tol) {
      r.converged = true;
      break;
    }
  }
  r.labels = argmax_rows(r.y);
  return r;
}

/// gmm_cluster -> find_anchors -> propagate_labels.
struct RefinementResult {
  GmmClustering gmm;
  DiffusionResult diffusion;
};

inline RefinementResult refine_domains(const Matrix& h, int c, const Matrix& w, SeededRng& rng,
                                       double anchor_fraction = 0.01, int max_iter = 50, double tol = 1e-6) {
  RefinementResult r;
  r.gmm = gmm_cluster(h, c, rng);
  const auto anchors = find_anchors(r.gmm.labels, w, anchor_fraction);
  r.diffusion = propagate_labels(one_hot(r.gmm.labels, c), w, anchors, max_iter, tol);
  return r;
}

}  // namespace multist
