#pragma once

// Cross-attention fusion of the expression latent and smoothed image features,
// trained with similarity-distribution matching and cross-modal InfoNCE.

#include <cmath>
#include <string>
#include <vector>

#include "multist/gene_encoder.hpp"

namespace multist {

enum class FusionDirection { Bidirectional, ImageToGene };

inline const char* to_string(FusionDirection d) {
  return d == FusionDirection::Bidirectional ? "bidirectional" : "image_to_gene";
}

inline FusionDirection parse_direction(const std::string& s) {
  if (s == "bidirectional") return FusionDirection::Bidirectional;
  if (s == "image_to_gene") return FusionDirection::ImageToGene;
  throw Error(ErrorCode::InvalidArgument, "unknown fusion direction " + s);
}

/// Projections are stored input-by-output so that rows map as x * W.
template <class T>
struct FusionWeights {
  T wq_g, wk_g, wv_g, res_g;  // d_z x d
  T wq_i, wk_i, wv_i, res_i;  // d_v x d

  template <class F>
  void visit(F&& f) {
    f("wq_g", wq_g); f("wk_g", wk_g); f("wv_g", wv_g); f("res_g", res_g);
    f("wq_i", wq_i); f("wk_i", wk_i); f("wv_i", wv_i); f("res_i", res_i);
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<FusionWeights*>(this)->visit([&](const char* n, const T& v) { f(n, v); });
  }
  template <class F>
  auto map(F&& f) const {
    using U = decltype(f("", wq_g));
    return FusionWeights<U>{f("wq_g", wq_g), f("wk_g", wk_g), f("wv_g", wv_g), f("res_g", res_g),
                            f("wq_i", wq_i), f("wk_i", wk_i), f("wv_i", wv_i), f("res_i", res_i)};
  }
};

struct FusionParams {
  FusionWeights<Matrix> w;
  int heads = 4;
  double alpha = 0.7;
  double tau = 0.12;
  FusionDirection direction = FusionDirection::Bidirectional;

  Index dim() const { return w.wq_g.cols(); }
};

struct FusedEmbedding {
  Matrix h_gene;
  Matrix h_image;
  Matrix h_fusion;
};

inline FusionParams init_fusion(Index d_z, Index d_v, Index d, int heads, SeededRng& rng) {
  require(heads >= 1 && d % heads == 0, ErrorCode::InvalidArgument, "fusion width must be divisible by the head count");
  FusionParams p;
  p.heads = heads;
  p.w.wq_g = glorot(d_z, d, rng);
  p.w.wk_g = glorot(d_z, d, rng);
  p.w.wv_g = glorot(d_z, d, rng);
  p.w.res_g = glorot(d_z, d, rng);
  p.w.wq_i = glorot(d_v, d, rng);
  p.w.wk_i = glorot(d_v, d, rng);
  p.w.wv_i = glorot(d_v, d, rng);
  p.w.res_i = glorot(d_v, d, rng);
  return p;
}

inline void validate_fusion(const FusionParams& p) {
  require(p.heads >= 1 && p.dim() % p.heads == 0, ErrorCode::InvalidArgument, "fusion width must be divisible by the head count");
  require(p.alpha >= 0.0 && p.alpha <= 1.0, ErrorCode::InvalidArgument, "alpha must lie in [0,1]");
  require(p.tau > 0.0, ErrorCode::InvalidArgument, "tau must be positive");
}

/// Multi-head attention of `queries` over all rows of `keys`/`values`.
inline ad::Var multi_head_attention(ad::Var queries, ad::Var keys, ad::Var values, int heads) {
  const Index d = queries.cols();
  const Index dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  ad::Var out;
  for (int h = 0; h < heads; ++h) {
    const ad::Var q = ad::slice_cols(queries, h * dh, dh);
    const ad::Var k = ad::slice_cols(keys, h * dh, dh);
    const ad::Var v = ad::slice_cols(values, h * dh, dh);
    const ad::Var head = ad::matmul(ad::row_softmax(ad::matmul_bt(q, k) * scale), v);
    out = h == 0 ? head : ad::concat_cols(out, head);
  }
  return out;
}

struct FusedVars {
  ad::Var h_gene, h_image;
};

inline FusedVars cross_attend(const FusionWeights<ad::Var>& w, ad::Var z, ad::Var v, int heads, FusionDirection dir) {
  require(z.rows() == v.rows(), ErrorCode::RowMisalignment,
          "expression latent has " + std::to_string(z.rows()) + " rows but image features have " +
              std::to_string(v.rows()));
  require(z.cols() == w.wq_g.rows() && v.cols() == w.wq_i.rows(), ErrorCode::DimensionMismatch,
          "fusion projection widths do not match the inputs");
  FusedVars out;
  out.h_gene = multi_head_attention(ad::matmul(z, w.wq_g), ad::matmul(v, w.wk_i), ad::matmul(v, w.wv_i), heads) +
               ad::matmul(z, w.res_g);
  if (dir == FusionDirection::Bidirectional)
    out.h_image = multi_head_attention(ad::matmul(v, w.wq_i), ad::matmul(z, w.wk_g), ad::matmul(z, w.wv_g), heads) +
                  ad::matmul(v, w.res_i);
  else
    out.h_image = ad::matmul(v, w.res_i);
  return out;
}

/// alpha * h_gene + (1 - alpha) * h_image.
inline Matrix fuse(const Matrix& h_gene, const Matrix& h_image, double alpha) {
  require(h_gene.rows() == h_image.rows() && h_gene.cols() == h_image.cols(), ErrorCode::DimensionMismatch,
          "fused embeddings differ in shape");
  return alpha * h_gene + (1.0 - alpha) * h_image;
}

inline FusedEmbedding cross_attend(const Matrix& z, const Matrix& v, const FusionParams& p) {
  validate_fusion(p);
  ad::Tape t;
  const auto r = cross_attend(bind_constants(t, p.w), t.constant(z), t.constant(v), p.heads, p.direction);
  FusedEmbedding e;
  e.h_gene = r.h_gene.value();
  e.h_image = r.h_image.value();
  e.h_fusion = fuse(e.h_gene, e.h_image, p.alpha);
  return e;
}

/// Attention weights of one head for the gene-query direction (N x N).
inline Matrix gene_attention_weights(const Matrix& z, const Matrix& v, const FusionParams& p, int head) {
  validate_fusion(p);
  const Index dh = p.dim() / p.heads;
  const Matrix q = (z * p.w.wq_g).middleCols(head * dh, dh);
  const Matrix k = (v * p.w.wk_i).middleCols(head * dh, dh);
  ad::Tape t;
  return ad::row_softmax(t.constant(q * k.transpose() / std::sqrt(static_cast<double>(dh)))).value();
}

// ---------------------------------------------------------------------------
// Stage III losses

/// Row log-softmax of cosine similarities / tau, self-pairs excluded.
inline ad::Var similarity_log_distribution(ad::Var h, double tau) {
  const ad::Var hn = ad::row_normalize(h);
  const Matrix off = Matrix::Ones(h.rows(), h.rows()) - Matrix::Identity(h.rows(), h.rows());
  return ad::row_log_softmax(ad::matmul_bt(hn, hn) * (1.0 / tau), &off);
}

inline ad::Var loss_sdm(ad::Var h_i, ad::Var h_g, double tau) {
  require(h_i.rows() >= 2, ErrorCode::SingleRow, "similarity distributions need at least two rows");
  require(h_i.rows() == h_g.rows(), ErrorCode::RowMisalignment, "embeddings differ in row count");
  ad::Tape& t = *h_i.tape();
  const Index n = h_i.rows();
  const ad::Var off = t.constant(Matrix::Ones(n, n) - Matrix::Identity(n, n));
  const ad::Var lp_i = similarity_log_distribution(h_i, tau);
  const ad::Var lp_g = similarity_log_distribution(h_g, tau);
  const ad::Var p_i = ad::hadamard(ad::exp(lp_i), off);
  const ad::Var p_g = ad::hadamard(ad::exp(lp_g), off);
  const ad::Var kl_ig = ad::sum(ad::hadamard(p_i, lp_i - lp_g));
  const ad::Var kl_gi = ad::sum(ad::hadamard(p_g, lp_g - lp_i));
  return (kl_ig + kl_gi) * (0.5 / static_cast<double>(n));
}

inline ad::Var loss_contrastive(ad::Var h_i, ad::Var h_g, double tau) {
  require(h_i.rows() == h_g.rows(), ErrorCode::RowMisalignment, "embeddings differ in row count");
  ad::Tape& t = *h_i.tape();
  const Index n = h_i.rows();
  const ad::Var logits = ad::matmul_bt(ad::row_normalize(h_i), ad::row_normalize(h_g)) * (1.0 / tau);
  const ad::Var eye = t.constant(Matrix::Identity(n, n));
  const ad::Var fwd = ad::sum(ad::hadamard(ad::row_log_softmax(logits), eye));
  const ad::Var bwd = ad::sum(ad::hadamard(ad::row_log_softmax(ad::transpose(logits)), eye));
  return (fwd + bwd) * (-0.5 / static_cast<double>(n));
}

inline ad::Var loss_reg(ad::Var h_i, ad::Var h_g) {
  const double s = 1.0 / std::sqrt(static_cast<double>(h_i.value().size()));
  return (ad::frobenius(h_i) + ad::frobenius(h_g)) * s;
}

inline double loss_sdm(const Matrix& h_i, const Matrix& h_g, double tau) {
  ad::Tape t;
  return loss_sdm(t.constant(h_i), t.constant(h_g), tau).scalar();
}

inline double loss_contrastive(const Matrix& h_i, const Matrix& h_g, double tau) {
  ad::Tape t;
  return loss_contrastive(t.constant(h_i), t.constant(h_g), tau).scalar();
}

inline double loss_reg(const Matrix& h_i, const Matrix& h_g) {
  require(h_i.rows() == h_g.rows() && h_i.cols() == h_g.cols(), ErrorCode::DimensionMismatch, "embeddings differ in shape");
  ad::Tape t;
  return loss_reg(t.constant(h_i), t.constant(h_g)).scalar();
}

// ---------------------------------------------------------------------------
// Stage III training

struct Stage3Config {
  double lambda_sdm = 1.0;
  double lambda_con = 1.0;
  double lambda_reg = 0.01;
  int epochs = 200;
  double lr = 1e-3;
  Index dim = 64;
  int heads = 4;
  double alpha = 0.7;
  double tau = 0.12;
  FusionDirection direction = FusionDirection::Bidirectional;
  bool freeze_encoder = true;
};

/// Fusion weights, plus the encoder when it is fine-tuned.
template <class T>
struct Stage3Trainables {
  FusionWeights<T> fusion;
  EncoderWeights<T> encoder;
  bool with_encoder = false;

  template <class F>
  void visit(F&& f) {
    fusion.visit(f);
    if (with_encoder) encoder.visit(f);
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<Stage3Trainables*>(this)->visit([&](const char* n, const T& v) { f(n, v); });
  }
  template <class F>
  auto map(F&& f) const {
    using U = decltype(f("", fusion.wq_g));
    Stage3Trainables<U> out{fusion.map(f), {}, with_encoder};
    if (with_encoder) out.encoder = encoder.map(f);
    return out;
  }
};

struct Stage3Losses {
  double sdm = 0, con = 0, reg = 0, total = 0;
};

/// Stage III inputs. Either `z` is given (frozen encoder) or the encoder is
/// re-run from `x` on every evaluation.
struct Stage3Batch {
  const Matrix* z = nullptr;
  const Matrix* v = nullptr;
  const Matrix* x = nullptr;
  const SpatialGraph* graph = nullptr;
  BatchNormStats running;
};

struct Stage3Evaluation {
  Stage3Losses losses;
  Stage3Trainables<Matrix> grads;
  Matrix h_gene, h_image;
};

inline Stage3Evaluation evaluate_stage3(const Stage3Trainables<Matrix>& params, const Stage3Batch& b,
                                        const Stage3Config& cfg, bool want_grad) {
  ad::Tape t;
  const auto p = bind_parameters(t, params);
  ad::Var z;
  if (params.with_encoder) {
    const ad::Var adj = t.constant(b.graph->normalized);
    z = encode(p.encoder, t.constant(*b.x), adj, Mode::Eval, b.running).z;
  } else {
    z = t.constant(*b.z);
  }
  const FusedVars h = cross_attend(p.fusion, z, t.constant(*b.v), cfg.heads, cfg.direction);
  const ad::Var sdm = loss_sdm(h.h_image, h.h_gene, cfg.tau);
  const ad::Var con = loss_contrastive(h.h_image, h.h_gene, cfg.tau);
  const ad::Var reg = loss_reg(h.h_image, h.h_gene);
  const ad::Var total = sdm * cfg.lambda_sdm + con * cfg.lambda_con + reg * cfg.lambda_reg;

  Stage3Evaluation out;
  out.losses = {sdm.scalar(), con.scalar(), reg.scalar(), total.scalar()};
  out.h_gene = h.h_gene.value();
  out.h_image = h.h_image.value();
  if (want_grad) {
    t.backward(total);
    out.grads = collect_grads(t, p);
  }
  return out;
}

inline Objective stage3_objective(const Stage3Trainables<Matrix>& shape, const Stage3Batch& batch,
                                  const Stage3Config& cfg) {
  return [shape, batch, cfg](const Vector& flat, Vector* grad) {
    Stage3Trainables<Matrix> p = shape;
    unflatten(p, flat);
    const auto e = evaluate_stage3(p, batch, cfg, grad != nullptr);
    if (grad) *grad = flatten(e.grads);
    return e.losses.total;
  };
}

struct Stage3Result {
  FusionParams params;
  FusedEmbedding embedding;
  LossTrace trace;
  EncoderParams encoder;  // fine-tuned copy when the encoder was unfrozen
  Matrix z;               // latent the fusion consumed at the end of training
};

namespace detail {

inline Stage3Result run_stage3(Stage3Trainables<Matrix> params, Stage3Batch batch, const Stage3Config& cfg,
                               FusionParams shape, EncoderParams encoder) {
  Stage3Result res;
  res.trace.columns = {"epoch", "sdm", "con", "reg", "total"};
  Adam opt({cfg.lr});
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto e = evaluate_stage3(params, batch, cfg, true);
    check_finite_loss(e.losses.total, epoch, "stage III");
    Vector flat = flatten(params);
    const Vector g = flatten(e.grads);
    require(g.allFinite(), ErrorCode::DivergedLoss, "stage III gradient became non-finite at epoch " + std::to_string(epoch));
    opt.step(flat, g);
    unflatten(params, flat);
    const auto& l = e.losses;
    res.trace.add({static_cast<double>(epoch), l.sdm, l.con, l.reg, l.total});
  }
  shape.w = params.fusion;
  res.params = shape;
  if (params.with_encoder) {
    encoder.w = params.encoder;
    res.z = encode_eval(encoder, *batch.x, batch.graph->normalized);
  } else {
    res.z = *batch.z;
  }
  res.encoder = encoder;
  res.embedding = cross_attend(res.z, *batch.v, res.params);
  require_finite(res.embedding.h_fusion, "fused embedding");
  return res;
}

inline FusionParams fusion_shape(Index d_z, Index d_v, const Stage3Config& cfg, SeededRng& rng) {
  FusionParams p = init_fusion(d_z, d_v, cfg.dim, cfg.heads, rng);
  p.alpha = cfg.alpha;
  p.tau = cfg.tau;
  p.direction = cfg.direction;
  validate_fusion(p);
  return p;
}

}  // namespace detail

/// Trains the fusion weights on a fixed latent `z`.
inline Stage3Result train_stage3(const Matrix& z, const Matrix& v, const Stage3Config& cfg, SeededRng& rng) {
  require(z.rows() == v.rows(), ErrorCode::RowMisalignment, "latent and image features differ in row count");
  require_finite(v, "image features");
  const FusionParams shape = detail::fusion_shape(z.cols(), v.cols(), cfg, rng);
  Stage3Batch batch;
  batch.z = &z;
  batch.v = &v;
  return detail::run_stage3({shape.w, {}, false}, batch, cfg, shape, {});
}

/// As above, but re-encodes `x` each step and fine-tunes the encoder when
/// `cfg.freeze_encoder` is false.
inline Stage3Result train_stage3(const EncoderParams& encoder, const Matrix& x, const SpatialGraph& graph,
                                 const Matrix& v, const Stage3Config& cfg, SeededRng& rng) {
  require(x.rows() == v.rows(), ErrorCode::RowMisalignment, "expression and image features differ in row count");
  if (cfg.freeze_encoder) {
    const Matrix z = encode_eval(encoder, x, graph.normalized);
    Stage3Result r = train_stage3(z, v, cfg, rng);
    r.encoder = encoder;
    return r;
  }
  require_finite(v, "image features");
  const FusionParams shape = detail::fusion_shape(encoder.latent_dim(), v.cols(), cfg, rng);
  Stage3Batch batch;
  batch.v = &v;
  batch.x = &x;
  batch.graph = &graph;
  batch.running = encoder.running;
  return detail::run_stage3({shape.w, encoder.w, true}, batch, cfg, shape, encoder);
}

}  // namespace multist
