#pragma once

// Masked dual-branch graph autoencoder (MLP + GCN) with expression and
// adjacency decoders, a small GAN, and the Fisher-kernel MMD regularizer.

#include <cmath>
#include <string>
#include <tuple>
#include <vector>

#include "multist/autodiff.hpp"
#include "multist/rng.hpp"
#include "multist/gradcheck.hpp"
#include "multist/optim.hpp"
#include "multist/spatial_graph.hpp"
#include "multist/trace.hpp"

namespace multist {

inline constexpr double kBatchNormEps = 1e-5;

// ---------------------------------------------------------------------------
// Parameters

template <class T>
struct EncoderWeights {
  T mlp_w1, mlp_b1, bn1_gamma, bn1_beta;
  T mlp_w2, mlp_b2, bn2_gamma, bn2_beta;
  T gcn_w0, gcn_w1;
  T dec_w, dec_b;

  template <class F>
  void visit(F&& f) {
    f("mlp_w1", mlp_w1); f("mlp_b1", mlp_b1); f("bn1_gamma", bn1_gamma); f("bn1_beta", bn1_beta);
    f("mlp_w2", mlp_w2); f("mlp_b2", mlp_b2); f("bn2_gamma", bn2_gamma); f("bn2_beta", bn2_beta);
    f("gcn_w0", gcn_w0); f("gcn_w1", gcn_w1); f("dec_w", dec_w); f("dec_b", dec_b);
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<EncoderWeights*>(this)->visit([&](const char* n, const T& v) { f(n, v); });
  }
  template <class F>
  auto map(F&& f) const {
    using U = decltype(f("", mlp_w1));
    return EncoderWeights<U>{f("mlp_w1", mlp_w1), f("mlp_b1", mlp_b1), f("bn1_gamma", bn1_gamma),
                             f("bn1_beta", bn1_beta), f("mlp_w2", mlp_w2), f("mlp_b2", mlp_b2),
                             f("bn2_gamma", bn2_gamma), f("bn2_beta", bn2_beta), f("gcn_w0", gcn_w0),
                             f("gcn_w1", gcn_w1), f("dec_w", dec_w), f("dec_b", dec_b)};
  }
};

struct BatchNormStats {
  RowVector mean1, var1, mean2, var2;
};

struct EncoderParams {
  EncoderWeights<Matrix> w;
  BatchNormStats running;

  Index input_dim() const { return w.mlp_w1.rows(); }
  Index d1() const { return w.mlp_w1.cols(); }
  Index d2() const { return w.gcn_w1.cols(); }
  Index latent_dim() const { return d1() + d2(); }
};

template <class T>
struct GeneratorWeights {
  T w1, b1, w2, b2;  // noise -> latent width -> expression width

  template <class F>
  void visit(F&& f) { f("gen_w1", w1); f("gen_b1", b1); f("gen_w2", w2); f("gen_b2", b2); }
  template <class F>
  void visit(F&& f) const {
    const_cast<GeneratorWeights*>(this)->visit([&](const char* n, const T& v) { f(n, v); });
  }
  template <class F>
  auto map(F&& f) const {
    using U = decltype(f("", w1));
    return GeneratorWeights<U>{f("gen_w1", w1), f("gen_b1", b1), f("gen_w2", w2), f("gen_b2", b2)};
  }
};

template <class T>
struct DiscriminatorWeights {
  T w1, b1, w2, b2;  // expression width -> hidden -> 1 logit

  template <class F>
  void visit(F&& f) { f("disc_w1", w1); f("disc_b1", b1); f("disc_w2", w2); f("disc_b2", b2); }
  template <class F>
  void visit(F&& f) const {
    const_cast<DiscriminatorWeights*>(this)->visit([&](const char* n, const T& v) { f(n, v); });
  }
  template <class F>
  auto map(F&& f) const {
    using U = decltype(f("", w1));
    return DiscriminatorWeights<U>{f("disc_w1", w1), f("disc_b1", b1), f("disc_w2", w2), f("disc_b2", b2)};
  }
};

struct GanParams {
  GeneratorWeights<Matrix> gen;
  DiscriminatorWeights<Matrix> disc;

  Index noise_dim() const { return gen.w1.rows(); }
  Index output_dim() const { return gen.w2.cols(); }
  /// Width of the generator's final-layer input; the Fisher feature map lives there.
  Index fisher_input_dim() const { return gen.w2.rows(); }
};

struct MaskState {
  std::vector<Index> masked;  // ascending spot indices
  Matrix perturbation;        // 1 x G
  double ratio = 0.8;
};

struct EncoderDims {
  Index d1 = 64;
  Index d2 = 32;
  Index gcn_hidden = 32;
  Index noise_dim = 32;
  Index disc_hidden = 64;
};

inline Matrix glorot(Index rows, Index cols, SeededRng& rng) {
  const double sd = std::sqrt(2.0 / static_cast<double>(rows + cols));
  Matrix m(rows, cols);
  for (Index k = 0; k < m.size(); ++k) m(k) = sd * rng.normal();
  return m;
}

inline EncoderParams init_encoder(Index genes, const EncoderDims& d, SeededRng& rng) {
  EncoderParams p;
  p.w.mlp_w1 = glorot(genes, d.d1, rng);
  p.w.mlp_b1 = Matrix::Zero(1, d.d1);
  p.w.bn1_gamma = Matrix::Ones(1, d.d1);
  p.w.bn1_beta = Matrix::Zero(1, d.d1);
  p.w.mlp_w2 = glorot(d.d1, d.d1, rng);
  p.w.mlp_b2 = Matrix::Zero(1, d.d1);
  p.w.bn2_gamma = Matrix::Ones(1, d.d1);
  p.w.bn2_beta = Matrix::Zero(1, d.d1);
  p.w.gcn_w0 = glorot(d.d1, d.gcn_hidden, rng);
  p.w.gcn_w1 = glorot(d.gcn_hidden, d.d2, rng);
  p.w.dec_w = glorot(d.d1 + d.d2, genes, rng);
  p.w.dec_b = Matrix::Zero(1, genes);
  p.running = {RowVector::Zero(d.d1), RowVector::Ones(d.d1), RowVector::Zero(d.d1), RowVector::Ones(d.d1)};
  return p;
}

inline GanParams init_gan(Index genes, Index latent_dim, const EncoderDims& d, SeededRng& rng) {
  GanParams g;
  g.gen.w1 = glorot(d.noise_dim, latent_dim, rng);
  g.gen.b1 = Matrix::Zero(1, latent_dim);
  g.gen.w2 = glorot(latent_dim, genes, rng);
  g.gen.b2 = Matrix::Zero(1, genes);
  g.disc.w1 = glorot(genes, d.disc_hidden, rng);
  g.disc.b1 = Matrix::Zero(1, d.disc_hidden);
  g.disc.w2 = glorot(d.disc_hidden, 1, rng);
  g.disc.b2 = Matrix::Zero(1, 1);
  return g;
}

template <class W>
auto bind_parameters(ad::Tape& t, const W& w) {
  return w.map([&](const char*, const Matrix& m) { return t.parameter(m); });
}

template <class W>
auto bind_constants(ad::Tape& t, const W& w) {
  return w.map([&](const char*, const Matrix& m) { return t.constant(m); });
}

template <class VarWeights>
auto collect_grads(const ad::Tape& t, const VarWeights& v) {
  return v.map([&](const char*, const ad::Var& x) { return t.grad(x); });
}

// ---------------------------------------------------------------------------
// Masking

/// Picks round(ratio * N) spots uniformly without replacement.
inline std::vector<Index> sample_mask(Index n, double ratio, SeededRng& rng) {
  require(ratio >= 0.0 && ratio <= 1.0, ErrorCode::InvalidArgument, "mask ratio must lie in [0,1]");
  const auto count = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  const auto picked = rng.sample_without_replacement(static_cast<std::size_t>(n), count);
  return std::vector<Index>(picked.begin(), picked.end());
}

inline Matrix mask_indicator(Index n, const std::vector<Index>& masked) {
  Matrix m = Matrix::Zero(n, 1);
  for (Index i : masked) m(i, 0) = 1.0;
  return m;
}

/// X'[i] = X[i] + m for masked rows, X[i] otherwise.
inline ad::Var apply_additive_mask(ad::Var x, ad::Var perturbation, const std::vector<Index>& masked) {
  ad::Tape& t = *x.tape();
  return x + ad::matmul(t.constant(mask_indicator(x.rows(), masked)), perturbation);
}

inline Matrix apply_additive_mask(const Matrix& x, const MaskState& state) {
  require(state.perturbation.rows() == 1 && state.perturbation.cols() == x.cols(), ErrorCode::DimensionMismatch,
          "mask perturbation width must equal the gene count");
  Matrix out = x;
  for (Index i : state.masked) {
    require(i >= 0 && i < x.rows(), ErrorCode::DimensionMismatch, "masked index out of range");
    out.row(i) += state.perturbation.row(0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Encoder / decoders on the tape

enum class Mode { Train, Eval };

struct BatchNormVars {
  ad::Var mean1, var1, mean2, var2;
};

struct EncodeResult {
  ad::Var h_mlp, h_gcn, z;
  BatchNormVars stats;
};

inline ad::Var batch_norm(ad::Var h, ad::Var mean, ad::Var var, ad::Var gamma, ad::Var beta) {
  const ad::Var inv_sd = ad::pow(var + kBatchNormEps, -0.5);
  return ad::add_row(ad::mul_row(ad::mul_row(ad::sub_row(h, mean), inv_sd), gamma), beta);
}

inline std::pair<ad::Var, ad::Var> batch_moments(ad::Var h) {
  const ad::Var mean = ad::col_mean(h);
  const ad::Var var = ad::col_mean(ad::square(ad::sub_row(h, mean)));
  return {mean, var};
}

/// Z = [H_mlp || H_gcn]. Train mode normalizes with batch moments (or with
/// `shared` when given, so generated samples reuse the real batch's moments);
/// eval mode uses the running statistics.
inline EncodeResult encode(const EncoderWeights<ad::Var>& w, ad::Var x, ad::Var adj_norm, Mode mode,
                           const BatchNormStats& running, const BatchNormVars* shared = nullptr) {
  ad::Tape& t = *x.tape();
  require(x.cols() == w.mlp_w1.rows(), ErrorCode::DimensionMismatch, "encoder input width mismatch");
  require(adj_norm.rows() == x.rows() && adj_norm.cols() == x.rows(), ErrorCode::DimensionMismatch,
          "graph size does not match the number of spots");
  EncodeResult r;
  auto layer = [&](ad::Var in, ad::Var wt, ad::Var b, ad::Var gamma, ad::Var beta, const RowVector& rmean,
                   const RowVector& rvar, ad::Var BatchNormVars::*mean_slot, ad::Var BatchNormVars::*var_slot) {
    const ad::Var act = ad::add_row(ad::matmul(in, wt), b);
    if (mode == Mode::Eval) {
      r.stats.*mean_slot = t.constant(Matrix(rmean));
      r.stats.*var_slot = t.constant(Matrix(rvar));
    } else if (shared) {
      r.stats.*mean_slot = shared->*mean_slot;
      r.stats.*var_slot = shared->*var_slot;
    } else {
      std::tie(r.stats.*mean_slot, r.stats.*var_slot) = batch_moments(act);
    }
    return ad::elu(batch_norm(act, r.stats.*mean_slot, r.stats.*var_slot, gamma, beta));
  };
  const ad::Var h1 = layer(x, w.mlp_w1, w.mlp_b1, w.bn1_gamma, w.bn1_beta, running.mean1, running.var1,
                           &BatchNormVars::mean1, &BatchNormVars::var1);
  r.h_mlp = layer(h1, w.mlp_w2, w.mlp_b2, w.bn2_gamma, w.bn2_beta, running.mean2, running.var2,
                  &BatchNormVars::mean2, &BatchNormVars::var2);
  const ad::Var g1 = ad::relu(ad::matmul(adj_norm, ad::matmul(r.h_mlp, w.gcn_w0)));
  r.h_gcn = ad::relu(ad::matmul(adj_norm, ad::matmul(g1, w.gcn_w1)));
  r.z = ad::concat_cols(r.h_mlp, r.h_gcn);
  return r;
}

/// X_hat = A_norm Z W_dec + b_dec.
inline ad::Var decode_expression(const EncoderWeights<ad::Var>& w, ad::Var z, ad::Var adj_norm) {
  require(z.cols() == w.dec_w.rows(), ErrorCode::DimensionMismatch, "decoder latent width mismatch");
  return ad::add_row(ad::matmul(adj_norm, ad::matmul(z, w.dec_w)), w.dec_b);
}

/// Logits z_i . z_j of the adjacency decoder.
inline ad::Var adjacency_logits(ad::Var z) { return ad::matmul_bt(z, z); }

inline ad::Var generate(const GeneratorWeights<ad::Var>& g, ad::Var noise) {
  const ad::Var h = ad::relu(ad::add_row(ad::matmul(noise, g.w1), g.b1));
  return ad::add_row(ad::matmul(h, g.w2), g.b2);
}

inline ad::Var discriminate(const DiscriminatorWeights<ad::Var>& d, ad::Var x) {
  const ad::Var h = ad::leaky_relu(ad::add_row(ad::matmul(x, d.w1), d.b1));
  return ad::add_row(ad::matmul(h, d.w2), d.b2);
}

// ---------------------------------------------------------------------------
// Losses on the tape

inline ad::Var loss_reconstruction(ad::Var x_hat, ad::Var x) { return ad::mean(ad::square(x_hat - x)); }

/// KL(N(mu, diag sigma^2) || N(0, I)) from per-dimension batch moments of Z,
/// averaged over dimensions.
inline ad::Var latent_kl(ad::Var z, double var_eps = 1e-6) {
  const auto [mu, var] = batch_moments(z);
  const ad::Var terms = ad::square(mu) + var - ad::log(var + var_eps);
  return ad::mean(terms - 1.0) * 0.5;
}

/// Mean BCE between sigmoid(logits) and A, plus `lambda_kl` times the latent KL.
inline ad::Var loss_graph(ad::Var logits, const Matrix& adjacency, ad::Var z, double lambda_kl) {
  const ad::Var bce = ad::bce_with_logits(logits, adjacency);
  if (lambda_kl == 0.0) return bce;
  return bce + latent_kl(z) * lambda_kl;
}

/// Mean over masked rows of (1 - cos(x_hat_i, x_i))^alpha.
inline ad::Var loss_mask(ad::Var x_hat, ad::Var x, const std::vector<Index>& masked, double alpha) {
  ad::Tape& t = *x.tape();
  if (masked.empty()) return t.constant_scalar(0.0);
  const ad::Var a = ad::row_normalize(ad::gather_rows(x_hat, masked));
  const ad::Var b = ad::row_normalize(ad::gather_rows(x, masked));
  const ad::Var cos = ad::row_sum(ad::hadamard(a, b));
  return ad::mean(ad::pow((-cos) + 1.0, alpha));
}

/// Gram matrix of the Fisher kernel k(a, b) = <phi(a), phi(b)> / dim(phi),
/// where phi(x) is the gradient of the summed generator output with respect to
/// the final-layer weights and bias, evaluated with x at the final-layer input.
/// phi(x) = [x (x) 1_G, 1_G], so k(a, b) = (<a, b> + 1) / (d + 1).
inline ad::Var fisher_gram(ad::Var a, ad::Var b) {
  const double d = static_cast<double>(a.cols());
  return (ad::matmul_bt(a, b) + 1.0) * (1.0 / (d + 1.0));
}

/// Unbiased MMD^2 U-statistic from the three Gram blocks. With equal sample
/// counts the cross term also skips the paired i == j entries, so identical
/// sample sets give exactly zero.
inline ad::Var mmd_unbiased(ad::Var k_uu, ad::Var k_gg, ad::Var k_ug) {
  ad::Tape& t = *k_uu.tape();
  const double m = static_cast<double>(k_uu.rows());
  const double n = static_cast<double>(k_gg.rows());
  require(m >= 2 && n >= 2, ErrorCode::SampleTooSmall, "MMD needs at least two samples per set");
  auto off_diag_mean = [&](ad::Var k, double s) {
    const ad::Var diag = ad::sum(ad::hadamard(k, t.constant(Matrix::Identity(k.rows(), k.cols()))));
    return (ad::sum(k) - diag) * (1.0 / (s * (s - 1.0)));
  };
  const ad::Var cross = m == n ? off_diag_mean(k_ug, m) : ad::mean(k_ug);
  return off_diag_mean(k_uu, m) + off_diag_mean(k_gg, n) - cross * 2.0;
}

inline ad::Var fisher_mmd(ad::Var u, ad::Var v) {
  require(u.cols() == v.cols(), ErrorCode::DimensionMismatch, "MMD sample widths differ");
  return mmd_unbiased(fisher_gram(u, u), fisher_gram(v, v), fisher_gram(u, v));
}

// ---------------------------------------------------------------------------
// Plain-matrix entry points

/// Explicit Fisher feature vectors, one row per sample (width (d + 1) * G).
inline Matrix fisher_features(const GanParams& gan, const Matrix& x) {
  const Index d = gan.fisher_input_dim();
  const Index g = gan.output_dim();
  require(x.cols() == d, ErrorCode::DimensionMismatch, "Fisher features need samples of the generator's final-layer input width");
  Matrix phi(x.rows(), (d + 1) * g);
  for (Index i = 0; i < x.rows(); ++i) {
    // d(sum_g (x W + b)_g) / dW_ag = x_a ; d/db_g = 1. W is flattened row-major.
    for (Index a = 0; a < d; ++a) phi.row(i).segment(a * g, g).setConstant(x(i, a));
    phi.row(i).tail(g).setOnes();
  }
  return phi;
}

/// Unbiased MMD^2 with the kernel <phi_a, phi_b> / width over explicit features.
inline double mmd_from_features(const Matrix& phi_u, const Matrix& phi_v) {
  require(phi_u.cols() == phi_v.cols(), ErrorCode::DimensionMismatch, "MMD feature widths differ");
  const double w = static_cast<double>(phi_u.cols());
  ad::Tape t;
  const ad::Var u = t.constant(phi_u), v = t.constant(phi_v);
  return mmd_unbiased(ad::matmul_bt(u, u) * (1.0 / w), ad::matmul_bt(v, v) * (1.0 / w),
                      ad::matmul_bt(u, v) * (1.0 / w))
      .scalar();
}

/// MMD^2 between latent samples under the Fisher kernel of `gan`'s generator.
inline double fisher_mmd(const Matrix& u, const Matrix& v, const GanParams& gan) {
  require(u.cols() == gan.fisher_input_dim() && v.cols() == gan.fisher_input_dim(), ErrorCode::DimensionMismatch,
          "MMD samples must have the generator's latent width");
  require(u.rows() >= 2 && v.rows() >= 2, ErrorCode::SampleTooSmall, "MMD needs at least two samples per set");
  ad::Tape t;
  return fisher_mmd(t.constant(u), t.constant(v)).scalar();
}

/// Eval-mode latent embedding.
inline Matrix encode_eval(const EncoderParams& p, const Matrix& x, const Matrix& adj_norm) {
  ad::Tape t;
  const auto w = bind_constants(t, p.w);
  return encode(w, t.constant(x), t.constant(adj_norm), Mode::Eval, p.running).z.value();
}

inline Matrix reconstruct_eval(const EncoderParams& p, const Matrix& x, const Matrix& adj_norm) {
  ad::Tape t;
  const auto w = bind_constants(t, p.w);
  const ad::Var a = t.constant(adj_norm);
  return decode_expression(w, encode(w, t.constant(x), a, Mode::Eval, p.running).z, a).value();
}

inline Matrix sample_noise(Index n, Index dim, SeededRng& rng) {
  Matrix m(n, dim);
  for (Index k = 0; k < m.size(); ++k) m(k) = rng.normal();
  return m;
}

// ---------------------------------------------------------------------------
// Stage I training

template <class T>
struct Stage1Trainables {
  EncoderWeights<T> encoder;
  T mask;
  GeneratorWeights<T> generator;

  template <class F>
  void visit(F&& f) {
    encoder.visit(f);
    f("mask", mask);
    generator.visit(f);
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<Stage1Trainables*>(this)->visit([&](const char* n, const T& v) { f(n, v); });
  }
  template <class F>
  auto map(F&& f) const {
    using U = decltype(f("", mask));
    return Stage1Trainables<U>{encoder.map(f), f("mask", mask), generator.map(f)};
  }
};

struct Stage1Config {
  double lambda_rec = 1.0;
  double lambda_graph = 0.3;
  double lambda_mask = 1.0;
  double lambda_gan = 0.1;
  double lambda_kl = 0.01;
  double mask_ratio = 0.8;
  double mask_alpha = 3.0;
  int epochs = 400;
  double lr = 1e-3;
  EncoderDims dims;
  Index n_generated = 0;  // 0 means one generated sample per spot
  double bn_momentum = 0.1;
};

struct Stage1Losses {
  double rec = 0, graph = 0, mask = 0, gan = 0, total = 0;
};

/// Inputs held fixed during one optimization step.
struct Stage1Batch {
  const Matrix* x = nullptr;
  const SpatialGraph* graph = nullptr;
  std::vector<Index> masked;
  Matrix noise;
  DiscriminatorWeights<Matrix> disc;
};

struct Stage1Evaluation {
  Stage1Losses losses;
  Stage1Trainables<Matrix> grads;
  BatchNormStats batch_stats;
};

inline Stage1Evaluation evaluate_stage1(const Stage1Trainables<Matrix>& params, const Stage1Batch& b,
                                        const Stage1Config& cfg, bool want_grad) {
  ad::Tape t;
  const auto p = bind_parameters(t, params);
  const auto disc = bind_constants(t, b.disc);
  const ad::Var x = t.constant(*b.x);
  const ad::Var adj = t.constant(b.graph->normalized);

  const ad::Var x_masked = apply_additive_mask(x, p.mask, b.masked);
  const EncodeResult enc = encode(p.encoder, x_masked, adj, Mode::Train, {});
  const ad::Var x_hat = decode_expression(p.encoder, enc.z, adj);

  const ad::Var rec = loss_reconstruction(x_hat, x);
  const ad::Var graph = loss_graph(adjacency_logits(enc.z), b.graph->adjacency, enc.z, cfg.lambda_kl);
  const ad::Var mask = loss_mask(x_hat, x, b.masked, cfg.mask_alpha);

  const ad::Var x_gen = generate(p.generator, t.constant(b.noise));
  const ad::Var ident = t.constant(Matrix::Identity(b.noise.rows(), b.noise.rows()));
  const EncodeResult enc_gen = encode(p.encoder, x_gen, ident, Mode::Train, {}, &enc.stats);
  const ad::Var adversarial = ad::bce_with_logits(discriminate(disc, x_gen), Matrix::Ones(b.noise.rows(), 1));
  const ad::Var gan = adversarial + fisher_mmd(enc.z, enc_gen.z);

  const ad::Var total = rec * cfg.lambda_rec + graph * cfg.lambda_graph + mask * cfg.lambda_mask + gan * cfg.lambda_gan;

  Stage1Evaluation out;
  out.losses = {rec.scalar(), graph.scalar(), mask.scalar(), gan.scalar(), total.scalar()};
  out.batch_stats = {enc.stats.mean1.value(), enc.stats.var1.value(), enc.stats.mean2.value(), enc.stats.var2.value()};
  if (want_grad) {
    t.backward(total);
    out.grads = collect_grads(t, p);
  }
  return out;
}

/// The generator/encoder objective as a function of flattened parameters.
inline Objective stage1_objective(const Stage1Trainables<Matrix>& shape, const Stage1Batch& batch,
                                  const Stage1Config& cfg) {
  return [shape, batch, cfg](const Vector& flat, Vector* grad) {
    Stage1Trainables<Matrix> p = shape;
    unflatten(p, flat);
    const auto e = evaluate_stage1(p, batch, cfg, grad != nullptr);
    if (grad) *grad = flatten(e.grads);
    return e.losses.total;
  };
}

/// Discriminator loss: real spots labelled 1, generated samples 0.
inline double discriminator_step(DiscriminatorWeights<Matrix>& disc, const Matrix& real, const Matrix& fake,
                                 Adam& opt) {
  ad::Tape t;
  const auto d = bind_parameters(t, disc);
  const ad::Var loss = ad::bce_with_logits(discriminate(d, t.constant(real)), Matrix::Ones(real.rows(), 1)) +
                       ad::bce_with_logits(discriminate(d, t.constant(fake)), Matrix::Zero(fake.rows(), 1));
  t.backward(loss);
  Vector flat = flatten(disc);
  opt.step(flat, flatten(collect_grads(t, d)));
  unflatten(disc, flat);
  return loss.scalar();
}

inline Matrix generate_eval(const GeneratorWeights<Matrix>& g, const Matrix& noise) {
  ad::Tape t;
  return generate(bind_constants(t, g), t.constant(noise)).value();
}

inline void check_finite_loss(double v, int epoch, const char* stage) {
  require(std::isfinite(v), ErrorCode::DivergedLoss,
          std::string(stage) + " loss became non-finite at epoch " + std::to_string(epoch));
}

struct Stage1Result {
  EncoderParams encoder;
  GanParams gan;
  MaskState mask;
  Matrix z;
  LossTrace trace;
};

/// Full-batch moments of the MLP branch on `x`, used as the eval-mode statistics.
inline BatchNormStats batch_stats_for(const EncoderParams& p, const Matrix& x, const Matrix& adj_norm) {
  ad::Tape t;
  const auto w = bind_constants(t, p.w);
  const auto r = encode(w, t.constant(x), t.constant(adj_norm), Mode::Train, p.running);
  return {r.stats.mean1.value(), r.stats.var1.value(), r.stats.mean2.value(), r.stats.var2.value()};
}

inline Stage1Result train_stage1(const Matrix& x, const SpatialGraph& graph, const Stage1Config& cfg, SeededRng& rng) {
  require_finite(x, "expression input");
  require(graph.n == x.rows(), ErrorCode::DimensionMismatch, "graph size does not match the number of spots");
  require(x.rows() >= 2, ErrorCode::TooFewSpots, "need at least two spots");
  require(cfg.epochs >= 0, ErrorCode::InvalidArgument, "epochs must be non-negative");

  const Index n_gen = cfg.n_generated > 0 ? cfg.n_generated : x.rows();
  Stage1Result res;
  res.encoder = init_encoder(x.cols(), cfg.dims, rng);
  res.gan = init_gan(x.cols(), res.encoder.latent_dim(), cfg.dims, rng);
  res.mask.ratio = cfg.mask_ratio;

  Stage1Trainables<Matrix> params{res.encoder.w, Matrix::Zero(1, x.cols()), res.gan.gen};
  Adam opt({cfg.lr});
  Adam disc_opt({cfg.lr});
  res.trace.columns = {"epoch", "rec", "graph", "mask", "gan", "total"};

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Stage1Batch batch;
    batch.x = &x;
    batch.graph = &graph;
    batch.masked = sample_mask(x.rows(), cfg.mask_ratio, rng);
    batch.noise = sample_noise(n_gen, cfg.dims.noise_dim, rng);

    discriminator_step(res.gan.disc, x, generate_eval(params.generator, batch.noise), disc_opt);
    batch.disc = res.gan.disc;

    const auto e = evaluate_stage1(params, batch, cfg, true);
    check_finite_loss(e.losses.total, epoch, "stage I");
    Vector flat = flatten(params);
    const Vector g = flatten(e.grads);
    require(g.allFinite(), ErrorCode::DivergedLoss, "stage I gradient became non-finite at epoch " + std::to_string(epoch));
    opt.step(flat, g);
    unflatten(params, flat);

    auto blend = [&](RowVector& run, const Matrix& batch_v) { run = (1.0 - cfg.bn_momentum) * run + cfg.bn_momentum * RowVector(batch_v); };
    blend(res.encoder.running.mean1, e.batch_stats.mean1);
    blend(res.encoder.running.var1, e.batch_stats.var1);
    blend(res.encoder.running.mean2, e.batch_stats.mean2);
    blend(res.encoder.running.var2, e.batch_stats.var2);

    const auto& l = e.losses;
    res.trace.add({static_cast<double>(epoch), l.rec, l.graph, l.mask, l.gan, l.total});
    res.mask.masked = batch.masked;
  }

  res.encoder.w = params.encoder;
  res.gan.gen = params.generator;
  res.mask.perturbation = params.mask;
  res.encoder.running = batch_stats_for(res.encoder, x, graph.normalized);
  res.z = encode_eval(res.encoder, x, graph.normalized);
  require_finite(res.z, "latent embedding");
  return res;
}

}  // namespace multist
