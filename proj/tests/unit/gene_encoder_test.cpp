#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "instances.hpp"
#include "multist/gene_encoder.hpp"
#include "multist/gradcheck.hpp"

using namespace multist;
using multist::testing::random_matrix;
using multist::testing::small_instance;

namespace {

EncoderDims tiny_dims() {
  EncoderDims d;
  d.d1 = 8;
  d.d2 = 4;
  d.gcn_hidden = 5;
  d.noise_dim = 4;
  d.disc_hidden = 6;
  return d;
}

Matrix elu(const Matrix& m) {
  return m.unaryExpr([](double v) { return v > 0 ? v : std::exp(v) - 1.0; });
}
Matrix relu(const Matrix& m) { return m.cwiseMax(0.0); }
double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

/// Straight-line encoder: Linear -> BatchNorm -> ELU twice, then two GCN layers.
Matrix reference_encode(const EncoderParams& p, const Matrix& x, const Matrix& adj, bool train) {
  auto layer = [&](const Matrix& in, const Matrix& w, const Matrix& b, const Matrix& gamma, const Matrix& beta,
                   const RowVector& rmean, const RowVector& rvar) {
    Matrix h = in * w;
    for (Index i = 0; i < h.rows(); ++i) h.row(i) += b.row(0);
    RowVector mean = rmean, var = rvar;
    if (train) {
      mean = h.colwise().mean();
      var = RowVector::Zero(h.cols());
      for (Index i = 0; i < h.rows(); ++i) var += (h.row(i) - mean).array().square().matrix();
      var /= static_cast<double>(h.rows());
    }
    for (Index i = 0; i < h.rows(); ++i)
      for (Index j = 0; j < h.cols(); ++j)
        h(i, j) = (h(i, j) - mean(j)) / std::sqrt(var(j) + 1e-5) * gamma(0, j) + beta(0, j);
    return elu(h);
  };
  const Matrix h1 = layer(x, p.w.mlp_w1, p.w.mlp_b1, p.w.bn1_gamma, p.w.bn1_beta, p.running.mean1, p.running.var1);
  const Matrix h2 = layer(h1, p.w.mlp_w2, p.w.mlp_b2, p.w.bn2_gamma, p.w.bn2_beta, p.running.mean2, p.running.var2);
  const Matrix g1 = relu(adj * (h2 * p.w.gcn_w0));
  const Matrix g2 = relu(adj * (g1 * p.w.gcn_w1));
  Matrix z(x.rows(), h2.cols() + g2.cols());
  z << h2, g2;
  return z;
}

Matrix train_encode(const EncoderParams& p, const Matrix& x, const Matrix& adj) {
  ad::Tape t;
  const auto w = bind_constants(t, p.w);
  return encode(w, t.constant(x), t.constant(adj), Mode::Train, p.running).z.value();
}

Stage1Batch make_batch(const Matrix& x, const SpatialGraph& g, const GanParams& gan, const Stage1Config& cfg,
                       SeededRng& rng) {
  Stage1Batch b;
  b.x = &x;
  b.graph = &g;
  b.masked = sample_mask(x.rows(), cfg.mask_ratio, rng);
  b.noise = sample_noise(x.rows(), cfg.dims.noise_dim, rng);
  b.disc = gan.disc;
  return b;
}

double stage1_gradcheck(Index rows, Index cols, Index genes, std::uint64_t seed) {
  const auto inst = small_instance(rows, cols, genes, seed);
  Stage1Config cfg;
  cfg.dims = tiny_dims();
  SeededRng rng(seed);
  const EncoderParams enc = init_encoder(genes, cfg.dims, rng);
  const GanParams gan = init_gan(genes, enc.latent_dim(), cfg.dims, rng);
  Stage1Trainables<Matrix> params{enc.w, random_matrix(1, genes, seed + 1, -0.3, 0.3), gan.gen};
  const Stage1Batch batch = make_batch(inst.x, inst.graph, gan, cfg, rng);
  const auto report =
      gradient_check(stage1_objective(params, batch, cfg), flatten(params), 1e-4, param_blocks(params), seed);
  for (const auto& [name, err] : report.per_parameter_errors)
    if (err > 1e-3) ADD_FAILURE() << name << " rel error " << err;
  return report.max_rel_error;
}

}  // namespace

// ---------------------------------------------------------------- masking

TEST(Mask, RatioGivesExactCount) {
  SeededRng rng(1);
  const auto m = sample_mask(10, 0.8, rng);
  EXPECT_EQ(m.size(), 8u);
  EXPECT_EQ(std::set<Index>(m.begin(), m.end()).size(), 8u);
  for (Index i : m) EXPECT_LT(i, 10);
  EXPECT_TRUE(sample_mask(10, 0.0, rng).empty());
  EXPECT_THROW(sample_mask(10, 1.5, rng), Error);
}

TEST(Mask, AdditivePerturbation) {
  const Matrix x = random_matrix(5, 3, 2);
  MaskState s;
  s.masked = {1, 3};
  s.perturbation = Matrix::Zero(1, 3);
  EXPECT_EQ(apply_additive_mask(x, s), x);
  s.perturbation << 1.0, -2.0, 0.5;
  const Matrix y = apply_additive_mask(x, s);
  for (Index i = 0; i < 5; ++i) {
    const bool masked = i == 1 || i == 3;
    for (Index j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(y(i, j), x(i, j) + (masked ? s.perturbation(0, j) : 0.0));
  }
  s.masked.clear();
  EXPECT_EQ(apply_additive_mask(x, s), x);
  // tape version agrees
  ad::Tape t;
  const Matrix tape_y = apply_additive_mask(t.constant(x), t.constant(s.perturbation), {1, 3}).value();
  EXPECT_EQ(tape_y, y);
}

// ---------------------------------------------------------------- encoder / decoders

TEST(Encoder, MatchesStraightLineImplementation) {
  const auto inst = small_instance(5, 6, 20, 3);
  SeededRng rng(4);
  EncoderParams p = init_encoder(20, tiny_dims(), rng);
  p.w.mlp_b1 = random_matrix(1, 8, 5);
  p.w.bn1_gamma = random_matrix(1, 8, 6, 0.5, 1.5);
  p.w.bn2_beta = random_matrix(1, 8, 7);
  p.running.mean1 = random_matrix(1, 8, 8);
  p.running.var1 = random_matrix(1, 8, 9, 0.5, 2.0);
  const Matrix adj = inst.graph.normalized;
  const Matrix z_train = train_encode(p, inst.x, adj);
  const Matrix z_eval = encode_eval(p, inst.x, adj);
  ASSERT_EQ(z_train.cols(), p.latent_dim());
  EXPECT_LT((z_train - reference_encode(p, inst.x, adj, true)).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT((z_eval - reference_encode(p, inst.x, adj, false)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Encoder, SingleSpotZeroWeights) {
  SeededRng rng(1);
  EncoderParams p = init_encoder(3, tiny_dims(), rng);
  p.w.visit([](const char*, Matrix& m) { m.setZero(); });
  p.w.mlp_b1 = random_matrix(1, 8, 2);
  p.w.mlp_b2 = random_matrix(1, 8, 3);
  const Matrix z = encode_eval(p, Matrix::Ones(1, 3), Matrix::Identity(1, 1));
  ASSERT_EQ(z.rows(), 1);
  ASSERT_EQ(z.cols(), 12);
  // eval statistics are mean 0 var 1, gamma = beta = 0 here, so BN output is 0
  EXPECT_TRUE(z.isZero(0.0));
}

TEST(Encoder, IdentityGraphGivesPerSpotLayers) {
  const auto inst = small_instance(4, 4, 10, 5);
  SeededRng rng(2);
  const EncoderParams p = init_encoder(10, tiny_dims(), rng);
  const Matrix eye = Matrix::Identity(16, 16);
  const Matrix z = encode_eval(p, inst.x, eye);
  const Matrix h = z.leftCols(8);
  const Matrix expect = relu(relu(h * p.w.gcn_w0) * p.w.gcn_w1);
  EXPECT_LT((z.rightCols(4) - expect).cwiseAbs().maxCoeff(), 1e-12);
  // rows are then independent of each other
  const Matrix z_first = encode_eval(p, inst.x.topRows(1), Matrix::Identity(1, 1));
  EXPECT_LT((z_first.row(0) - z.row(0)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Encoder, DimensionMismatch) {
  SeededRng rng(1);
  const EncoderParams p = init_encoder(5, tiny_dims(), rng);
  EXPECT_THROW(encode_eval(p, Matrix::Zero(4, 6), Matrix::Identity(4, 4)), Error);
  EXPECT_THROW(encode_eval(p, Matrix::Zero(4, 5), Matrix::Identity(3, 3)), Error);
}

TEST(Decoders, ExpressionDecoder) {
  SeededRng rng(1);
  EncoderParams p = init_encoder(6, tiny_dims(), rng);
  p.w.dec_b = random_matrix(1, 6, 2);
  ad::Tape t;
  const auto w = bind_constants(t, p.w);
  const Matrix adj = small_instance(2, 3, 6, 1, 2).graph.normalized;
  const Matrix zero_out = decode_expression(w, t.constant(Matrix::Zero(6, 12)), t.constant(adj)).value();
  for (Index i = 0; i < 6; ++i) EXPECT_LT((zero_out.row(i) - p.w.dec_b).norm(), 1e-15);
  const Matrix z = random_matrix(6, 12, 3);
  const Matrix out = decode_expression(w, t.constant(z), t.constant(adj)).value();
  Matrix expect = adj * z * p.w.dec_w;
  for (Index i = 0; i < 6; ++i) expect.row(i) += p.w.dec_b.row(0);
  EXPECT_LT((out - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Decoders, AdjacencyDecoder) {
  ad::Tape t;
  const Matrix zero = adjacency_logits(t.constant(Matrix::Zero(4, 3))).value().unaryExpr(&sigmoid);
  EXPECT_TRUE(zero.isApproxToConstant(0.5, 0.0));
  const Matrix eye = Matrix::Identity(3, 3);
  const Matrix a = adjacency_logits(t.constant(eye)).value().unaryExpr(&sigmoid);
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(a(i, j), i == j ? sigmoid(1.0) : 0.5);
  const Matrix r = adjacency_logits(t.constant(random_matrix(5, 3, 1))).value();
  EXPECT_EQ(r, r.transpose());
}

// ---------------------------------------------------------------- losses

TEST(Losses, Reconstruction) {
  ad::Tape t;
  const Matrix x = random_matrix(3, 4, 1), y = random_matrix(3, 4, 2);
  EXPECT_EQ(loss_reconstruction(t.constant(x), t.constant(x)).scalar(), 0.0);
  EXPECT_NEAR(loss_reconstruction(t.constant((x.array() + 1.0).matrix()), t.constant(x)).scalar(), 1.0, 1e-12);
  double s = 0;
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 4; ++j) s += (x(i, j) - y(i, j)) * (x(i, j) - y(i, j));
  EXPECT_NEAR(loss_reconstruction(t.constant(x), t.constant(y)).scalar(), s / 12.0, 1e-12);
}

TEST(Losses, GraphBceAndKl) {
  ad::Tape t;
  // standardized latent: zero mean, unit population variance per column
  Matrix z(4, 2);
  z << 1, 1, -1, 1, 1, -1, -1, -1;
  const double kl = latent_kl(t.constant(z)).scalar();
  EXPECT_NEAR(kl, -0.5 * std::log(1.0 + 1e-6), 1e-12);
  // hand formula on a general latent
  const Matrix zr = random_matrix(5, 3, 4);
  double expect = 0;
  for (Index j = 0; j < 3; ++j) {
    const double mu = zr.col(j).mean();
    const double var = (zr.col(j).array() - mu).square().mean();
    expect += 0.5 * (mu * mu + var - std::log(var + 1e-6) - 1.0);
  }
  EXPECT_NEAR(latent_kl(t.constant(zr)).scalar(), expect / 3.0, 1e-12);
  // BCE term by direct summation
  const Matrix logits = random_matrix(3, 3, 5, -2, 2);
  Matrix adj = Matrix::Identity(3, 3);
  adj(0, 1) = adj(1, 0) = 1.0;
  double bce = 0;
  for (Index k = 0; k < 9; ++k) {
    const double p = sigmoid(logits(k));
    bce -= adj(k) * std::log(p) + (1 - adj(k)) * std::log(1 - p);
  }
  const Matrix zl = random_matrix(3, 2, 6);
  const double lg = loss_graph(t.constant(logits), adj, t.constant(zl), 0.3).scalar();
  EXPECT_NEAR(lg, bce / 9.0 + 0.3 * latent_kl(t.constant(zl)).scalar(), 1e-12);
  // near-perfect logits give near-zero BCE
  const Matrix sure = (adj.array() * 2.0 - 1.0).matrix() * 30.0;
  EXPECT_LT(loss_graph(t.constant(sure), adj, t.constant(zl), 0.0).scalar(), 1e-12);
}

TEST(Losses, MaskConsistency) {
  ad::Tape t;
  const Matrix x = random_matrix(4, 3, 1);
  EXPECT_NEAR(loss_mask(t.constant(x), t.constant(x), {0, 2}, 3.0).scalar(), 0.0, 1e-15);
  EXPECT_NEAR(loss_mask(t.constant(x * 5.0), t.constant(x), {0, 1, 2, 3}, 3.0).scalar(), 0.0, 1e-15);
  Matrix a(2, 2), b(2, 2);
  a << 1, 0, 0, 2;
  b << 0, 3, -1, 0;
  EXPECT_NEAR(loss_mask(t.constant(a), t.constant(b), {0, 1}, 3.0).scalar(), 1.0, 1e-15);
  // zero reconstruction row: maximum penalty 1
  EXPECT_NEAR(loss_mask(t.constant(Matrix::Zero(2, 2)), t.constant(b), {0}, 3.0).scalar(), 1.0, 1e-15);
  // random instance against the formula, only masked rows count
  const Matrix xh = random_matrix(4, 3, 2);
  const std::vector<Index> masked{1, 3};
  double s = 0;
  for (Index i : masked) {
    const double c = xh.row(i).dot(x.row(i)) / (xh.row(i).norm() * x.row(i).norm());
    s += std::pow(1.0 - c, 3.0);
  }
  EXPECT_NEAR(loss_mask(t.constant(xh), t.constant(x), masked, 3.0).scalar(), s / 2.0, 1e-12);
  EXPECT_EQ(loss_mask(t.constant(xh), t.constant(x), {}, 3.0).scalar(), 0.0);
}

// ---------------------------------------------------------------- Fisher MMD

TEST(FisherMmd, ClosedFormMatchesExplicitFeatures) {
  SeededRng rng(1);
  const GanParams gan = init_gan(7, 5, tiny_dims(), rng);
  const Matrix u = random_matrix(6, 5, 2), v = random_matrix(4, 5, 3, 0.0, 2.0);
  const Matrix pu = fisher_features(gan, u), pv = fisher_features(gan, v);
  ASSERT_EQ(pu.cols(), 6 * 7);
  EXPECT_NEAR(fisher_mmd(u, v, gan), mmd_from_features(pu, pv), 1e-12);
  // kernel value by hand on two points
  const double k01 = pu.row(0).dot(pu.row(1)) / static_cast<double>(pu.cols());
  EXPECT_NEAR(k01, (u.row(0).dot(u.row(1)) + 1.0) / 6.0, 1e-12);
}

TEST(FisherMmd, FeatureMapIsFinalLayerGradient) {
  // phi(x) = d/d(W2, b2) of sum_g (x W2 + b2)_g, by central differences
  SeededRng rng(2);
  GanParams gan = init_gan(3, 2, tiny_dims(), rng);
  Matrix x(1, 2);
  x << 0.7, -1.3;
  const Matrix phi = fisher_features(gan, x);
  auto out_sum = [&](const GanParams& g) { return ((x * g.gen.w2).row(0) + g.gen.b2.row(0)).sum(); };
  const double h = 1e-6;
  Index col = 0;
  for (Index a = 0; a < 2; ++a)
    for (Index g = 0; g < 3; ++g, ++col) {
      GanParams up = gan, dn = gan;
      up.gen.w2(a, g) += h;
      dn.gen.w2(a, g) -= h;
      EXPECT_NEAR(phi(0, col), (out_sum(up) - out_sum(dn)) / (2 * h), 1e-8);
    }
  for (Index g = 0; g < 3; ++g, ++col) EXPECT_DOUBLE_EQ(phi(0, col), 1.0);
}

TEST(FisherMmd, IdentitiesAndErrors) {
  SeededRng rng(3);
  const GanParams gan = init_gan(4, 6, tiny_dims(), rng);
  const Matrix u = random_matrix(50, 6, 4);
  EXPECT_LE(std::abs(fisher_mmd(u, u, gan)), 1e-8);
  const Matrix v = random_matrix(30, 6, 5, -0.5, 1.5);
  EXPECT_NEAR(fisher_mmd(u, v, gan), fisher_mmd(v, u, gan), 1e-14);
  EXPECT_GT(fisher_mmd(u, v, gan), 0.0);
  try {
    fisher_mmd(u.topRows(1), v, gan);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SampleTooSmall);
  }
}

TEST(FisherMmd, LinearKernelPointMasses) {
  // phi(x) = x in one dimension: MMD^2 between point masses at a and b is (a-b)^2
  const Matrix u = Matrix::Constant(5, 1, 0.25), v = Matrix::Constant(7, 1, 1.75);
  EXPECT_NEAR(mmd_from_features(u, v), 1.5 * 1.5, 1e-12);
  // five-sample hand evaluation with the unbiased estimator
  Matrix a(2, 1), b(3, 1);
  a << 1, 2;
  b << 0, 1, 3;
  const double kaa = 2.0;              // off-diagonal pair (1,2) twice / (2*1)
  const double kbb = (0 + 0 + 3) * 2 / 6.0;
  const double kab = (0 + 1 + 3 + 0 + 2 + 6) / 6.0;
  EXPECT_NEAR(mmd_from_features(a, b), kaa + kbb - 2 * kab, 1e-12);
  // equal sizes: the cross term skips the paired entries (1*0 and 2*3)
  Matrix c(2, 1);
  c << 0, 3;
  EXPECT_NEAR(mmd_from_features(a, c), 2.0 + 0.0 - 2 * (1 * 3 + 2 * 0) / 2.0, 1e-12);
}

// ---------------------------------------------------------------- Stage I

TEST(Stage1, GradientCheckThirtySpots) { EXPECT_LT(stage1_gradcheck(5, 6, 20, 11), 1e-3); }

TEST(Stage1, GradientCheckHundredSpots) { EXPECT_LT(stage1_gradcheck(10, 10, 20, 12), 1e-3); }

TEST(Stage1, PlainAutoencoderReducesReconstruction) {
  const auto inst = small_instance(6, 6, 12, 2);
  Stage1Config cfg;
  cfg.dims = tiny_dims();
  cfg.lambda_graph = cfg.lambda_mask = cfg.lambda_gan = 0.0;
  cfg.epochs = 150;
  cfg.lr = 1e-2;
  SeededRng rng(1);
  const auto r = train_stage1(inst.x, inst.graph, cfg, rng);
  const auto rec = r.trace.column("rec");
  EXPECT_LT(rec.back(), rec.front());
}

TEST(Stage1, TotalLossTrendsDownAndIsDeterministic) {
  const auto inst = small_instance(8, 8, 16, 3);
  Stage1Config cfg;
  cfg.dims = tiny_dims();
  cfg.epochs = 200;
  cfg.lr = 5e-3;
  SeededRng a(9), b(9);
  const auto r1 = train_stage1(inst.x, inst.graph, cfg, a);
  const auto r2 = train_stage1(inst.x, inst.graph, cfg, b);
  EXPECT_EQ(r1.trace.rows, r2.trace.rows);
  EXPECT_EQ(r1.z, r2.z);
  ASSERT_EQ(r1.trace.rows.size(), 200u);
  const auto total = r1.trace.column("total");
  for (std::size_t end = 50; end < total.size(); ++end) EXPECT_LE(total[end], total[end - 50] * 1.05) << end;
  EXPECT_EQ(r1.z.rows(), 64);
  EXPECT_EQ(r1.z.cols(), 12);
  EXPECT_EQ(r1.mask.masked.size(), 51u);  // round(0.8 * 64)
}

TEST(Stage1, DivergenceIsReported) {
  auto inst = small_instance(4, 4, 6, 1);
  Stage1Config cfg;
  cfg.dims = tiny_dims();
  cfg.epochs = 3;
  inst.x(0, 0) = std::numeric_limits<double>::infinity();
  SeededRng rng(1);
  EXPECT_THROW(train_stage1(inst.x, inst.graph, cfg, rng), Error);
  inst.x(0, 0) = 1e300;  // finite input, overflowing loss
  try {
    train_stage1(inst.x, inst.graph, cfg, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::Numerical);
  }
}
