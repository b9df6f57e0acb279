#include <gtest/gtest.h>

#include "repspace/synthgen.hpp"
#include "repspace/transfer.hpp"
#include "test_support.hpp"

using namespace repspace;
using testing_support::random_matrix;
using testing_support::TempDir;

namespace {

TrainConfig fast_config() {
  TrainConfig c;
  c.lr_encoder = 0.1;
  c.lr_decoder = 1.0;
  c.seed = 17;
  return c;
}

double column_corr(const Matrix& a, const Matrix& b, Eigen::Index c) { return pearson(a.col(c), b.col(c)); }

// Held-out R² of a least-squares probe from x to y, fit on the first rows.
double probe_r2(const Matrix& x, const Matrix& y, Eigen::Index n_fit) {
  Matrix xa(x.rows(), x.cols() + 1);
  xa << x, Matrix::Ones(x.rows(), 1);
  const Matrix w = pinv(xa.topRows(n_fit)) * y.topRows(n_fit);
  const Eigen::Index n_test = x.rows() - n_fit;
  const Matrix resid = xa.bottomRows(n_test) * w - y.bottomRows(n_test);
  const Matrix yc = y.bottomRows(n_test).rowwise() - y.bottomRows(n_test).colwise().mean();
  return 1.0 - resid.squaredNorm() / yc.squaredNorm();
}

}  // namespace

TEST(NegCorrLoss, Examples) {
  const Matrix t = random_matrix(50, 3, 1);
  EXPECT_NEAR(neg_corr_loss(t, t), -1.0, 1e-12);
  EXPECT_NEAR(neg_corr_loss(-t, t), 1.0, 1e-12);
  EXPECT_NEAR(neg_corr_loss((2.0 * t).array() + 7.0, t), -1.0, 1e-12);
  EXPECT_THROW(neg_corr_loss(t.topRows(1), t.topRows(1)), ValidationError);
}

TEST(NegCorrLoss, ZeroVarianceColumnsContributeZero) {
  Matrix t = random_matrix(20, 2, 2);
  Matrix p = t;
  p.col(1).setConstant(3.0);
  EXPECT_NEAR(neg_corr_loss(p, t), -0.5, 1e-12);
  EXPECT_TRUE(neg_corr_loss_grad(p, t).grad.col(1).isZero());
}

TEST(NegCorrLoss, AffineInvariantPerColumn) {
  const Matrix p = random_matrix(30, 2, 3), t = random_matrix(30, 2, 4);
  Matrix q = p;
  q.col(0) = q.col(0) * 5.0 + Vector::Constant(30, -1.0);
  q.col(1) = q.col(1) * 0.2;
  EXPECT_NEAR(neg_corr_loss(q, t), neg_corr_loss(p, t), 1e-12);
}

TEST(NegCorrLoss, GradientMatchesFiniteDifferences) {
  const Matrix p = random_matrix(8, 3, 5), t = random_matrix(8, 3, 6);
  const Matrix g = neg_corr_loss_grad(p, t).grad;
  const double h = 1e-6;
  for (Eigen::Index r = 0; r < p.rows(); ++r)
    for (Eigen::Index c = 0; c < p.cols(); ++c) {
      Matrix a = p, b = p;
      a(r, c) += h;
      b(r, c) -= h;
      EXPECT_NEAR((neg_corr_loss(a, t) - neg_corr_loss(b, t)) / (2 * h), g(r, c), 1e-7);
    }
}

TEST(MseLoss, GradientMatchesFiniteDifferences) {
  const Matrix p = random_matrix(5, 2, 7), t = random_matrix(5, 2, 8);
  const Matrix g = mse_loss_grad(p, t).grad;
  const double h = 1e-6;
  Matrix a = p, b = p;
  a(2, 1) += h;
  b(2, 1) -= h;
  EXPECT_NEAR((mse_loss_grad(a, t).loss - mse_loss_grad(b, t).loss) / (2 * h), g(2, 1), 1e-8);
}

TEST(DecoderSampleMse, Examples) {
  LinearMap d{Matrix::Identity(3, 3), Vector::Zero(3), MapKind::Decoder};
  const Matrix x = random_matrix(4, 3, 9);
  EXPECT_TRUE(decoder_sample_mse(d, x, x).isZero());
  EXPECT_TRUE(decoder_sample_mse(d, x, x.array() + 1.0).isApproxToConstant(1.0, 1e-12));

  LinearMap r{random_matrix(2, 3, 10), testing_support::random_vector(3, 11), MapKind::Decoder};
  const Matrix l = random_matrix(3, 2, 12), y = random_matrix(3, 3, 13);
  const Vector got = decoder_sample_mse(r, l, y);
  ASSERT_EQ(got.size(), 3);
  for (Eigen::Index j = 0; j < 3; ++j) {
    double s = 0;
    for (Eigen::Index c = 0; c < 3; ++c) {
      double pred = r.bias(c);
      for (Eigen::Index k = 0; k < 2; ++k) pred += l(j, k) * r.weights(k, c);
      s += (pred - y(j, c)) * (pred - y(j, c));
    }
    EXPECT_NEAR(got(j), s / 3.0, 1e-12);
  }
  EXPECT_THROW(decoder_sample_mse(r, l, y.leftCols(2)), ValidationError);
}

TEST(Encode, NullIdentityAndShape) {
  const Matrix u = random_matrix(100, 20, 14);
  LinearMap zero{Matrix::Zero(20, 20), Vector::Zero(20), MapKind::Encoder};
  EXPECT_TRUE(encode(zero, "x", u).values.isZero());
  LinearMap id{Matrix::Identity(20, 20), Vector::Zero(20), MapKind::Encoder};
  const LatentDataset l = encode(id, "x", u);
  EXPECT_EQ(l.values, u);
  EXPECT_EQ(l.values.rows(), 100);
  EXPECT_EQ(l.values.cols(), 20);
  LinearMap dec{Matrix::Zero(20, 20), Vector::Zero(20), MapKind::Decoder};
  EXPECT_THROW(encode(dec, "x", u), ValidationError);
}

TEST(ValidationSplit, UsesTrailingStoryWhenClose) {
  const TokenCorpus c = synthetic_corpus(1000, 10, 100);
  const Split s = split(c);
  const FitValidation fv = validation_split(c, s.train, 0.1);
  EXPECT_EQ(fv.validation.size(), 100u);
  EXPECT_EQ(fv.validation.front(), 900u);
  EXPECT_EQ(fv.fit.size() + fv.validation.size(), s.train.size());
}

TEST(ValidationSplit, CutsRowsWhenStoriesTooLong) {
  const TokenCorpus c = synthetic_corpus(1000, 1, 100);
  const FitValidation fv = validation_split(c, split(c).train, 0.1);
  EXPECT_EQ(fv.validation.size(), 100u);
  EXPECT_EQ(fv.fit.back() + 1, fv.validation.front());
}

TEST(TrainConfig, ValidatesAndFingerprints) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.latent_dim, 20u);
  EXPECT_EQ(c.batch_size, 1024u);
  EXPECT_DOUBLE_EQ(c.lr_encoder, 1e-4);
  EXPECT_DOUBLE_EQ(c.lr_decoder, 2e-5);
  TrainConfig d = c;
  d.lr_decoder = 1e-4;
  EXPECT_NE(c.hash(), d.hash());
  d.patience = 0;
  EXPECT_THROW(d.validate(), ValidationError);
}

TEST(TrainEncoder, CopyOfUniversalIsLearnable) {
  const TokenCorpus c = synthetic_corpus(3000, 6, 500);
  NestedFamilySpec s{21, 6, c.total_tokens(), {{"u", 6, 8, 0.0}}};
  auto reps = gen_nested_reps(s);
  FeatureBundle copy = reps[0];
  copy.spec.id = "copy";
  copy.spec.model_group = "copy";
  const AlignedDataset ds = align(c, {reps[0], copy}, "u");
  const EncoderTraining et = train_encoder(ds, "copy", fast_config());
  const Split sp = split(ds);
  const Matrix u_test = take_rows(ds.universal().values, sp.test);
  const Matrix pred = et.throwaway_decoder.apply(et.encoder.apply(u_test));
  const Matrix truth = take_rows(ds.bundle("copy").values, sp.test);
  for (Eigen::Index col = 0; col < truth.cols(); ++col) EXPECT_GE(column_corr(pred, truth, col), 0.99) << col;
  EXPECT_EQ(et.encoder.d_out(), 20);
}

TEST(TrainEncoder, SubsetEncoderDiscardsUnseenLatents) {
  const TokenCorpus c = synthetic_corpus(4000, 8, 1000);
  NestedFamilySpec s{8, 5, c.total_tokens(), {{"k2", 2, 6, 0.0}, {"u", 5, 8, 0.0}}};
  const AlignedDataset ds = align(c, gen_nested_reps(s), "u");
  const EncoderTraining et = train_encoder(ds, "k2", fast_config());
  const Matrix latents = encode(et.encoder, "k2", ds.universal().values).values;
  const Matrix z = shared_latents(s);
  const Matrix hidden = z.rightCols(3);
  const Eigen::Index n_fit = 4000;
  const double r2 = probe_r2(latents, hidden, n_fit);
  // Shuffled baseline: same probe after permuting latent rows.
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(latents.rows()));
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(3);
  std::shuffle(perm.begin(), perm.end(), rng);
  Matrix shuffled(latents.rows(), latents.cols());
  for (Eigen::Index r = 0; r < latents.rows(); ++r) shuffled.row(r) = latents.row(perm[static_cast<std::size_t>(r)]);
  const double baseline = probe_r2(shuffled, hidden, n_fit);
  EXPECT_LT(r2, 0.02);
  EXPECT_LT(std::abs(r2 - baseline), 0.02);
  // The seen latents stay decodable.
  EXPECT_GT(probe_r2(latents, z.leftCols(2), n_fit), 0.99);
  EXPECT_EQ(et.retained_rank, 2u);
}

TEST(TrainEncoder, DeterministicPerSeed) {
  const TokenCorpus c = synthetic_corpus(1000, 4, 200);
  NestedFamilySpec s{2, 3, c.total_tokens(), {{"a", 2, 3, 0.1}, {"u", 3, 4, 0.1}}};
  const AlignedDataset ds = align(c, gen_nested_reps(s), "u");
  const auto a = train_encoder(ds, "a", fast_config()), b = train_encoder(ds, "a", fast_config());
  EXPECT_EQ(a.encoder.weights, b.encoder.weights);
  EXPECT_EQ(a.encoder.bias, b.encoder.bias);
  auto other = fast_config();
  other.seed = 99;
  EXPECT_NE(train_encoder(ds, "a", other).encoder.weights, a.encoder.weights);
}

TEST(TrainEncoder, DivergenceAborts) {
  const TokenCorpus c = synthetic_corpus(1000, 4, 200);
  NestedFamilySpec s{2, 3, c.total_tokens(), {{"a", 2, 3, 0.0}, {"u", 3, 4, 0.0}}};
  const AlignedDataset ds = align(c, gen_nested_reps(s), "u");
  auto cfg = fast_config();
  cfg.lr_decoder = 1e6;
  cfg.patience = 1000;
  const auto enc = train_encoder(ds, "a", fast_config());
  const LatentDataset l = encode(enc.encoder, "a", ds.universal().values);
  EXPECT_THROW(train_decoder(l, ds.bundle("u"), c, split(c).train, cfg), NumericError);
}

TEST(TrainDecoder, RealizableTargetMatchesClosedForm) {
  const TokenCorpus c = synthetic_corpus(4000, 8, 1000);
  NestedFamilySpec s{4, 4, c.total_tokens(), {{"t", 3, 5, 0.0}, {"u", 4, 6, 0.0}}};
  const AlignedDataset ds = align(c, gen_nested_reps(s), "u");
  const Split sp = split(ds);
  const auto cfg = fast_config();
  const LatentDataset l = encode(train_encoder(ds, "t", cfg, &sp).encoder, "t", ds.universal().values);
  const DecoderTraining dt = train_decoder(l, ds.bundle("t"), c, sp.train, cfg);
  const Matrix lt = take_rows(l.values, sp.test), tt = take_rows(ds.bundle("t").values, sp.test);
  const double mse = decoder_sample_mse(dt.decoder, lt, tt).mean();
  // Closed-form least squares on the same training latents.
  const Matrix ltr = take_rows(l.values, sp.train), ttr = take_rows(ds.bundle("t").values, sp.train);
  Matrix xa(ltr.rows(), ltr.cols() + 1);
  xa << ltr, Matrix::Ones(ltr.rows(), 1);
  const Matrix w = pinv(xa) * ttr;
  LinearMap ls{w.topRows(ltr.cols()), w.row(ltr.cols()).transpose(), MapKind::Decoder};
  const double ls_mse = decoder_sample_mse(ls, lt, tt).mean();
  EXPECT_LE(mse, 1e-3);
  EXPECT_LE(mse, ls_mse + 1e-3);
}

TEST(TrainDecoder, SelfDecoderIsBestOnNoiselessFamily) {
  const TokenCorpus c = synthetic_corpus(4000, 8, 1000);
  NestedFamilySpec s{6, 4, c.total_tokens(), {{"a", 1, 4, 0.0}, {"b", 2, 4, 0.0}, {"c", 3, 4, 0.0}, {"u", 4, 5, 0.0}}};
  const AlignedDataset ds = align(c, gen_nested_reps(s), "u");
  const TransferGrid g = train_transfer_grid(ds, fast_config());
  for (std::size_t t = 0; t < 3; ++t) {
    const double self = g.test_mse[t][t].mean();
    for (std::size_t src = 0; src < 4; ++src) {
      if (src == t) continue;
      // Supersets tie with the self decoder up to optimization slack.
      if (s.reps[src].visible >= s.reps[t].visible) {
        EXPECT_LE(self, g.test_mse[t][src].mean() + 1e-3) << g.ids[src] << "->" << g.ids[t];
      } else {
        EXPECT_LT(self, g.test_mse[t][src].mean()) << g.ids[src] << "->" << g.ids[t];
      }
    }
  }
}

TEST(TrainDecoder, ConstantZeroTarget) {
  const TokenCorpus c = synthetic_corpus(500, 2, 100);
  NestedFamilySpec s{1, 2, c.total_tokens(), {{"u", 2, 3, 0.0}}};
  const AlignedDataset ds = align(c, gen_nested_reps(s), "u");
  FeatureBundle zero;
  zero.spec.id = "zero";
  zero.spec.dim = 2;
  zero.values = Matrix::Zero(static_cast<Eigen::Index>(c.total_tokens()), 2);
  LatentDataset l{"u", ds.universal().values};
  const DecoderTraining dt = train_decoder(l, zero, c, split(c).train, fast_config());
  EXPECT_TRUE(dt.decoder.weights.isZero());
  EXPECT_TRUE(dt.decoder.bias.isZero());
  EXPECT_TRUE(decoder_sample_mse(dt.decoder, l.values, zero.values).isZero());
}

TEST(LinearMapFile, RoundTripWithProvenance) {
  TempDir dir;
  LinearMap m{random_matrix(3, 2, 30), testing_support::random_vector(2, 31), MapKind::Decoder};
  Header h;
  h.set("source", "a");
  write_linear_map(m, dir / "m.fbn", h);
  Header back;
  const LinearMap r = read_linear_map(dir / "m.fbn", &back);
  EXPECT_EQ(r.weights, m.weights);
  EXPECT_EQ(r.bias, m.bias);
  EXPECT_EQ(r.kind, MapKind::Decoder);
  EXPECT_EQ(back.get("source"), "a");
}

TEST(Search, CoordinateDescentStaysOnGrid) {
  const TokenCorpus c = synthetic_corpus(1000, 4, 200);
  NestedFamilySpec s{2, 3, c.total_tokens(), {{"a", 2, 3, 0.1}, {"u", 3, 4, 0.1}}};
  const AlignedDataset ds = align(c, gen_nested_reps(s), "u");
  SearchGrid grid;
  grid.latent_dims = {5, 10};
  grid.learning_rates = {0.05, 0.1};
  grid.batch_sizes = {128, 256};
  auto start = fast_config();
  start.latent_dim = 5;
  start.batch_size = 128;
  start.max_batches = 50;
  const TrainConfig best = coordinate_descent_search(ds, start, grid);
  EXPECT_TRUE(best.latent_dim == 5 || best.latent_dim == 10);
  EXPECT_TRUE(best.batch_size == 128 || best.batch_size == 256);
  EXPECT_TRUE(best.lr_encoder == 0.05 || best.lr_encoder == 0.1);
}
