#include <gtest/gtest.h>

#include "repspace/encoding.hpp"
#include "test_support.hpp"

using namespace repspace;
using testing_support::random_matrix;
using testing_support::random_vector;
using testing_support::TempDir;

TEST(Downsample, BinsAverageAndEmptyBinsRepeat) {
  Matrix v(4, 1);
  v << 1, 3, 10, 20;
  // Bins of 2 s: words at 0, 1 -> bin 0; 5 -> bin 2; 5.5 -> bin 2. Bin 1 empty.
  const Matrix out = downsample(v, {0.0, 1.0, 5.0, 5.5}, 2.0, 4);
  EXPECT_EQ(out(0, 0), 2.0);
  EXPECT_EQ(out(1, 0), 2.0);
  EXPECT_EQ(out(2, 0), 15.0);
  EXPECT_EQ(out(3, 0), 15.0);
}

TEST(Downsample, LeadingEmptyBinsAreZeroAndLateWordsDropped) {
  Matrix v(2, 2);
  v << 1, 2, 3, 4;
  const Matrix out = downsample(v, {4.1, 100.0}, 2.0, 3);
  EXPECT_TRUE(out.topRows(2).isZero());
  EXPECT_EQ(out(2, 0), 1.0);
  EXPECT_EQ(out(2, 1), 2.0);
}

TEST(Downsample, MatchesBruteForce) {
  const Matrix v = random_matrix(50, 3, 1);
  std::vector<double> t(50);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 30.0);
  for (auto& x : t) x = u(rng);
  std::sort(t.begin(), t.end());
  const std::size_t M = 16;
  const Matrix out = downsample(v, t, 2.0, M);
  Vector prev = Vector::Zero(3);
  for (std::size_t m = 0; m < M; ++m) {
    Vector sum = Vector::Zero(3);
    int n = 0;
    for (int j = 0; j < 50; ++j)
      if (t[static_cast<std::size_t>(j)] >= 2.0 * m && t[static_cast<std::size_t>(j)] < 2.0 * (m + 1)) {
        sum += v.row(j).transpose();
        ++n;
      }
    const Vector want = n ? Vector(sum / n) : prev;
    EXPECT_LT((out.row(static_cast<Eigen::Index>(m)).transpose() - want).cwiseAbs().maxCoeff(), 1e-12) << m;
    prev = want;
  }
}

TEST(Downsample, Errors) {
  EXPECT_THROW(downsample(Matrix::Ones(2, 1), {0.0}, 2.0, 1), ValidationError);
  EXPECT_THROW(downsample(Matrix::Ones(2, 1), {1.0, 0.0}, 2.0, 1), ValidationError);
  EXPECT_THROW(downsample(Matrix::Ones(1, 1), {0.0}, 0.0, 1), ValidationError);
}

TEST(TrTimeline, StoriesAreContiguous) {
  TokenCorpus c({{"a", Role::Train, 10, {}, {}}, {"b", Role::Test, 6, {}, {}}});
  const TrTimeline tl = tr_timeline(c, 2.0, 2.5);
  // 10 words at 2.5 wps: last onset 3.6 s -> 2 TRs. 6 words: 2.0 s -> 2 TRs.
  ASSERT_EQ(tl.story_trs.size(), 2u);
  EXPECT_EQ(tl.story_trs[0].end, 2u);
  EXPECT_EQ(tl.story_trs[1].begin, 2u);
  EXPECT_EQ(tl.total_trs, 4u);
  EXPECT_EQ(tl.test_trs, RowIndex({2, 3}));
}

TEST(DelayExpand, Example) {
  Matrix x(4, 2);
  x << 1, 2, 3, 4, 5, 6, 7, 8;
  const DelayedDesign d = delay_expand(x, {1, 2});
  Matrix want(4, 4);
  want << 0, 0, 0, 0, 1, 2, 0, 0, 3, 4, 1, 2, 5, 6, 3, 4;
  EXPECT_EQ(d.X, want);
  EXPECT_EQ(d.delays, std::vector<int>({1, 2}));
}

TEST(DelayExpand, RestartsAtStoryBoundaries) {
  Matrix x(4, 1);
  x << 1, 2, 3, 4;
  const DelayedDesign d = delay_expand_stories(x, {{0, 2}, {2, 4}}, {1});
  EXPECT_EQ(d.X(2, 0), 0.0);
  EXPECT_EQ(d.X(3, 0), 3.0);
}

TEST(DelayExpand, RejectsBadDelays) {
  EXPECT_THROW(delay_expand(Matrix::Ones(3, 1), {}), ValidationError);
  EXPECT_THROW(delay_expand(Matrix::Ones(3, 1), {0}), ValidationError);
  EXPECT_THROW(delay_expand(Matrix::Ones(3, 1), {1, 1}), ValidationError);
}

TEST(Ridge, IdentityExample) {
  Vector y(2);
  y << 1, 2;
  const RidgeFit f = ridge_fit(Matrix::Identity(2, 2), y, 1.0);
  EXPECT_NEAR(f.weights(0), 0.5, 1e-12);
  EXPECT_NEAR(f.weights(1), 1.0, 1e-12);
  EXPECT_FALSE(f.min_norm);
}

TEST(Ridge, MatchesNormalEquations) {
  const Matrix x = random_matrix(30, 5, 3);
  const Vector y = random_vector(30, 4);
  for (double a : {0.01, 1.0, 100.0}) {
    const Vector want = (x.transpose() * x + a * Matrix::Identity(5, 5)).ldlt().solve(x.transpose() * y);
    EXPECT_LT((ridge_fit(x, y, a).weights - want).cwiseAbs().maxCoeff(), 1e-10) << a;
  }
}

TEST(Ridge, ZeroAlphaIsOls) {
  const Matrix x = random_matrix(40, 6, 5);
  const Vector y = random_vector(40, 6);
  const Vector ols = x.colPivHouseholderQr().solve(y);
  EXPECT_LT((ridge_fit(x, y, 0.0).weights - ols).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Ridge, RankDeficientZeroAlphaIsMinimumNorm) {
  Matrix x = random_matrix(20, 3, 7);
  Matrix xd(20, 4);
  xd << x, x.col(0);
  const Vector y = random_vector(20, 8);
  const RidgeFit f = ridge_fit(xd, y, 0.0);
  EXPECT_TRUE(f.min_norm);
  EXPECT_LT((f.weights - pinv(xd) * y).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_NEAR(f.weights(0), f.weights(3), 1e-10);
}

TEST(Ridge, LargeAlphaShrinksAndPathIsContinuous) {
  const Matrix x = random_matrix(25, 4, 9);
  const Vector y = random_vector(25, 10);
  EXPECT_LT(ridge_fit(x, y, 1e12).weights.norm(), 1e-9 * y.norm());
  double prev = ridge_fit(x, y, 1e-3).weights.norm();
  for (double a = 1e-3; a < 1e4; a *= 1.5) {
    const double n = ridge_fit(x, y, a).weights.norm();
    EXPECT_LE(n, prev + 1e-12);
    prev = n;
  }
  EXPECT_LT((ridge_fit(x, y, 1.0).weights - ridge_fit(x, y, 1.0 + 1e-6).weights).norm(), 1e-5);
  EXPECT_THROW(ridge_fit(x, y, -1.0), ValidationError);
}

TEST(McCv, NoiselessPicksSmallestAlpha) {
  const Matrix x = random_matrix(200, 5, 11);
  const Matrix y = x * random_matrix(5, 3, 12);
  CvOptions o;
  o.folds = 10;
  const CvResult r = mc_cv_alpha(x, y, o);
  for (double a : r.alphas) EXPECT_EQ(a, o.alphas.front());
}

TEST(McCv, PureNoiseRuns) {
  const Matrix x = random_matrix(100, 10, 13);
  const Matrix y = random_matrix(100, 4, 14);
  CvOptions o;
  o.folds = 5;
  const CvResult r = mc_cv_alpha(x, y, o);
  EXPECT_EQ(r.alphas.size(), 4u);
  EXPECT_TRUE(r.mean_scores.allFinite());
}

TEST(McCv, ReproducibleAndChannelOrderInvariant) {
  const Matrix x = random_matrix(120, 8, 15);
  Matrix y = x * random_matrix(8, 4, 16) + 3.0 * random_matrix(120, 4, 17);
  CvOptions o;
  o.folds = 8;
  o.seed = 5;
  const CvResult a = mc_cv_alpha(x, y, o), b = mc_cv_alpha(x, y, o);
  EXPECT_EQ(a.alphas, b.alphas);
  EXPECT_EQ(a.mean_scores, b.mean_scores);
  Matrix yr = y.rowwise().reverse();
  const CvResult c = mc_cv_alpha(x, yr, o);
  for (int v = 0; v < 4; ++v) EXPECT_EQ(c.alphas[static_cast<std::size_t>(3 - v)], a.alphas[static_cast<std::size_t>(v)]);
}

TEST(McCv, ConstantHeldOutTargetsCounted) {
  const Matrix x = random_matrix(50, 3, 18);
  Matrix y = Matrix::Zero(50, 2);
  y.col(0) = random_vector(50, 19);
  CvOptions o;
  o.folds = 3;
  EXPECT_EQ(mc_cv_alpha(x, y, o).degenerate, 3u);
}

TEST(EncodingPerformance, Examples) {
  const Matrix x = random_matrix(40, 3, 20);
  const Matrix w = random_matrix(3, 2, 21);
  Matrix y = x * w;
  y.col(1) = -y.col(1);
  const Scores s = encoding_performance(w, x, y);
  EXPECT_NEAR(s.rho(0), 1.0, 1e-12);
  EXPECT_NEAR(s.rho(1), -1.0, 1e-12);
  Matrix c = y;
  c.col(0).setConstant(2.0);
  const Scores u = encoding_performance(w, x, c);
  EXPECT_TRUE(u.undefined[0]);
  EXPECT_EQ(u.rho(0), 0.0);
  EXPECT_THROW(encoding_performance(w, x.leftCols(2), y), ValidationError);
}

TEST(FitEncodingModel, NoiselessChannelsAreRecovered) {
  const Matrix x = random_matrix(300, 6, 22);
  const Matrix w = random_matrix(6, 5, 23);
  const Matrix y = x * w;
  CvOptions o;
  o.folds = 5;
  const EncodingResult r = fit_encoding_model("x", x.topRows(250), y.topRows(250), x.bottomRows(50), y.bottomRows(50), o);
  for (int v = 0; v < 5; ++v) EXPECT_GT(r.rho(v), 0.999);
}

TEST(Persistence, ResponsesRoundTrip) {
  TempDir dir;
  ResponseDataset r;
  r.responses = random_matrix(6, 3, 24).cast<float>().cast<double>();
  r.train_trs = {0, 1, 2, 3};
  r.test_trs = {4, 5};
  r.story_trs = {{0, 4}, {4, 6}};
  r.channel_ids = {"a", "b", "c"};
  r.channel_labels = {"x", "y", "z"};
  write_responses(r, dir / "r.fbn");
  const ResponseDataset b = read_responses(dir / "r.fbn");
  EXPECT_EQ(b.responses, r.responses);
  EXPECT_EQ(b.train_trs, r.train_trs);
  EXPECT_EQ(b.test_trs, r.test_trs);
  EXPECT_EQ(b.story_trs.size(), 2u);
  EXPECT_EQ(b.story_trs[1].begin, 4u);
  EXPECT_EQ(b.channel_ids, r.channel_ids);
  EXPECT_EQ(b.channel_labels, r.channel_labels);
}

TEST(Persistence, EncodingResultRoundTrip) {
  TempDir dir;
  EncodingResult e{"rep", {1.0, 10.0}, random_matrix(4, 2, 25), Vector::Constant(2, 0.5), {false, true}};
  write_encoding_result(e, dir / "e.fbn");
  const EncodingResult b = read_encoding_result(dir / "e.fbn");
  EXPECT_EQ(b.rep_id, "rep");
  EXPECT_EQ(b.alphas, e.alphas);
  EXPECT_EQ(b.weights, e.weights);
  EXPECT_EQ(b.undefined, e.undefined);
}

TEST(Ranges, FormatAndParse) {
  const RowIndex r{0, 1, 2, 5, 7, 8};
  EXPECT_EQ(format_ranges(r), "0-3,5-6,7-9");
  EXPECT_EQ(parse_ranges("0-3,5-6,7-9"), r);
  EXPECT_THROW(parse_ranges("4"), IoError);
}
