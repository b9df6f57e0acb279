#include <gtest/gtest.h>

#include "repspace/tournament.hpp"
#include "test_support.hpp"

using namespace repspace;
using testing_support::random_vector;
using testing_support::TempDir;

namespace {

Vector with_wins(int n, int wins, int ties = 0) {
  Vector v = Vector::Ones(n);
  for (int k = 0; k < wins; ++k) v(k) = 0.5;
  for (int k = wins; k < wins + ties; ++k) v(k) = 1.0;
  for (int k = wins + ties; k < n; ++k) v(k) = 2.0;
  return v;
}

}  // namespace

TEST(Fight, ThreeToOne) {
  const Vector ref = Vector::Ones(100);
  EXPECT_EQ(fight(with_wins(100, 75), ref), 3.0);
  EXPECT_EQ(fight(ref, with_wins(100, 75)), 1.0 / 3.0);
}

TEST(Fight, TiesSplitEvenly) {
  const Vector a = random_vector(40, 1);
  EXPECT_EQ(fight(a, a), 1.0);
  // 10 wins, 20 ties, 10 losses.
  EXPECT_EQ(fight(with_wins(40, 10, 20), Vector::Ones(40)), 1.0);
  const Fight f = fight_counts(with_wins(40, 10, 20), Vector::Ones(40));
  EXPECT_EQ(f.wins + f.losses, 80);
}

TEST(Fight, AllWinClampsToOneHalfObservation) {
  const int n = 100;
  const Vector lo = Vector::Zero(n), hi = Vector::Ones(n);
  const Fight f = fight_counts(lo, hi);
  EXPECT_EQ(f.wins, 2 * n - 1);
  EXPECT_EQ(f.losses, 1);
  EXPECT_NEAR(f.proportion(), 1.0 - 1.0 / (2.0 * n), 1e-15);
  EXPECT_EQ(fight(lo, hi), 199.0);
  EXPECT_EQ(fight(hi, lo), 1.0 / 199.0);
}

TEST(Fight, ReciprocalOnRandomData) {
  std::mt19937_64 rng(11);
  for (unsigned trial = 0; trial < 100; ++trial) {
    const Vector a = random_vector(50, 100 + trial), b = random_vector(50, 300 + trial);
    const Fight ij = fight_counts(a, b), ji = fight_counts(b, a);
    EXPECT_EQ(ij.wins, ji.losses);
    EXPECT_EQ(ij.losses, ji.wins);
    EXPECT_NEAR(fight(a, b) * fight(b, a), 1.0, 4 * std::numeric_limits<double>::epsilon());
  }
}

TEST(Fight, Errors) {
  EXPECT_THROW(fight(Vector(), Vector()), ValidationError);
  EXPECT_THROW(fight(Vector::Ones(3), Vector::Ones(4)), ValidationError);
}

TEST(BuildTournament, ExampleEntries) {
  const Vector a = with_wins(100, 75);
  const Vector b = Vector::Ones(100);
  const TournamentMatrix t = build_tournament("x", {a, b});
  EXPECT_EQ(t.W(0, 0), 0.0);
  EXPECT_EQ(t.W(1, 1), 0.0);
  EXPECT_EQ(t.W(0, 1), 3.0);
  EXPECT_EQ(t.W(1, 0), 1.0 / 3.0);
  EXPECT_EQ(t.test_count, 100u);
  EXPECT_NO_THROW(validate(t));
}

TEST(BuildTournament, IdenticalDecodersGiveOnes) {
  const Vector a = random_vector(30, 4);
  const TournamentMatrix t = build_tournament("x", {a, a, a});
  EXPECT_TRUE((t.W + Matrix::Identity(3, 3)).isApproxToConstant(1.0, 0.0));
  const AhpResult r = ahp_weights(t);
  EXPECT_TRUE(r.weights.isApproxToConstant(1.0 / 3.0, 1e-12));
}

TEST(BuildTournament, LengthMismatchNamesTarget) {
  try {
    build_tournament("tgt", {Vector::Ones(3), Vector::Ones(4)});
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("tgt"), std::string::npos);
  }
}

TEST(Ahp, TwoByTwoExample) {
  Matrix w(2, 2);
  w << 0, 3, 1.0 / 3.0, 0;
  const AhpResult r = ahp_weights(w);
  EXPECT_NEAR(r.weights(0), 0.75, 1e-10);
  EXPECT_NEAR(r.weights(1), 0.25, 1e-10);
  EXPECT_NEAR(r.eigenvalue, 1.0, 1e-9);
}

TEST(Ahp, ScaleInvariantAndPositive) {
  Matrix w(4, 4);
  w << 0, 2, 5, 1.5, 0.5, 0, 3, 0.8, 0.2, 1.0 / 3.0, 0, 0.25, 1 / 1.5, 1.25, 4, 0;
  const AhpResult a = ahp_weights(w), b = ahp_weights(5.0 * w);
  EXPECT_TRUE((a.weights - b.weights).cwiseAbs().maxCoeff() < 1e-10);
  EXPECT_TRUE((a.weights.array() > 0).all());
  EXPECT_NEAR(a.weights.sum(), 1.0, 1e-14);
  // Perron vector: W x = lambda x.
  const Vector wx = w * a.weights;
  EXPECT_TRUE((wx - a.eigenvalue * a.weights).cwiseAbs().maxCoeff() < 1e-8);
}

TEST(Ahp, MatchesEigenSolver) {
  Matrix w(5, 5);
  const Vector s = random_vector(5, 8);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) w(i, j) = i == j ? 0.0 : std::exp(s(i) - s(j) + 0.3 * std::sin(i * 7 + j));
  Eigen::EigenSolver<Matrix> es(w);
  Eigen::Index top = 0;
  es.eigenvalues().real().maxCoeff(&top);
  Vector v = es.eigenvectors().col(top).real();
  v /= v.sum();
  EXPECT_LT((ahp_weights(w).weights - v).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Ahp, DominantDecoderRanksFirst) {
  // Decoder k has error k + small jitter, so lower k beats higher k nearly always.
  std::vector<Vector> mse;
  for (int k = 0; k < 4; ++k) mse.push_back(Vector::Constant(200, k) + 0.3 * random_vector(200, 40 + k));
  const AhpResult r = ahp_weights(build_tournament("t", mse));
  for (int k = 0; k + 1 < 4; ++k) EXPECT_GT(r.weights(k), r.weights(k + 1));
}

TEST(Ahp, Errors) {
  Matrix neg = Matrix::Ones(2, 2);
  neg(0, 1) = -1;
  EXPECT_THROW(ahp_weights(neg), ValidationError);
  TournamentMatrix t{"x", Matrix::Ones(2, 2), 1};
  EXPECT_THROW(ahp_weights(t), ValidationError);
  EXPECT_THROW(ahp_weights(Matrix::Zero(3, 3)), NumericError);
}

TEST(Embedding, AssembleExample) {
  Vector w0(2), w1(2);
  w0 << 0.75, 0.25;
  w1 << 0.4, 0.6;
  const EmbeddingMatrix e = assemble_embedding({"a", "b"}, {w0, w1});
  Matrix want(2, 2);
  want << 0.1, 0.25, 0.4, 0.1;
  EXPECT_TRUE(e.R.isApprox(want, 1e-15));
}

TEST(Embedding, RenormalizedRowsSumToOne) {
  std::vector<Vector> w;
  for (unsigned t = 0; t < 3; ++t) {
    Vector v = random_vector(3, t).cwiseAbs();
    w.push_back(v / v.sum());
  }
  const EmbeddingMatrix e = assemble_embedding({"a", "b", "c"}, w, 0.1, true);
  for (int t = 0; t < 3; ++t) {
    EXPECT_NEAR(e.R.row(t).sum(), 1.0, 1e-12);
    EXPECT_EQ(e.R(t, t), 0.1);
  }
}

TEST(Embedding, PermutingIdsPermutesR) {
  std::vector<Vector> w;
  for (unsigned t = 0; t < 3; ++t) w.push_back(random_vector(3, 20 + t).cwiseAbs());
  const EmbeddingMatrix e = assemble_embedding({"a", "b", "c"}, w);
  // Reorder to c, a, b.
  const int p[3] = {2, 0, 1};
  std::vector<Vector> wp;
  for (int t = 0; t < 3; ++t) {
    Vector v(3);
    for (int s = 0; s < 3; ++s) v(s) = w[static_cast<std::size_t>(p[t])](p[s]);
    wp.push_back(v);
  }
  const EmbeddingMatrix ep = assemble_embedding({"c", "a", "b"}, wp);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) EXPECT_EQ(ep.R(i, j), e.R(p[i], p[j]));
}

TEST(Embedding, CountMismatchAndRoundTrip) {
  EXPECT_THROW(assemble_embedding({"a", "b"}, {Vector::Ones(2)}), ValidationError);
  TempDir dir;
  const EmbeddingMatrix e = assemble_embedding({"a", "b"}, {Vector::Ones(2), Vector::Ones(2)}, 0.2);
  write_embedding(e, dir / "R.fbn");
  const EmbeddingMatrix r = read_embedding(dir / "R.fbn");
  EXPECT_EQ(r.ids, e.ids);
  EXPECT_EQ(r.R, e.R);
  EXPECT_EQ(r.diag_value, 0.2);
}
