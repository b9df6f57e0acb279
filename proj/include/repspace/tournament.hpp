#pragma once

// Per-target tournament matrices from held-out decoder errors, AHP weights
// via the Perron vector, and the stacked representation embedding matrix.

#include <cmath>
#include <string>
#include <vector>

#include "repspace/common.hpp"
#include "repspace/io.hpp"

namespace repspace {

/// Outcome of one decoder pair on the test rows. Counts are in half-wins so
/// ties split evenly: wins + losses == 2 * rows.
struct Fight {
  long long wins = 0;    // 2 * (rows where i has lower MSE) + ties, after clamping
  long long losses = 0;  // 2 * rows - wins
  std::size_t rows = 0;

  double proportion() const { return static_cast<double>(wins) / static_cast<double>(2 * rows); }
  double ratio() const { return static_cast<double>(wins) / static_cast<double>(losses); }
};

/// Smoothed win proportion p of decoder i over decoder j, clamped to
/// [1/(2N), 1 - 1/(2N)]; the tournament entry is p / (1 - p).
inline Fight fight_counts(const Vector& mse_i, const Vector& mse_j) {
  if (mse_i.size() == 0 || mse_j.size() == 0) throw ValidationError("fight: empty MSE vectors");
  require(mse_i.size() == mse_j.size(), "fight: MSE vectors differ in length");
  Fight f;
  f.rows = static_cast<std::size_t>(mse_i.size());
  long long half = 0;
  for (Eigen::Index k = 0; k < mse_i.size(); ++k) {
    if (mse_i(k) < mse_j(k))
      half += 2;
    else if (mse_i(k) == mse_j(k))
      half += 1;
  }
  const auto total = static_cast<long long>(2 * f.rows);
  f.wins = std::clamp<long long>(half, 1, total - 1);
  f.losses = total - f.wins;
  return f;
}

inline double fight(const Vector& mse_i, const Vector& mse_j) { return fight_counts(mse_i, mse_j).ratio(); }

struct TournamentMatrix {
  std::string target;
  Matrix W;
  std::size_t test_count = 0;
};

inline void validate(const TournamentMatrix& t) {
  require(t.W.rows() == t.W.cols(), "tournament: W must be square");
  require(t.W.rows() >= 2, "tournament: need at least two competitors");
  require(t.W.allFinite(), "tournament: W has non-finite entries");
  for (Eigen::Index i = 0; i < t.W.rows(); ++i)
    for (Eigen::Index j = 0; j < t.W.cols(); ++j) {
      if (i == j)
        require(t.W(i, j) == 0.0, "tournament: diagonal must be zero");
      else
        require(t.W(i, j) > 0.0, "tournament: off-diagonal entries must be positive");
    }
}

/// W[i][j] = fight(mse_i, mse_j) over every ordered pair of decoders into
/// `target`, self decoder included; zero diagonal.
inline TournamentMatrix build_tournament(const std::string& target, const std::vector<Vector>& mse) {
  require(mse.size() >= 2, "build_tournament: need at least two decoders");
  const auto n = static_cast<Eigen::Index>(mse.size());
  for (const auto& v : mse)
    if (v.size() != mse.front().size())
      throw ValidationError("build_tournament(" + target + "): per-row MSE vectors differ in length");
  TournamentMatrix t{target, Matrix::Zero(n, n), static_cast<std::size_t>(mse.front().size())};
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (i != j) t.W(i, j) = fight(mse[static_cast<std::size_t>(i)], mse[static_cast<std::size_t>(j)]);
  return t;
}

struct PowerIterationOptions {
  double tolerance = 1e-10;
  std::size_t max_iterations = 10000;
};

struct AhpResult {
  Vector weights;
  double eigenvalue = 0.0;
  std::size_t iterations = 0;
};

/// Perron vector of W normalized to sum to 1.
///
/// Power iteration runs on W + sI, where s is the current Perron root
/// estimate sum(Wx) for the sum-normalized iterate x. The shift leaves the
/// eigenvectors unchanged and makes the Perron root strictly dominant even
/// when W has other eigenvalues of equal modulus (±1 in the 2x2 reciprocal
/// case), where unshifted iteration oscillates.
inline AhpResult ahp_weights(const Matrix& W, const PowerIterationOptions& opt = {}) {
  require(W.rows() == W.cols() && W.rows() >= 1, "ahp_weights: W must be square");
  require(W.allFinite() && (W.array() >= 0.0).all(), "ahp_weights: W must be finite and nonnegative");
  const Eigen::Index n = W.rows();
  Vector x = Vector::Constant(n, 1.0 / static_cast<double>(n));
  AhpResult res;
  for (std::size_t it = 1; it <= opt.max_iterations; ++it) {
    const Vector wx = W * x;
    const double lambda = wx.sum();
    if (!(lambda > 0.0) || !std::isfinite(lambda)) throw NumericError("ahp_weights: iteration collapsed (reducible W?)");
    Vector y = (wx + lambda * x) / (2.0 * lambda);
    const double change = (y - x).lpNorm<1>();
    x = std::move(y);
    if (change <= opt.tolerance) {
      res.iterations = it;
      res.weights = x / x.sum();
      res.eigenvalue = (W * res.weights).sum();
      return res;
    }
  }
  throw NumericError("ahp_weights: power iteration did not converge after " + std::to_string(opt.max_iterations) +
                     " iterations");
}

inline AhpResult ahp_weights(const TournamentMatrix& t, const PowerIterationOptions& opt = {}) {
  validate(t);
  return ahp_weights(t.W, opt);
}

struct EmbeddingMatrix {
  std::vector<std::string> ids;  // canonical order; rows = decoded target, columns = source encoder
  Matrix R;
  double diag_value = 0.1;
};

/// Stacks per-target AHP weight vectors and overwrites each target's own
/// entry with `diag_value`. With `renormalize`, the off-target entries are
/// rescaled to sum to 1 - diag_value afterwards.
inline EmbeddingMatrix assemble_embedding(const std::vector<std::string>& ids, const std::vector<Vector>& weights,
                                          double diag_value = 0.1, bool renormalize = false) {
  const auto n = static_cast<Eigen::Index>(ids.size());
  if (weights.size() != ids.size())
    throw ValidationError("assemble_embedding: got " + std::to_string(weights.size()) + " weight vectors for " +
                          std::to_string(ids.size()) + " representations");
  EmbeddingMatrix e{ids, Matrix::Zero(n, n), diag_value};
  for (Eigen::Index t = 0; t < n; ++t) {
    const Vector& w = weights[static_cast<std::size_t>(t)];
    require(w.size() == n, "assemble_embedding: weight vector length differs from n");
    e.R.row(t) = w.transpose();
    if (renormalize) {
      const double off = w.sum() - w(t);
      if (off > 0.0) e.R.row(t) *= (1.0 - diag_value) / off;
    }
    e.R(t, t) = diag_value;
  }
  return e;
}

inline void write_embedding(const EmbeddingMatrix& e, const fs::path& path) {
  Header h;
  h.set("kind", "embedding");
  h.set("ids", [&] {
    std::string s;
    for (std::size_t k = 0; k < e.ids.size(); ++k) s += (k ? "," : "") + e.ids[k];
    return s;
  }());
  h.set("diag_value", e.diag_value);
  write_matrix_file(path, e.R, h, DType::F64);
}

inline EmbeddingMatrix read_embedding(const fs::path& path) {
  auto f = read_matrix_file(path);
  if (f.header.get_or("kind", "") != "embedding") throw IoError(path.string() + ": not an embedding matrix");
  EmbeddingMatrix e;
  e.R = f.data;
  e.diag_value = f.header.get_double("diag_value");
  const auto ids = f.header.get("ids");
  std::size_t pos = 0;
  while (pos <= ids.size()) {
    auto c = ids.find(',', pos);
    if (c == std::string::npos) c = ids.size();
    e.ids.push_back(ids.substr(pos, c - pos));
    pos = c + 1;
  }
  require(static_cast<Eigen::Index>(e.ids.size()) == e.R.rows(), path.string() + ": id count differs from R");
  return e;
}

}  // namespace repspace
