#pragma once

// Low-dimensional geometry of the embedding matrix: Euclidean row distances,
// weighted metric MDS by stress majorization, and a variance scree.

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "repspace/common.hpp"

namespace repspace {

struct EmbeddingCoords {
  Matrix coords;  // n x k
  double stress = 0.0;
  std::vector<double> dim_variances;  // share of weighted squared-distance mass per dimension
  std::vector<double> stress_history;
  std::size_t iterations = 0;
};

inline Matrix row_distances(const Matrix& R) {
  require(R.allFinite(), "row_distances: non-finite entries");
  const Eigen::Index n = R.rows();
  Matrix d = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) d(i, j) = d(j, i) = (R.row(i) - R.row(j)).norm();
  return d;
}

struct MdsOptions {
  std::size_t dims = 2;
  double tolerance = 1e-9;  // relative stress change
  std::size_t max_iterations = 1000;
};

namespace detail {

inline double weighted_stress(const Matrix& D, const Matrix& pair_w, const Matrix& X) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < D.rows(); ++i)
    for (Eigen::Index j = i + 1; j < D.rows(); ++j) {
      const double e = D(i, j) - (X.row(i) - X.row(j)).norm();
      s += pair_w(i, j) * e * e;
    }
  return s;
}

/// Classical scaling with point weights: weighted double centering of D²,
/// then the top eigenvectors of W^½ B W^½.
inline Matrix weighted_classical(const Matrix& D, const Vector& w, Eigen::Index k) {
  const Eigen::Index n = D.rows();
  const double wsum = w.sum();
  const Matrix D2 = D.array().square();
  const Vector r = D2 * w / wsum;
  const double c = w.dot(r) / wsum;
  Matrix B(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) B(i, j) = -0.5 * (D2(i, j) - r(i) - r(j) + c);
  const Vector sw = w.array().sqrt();
  const Eigen::MatrixXd M = sw.asDiagonal() * B * sw.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M);
  Matrix X = Matrix::Zero(n, k);
  for (Eigen::Index c2 = 0; c2 < k && c2 < n; ++c2) {
    const Eigen::Index idx = n - 1 - c2;
    const double lam = std::max(es.eigenvalues()(idx), 0.0);
    Vector v = es.eigenvectors().col(idx);
    // Deterministic sign: largest-magnitude component positive.
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    X.col(c2) = (v.array() / sw.array()).matrix() * std::sqrt(lam);
  }
  return X;
}

/// Rotates weighted-centered coordinates onto their principal axes, largest first.
inline Matrix principal_axes(const Matrix& X, const Vector& w) {
  const double wsum = w.sum();
  const Eigen::RowVectorXd mean = (w.transpose() * X) / wsum;
  const Matrix C = X.rowwise() - mean;
  const Eigen::MatrixXd cov = C.transpose() * w.asDiagonal() * C / wsum;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const Eigen::MatrixXd axes = es.eigenvectors().rowwise().reverse();
  Matrix out = C * axes;
  for (Eigen::Index c = 0; c < out.cols(); ++c) {
    Eigen::Index arg = 0;
    out.col(c).cwiseAbs().maxCoeff(&arg);
    if (out(arg, c) < 0) out.col(c) = -out.col(c);
  }
  return out;
}

}  // namespace detail

/// Weighted metric MDS minimizing Σ_{i<j} w_i w_j (d_ij - |x_i - x_j|)² by
/// SMACOF from a weighted classical-scaling start. The result is centered and
/// rotated to principal axes. Throws if the stress ever increases.
inline EmbeddingCoords weighted_mds(const Matrix& D, const std::vector<double>& weights, const MdsOptions& opt = {}) {
  const Eigen::Index n = D.rows();
  require(D.cols() == n && n >= 2, "weighted_mds: D must be square with n >= 2");
  if (!D.allFinite()) throw ValidationError("weighted_mds: D has non-finite entries");
  require(static_cast<Eigen::Index>(weights.size()) == n, "weighted_mds: one weight per point required");
  require(opt.dims >= 1, "weighted_mds: dims must be >= 1");
  for (Eigen::Index i = 0; i < n; ++i) {
    require(D(i, i) == 0.0, "weighted_mds: D must have zero diagonal");
    for (Eigen::Index j = 0; j < n; ++j) require(D(i, j) == D(j, i) && D(i, j) >= 0.0, "weighted_mds: D must be symmetric and nonnegative");
  }
  Vector w(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    require(weights[static_cast<std::size_t>(i)] > 0.0, "weighted_mds: weights must be positive");
    w(i) = weights[static_cast<std::size_t>(i)];
  }
  w /= w.mean();
  const Matrix pair_w = w * w.transpose();
  const auto k = static_cast<Eigen::Index>(opt.dims);

  // V = Σ_{i<j} w_ij (e_i - e_j)(e_i - e_j)ᵀ and its pseudo-inverse.
  Matrix V = -pair_w;
  V.diagonal().setZero();
  for (Eigen::Index i = 0; i < n; ++i) V(i, i) = -V.row(i).sum();
  const Matrix ones = Matrix::Constant(n, n, 1.0);
  const Matrix Vplus = Eigen::MatrixXd(V + ones).inverse() - ones / static_cast<double>(n * n);

  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) total += pair_w(i, j) * D(i, j) * D(i, j);
  // Increases below this are rounding, not divergence.
  const double slack_floor = 1e-14 * total;

  EmbeddingCoords out;
  Matrix X = detail::weighted_classical(D, w, k);
  double stress = detail::weighted_stress(D, pair_w, X);
  out.stress_history.push_back(stress);
  std::size_t it = 0;
  for (; it < opt.max_iterations; ++it) {
    Matrix Bm = Matrix::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) {
        if (i == j) continue;
        const double dist = (X.row(i) - X.row(j)).norm();
        if (dist > 0.0) Bm(i, j) = -pair_w(i, j) * D(i, j) / dist;
      }
    for (Eigen::Index i = 0; i < n; ++i) Bm(i, i) = -Bm.row(i).sum();
    Matrix next = Vplus * Bm * X;
    const double s = detail::weighted_stress(D, pair_w, next);
    if (s > stress * (1.0 + 1e-12) + slack_floor)
      throw NumericError("weighted_mds: stress increased at iteration " + std::to_string(it + 1));
    // No decrease at all: converged to rounding level. Keep the previous iterate.
    if (s >= stress) {
      ++it;
      break;
    }
    X = std::move(next);
    out.stress_history.push_back(s);
    const double prev = stress;
    stress = s;
    if (prev <= 0.0 || (prev - s) / prev < opt.tolerance) {
      ++it;
      break;
    }
  }
  out.iterations = it;
  out.coords = detail::principal_axes(X, w);
  out.stress = detail::weighted_stress(D, pair_w, out.coords);

  for (Eigen::Index c = 0; c < k; ++c) {
    double part = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = i + 1; j < n; ++j) {
        const double e = out.coords(i, c) - out.coords(j, c);
        part += pair_w(i, j) * e * e;
      }
    out.dim_variances.push_back(total > 0.0 ? std::clamp(part / total, 0.0, 1.0) : 0.0);
  }
  return out;
}

struct Scree {
  std::vector<double> fractions;
  bool degenerate = false;  // zero total variance
};

/// Variance fractions of the centered rows of R along their principal
/// factors, largest first.
inline Scree scree(const Matrix& R, std::size_t k_max) {
  require(R.allFinite(), "scree: non-finite entries");
  require(k_max <= static_cast<std::size_t>(R.cols()), "scree: k_max exceeds the number of columns");
  const Matrix C = R.rowwise() - R.colwise().mean();
  const Eigen::MatrixXd cov = C.transpose() * C / static_cast<double>(std::max<Eigen::Index>(1, R.rows()));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  Vector lam = es.eigenvalues().reverse().cwiseMax(0.0);
  const double total = lam.sum();
  Scree s;
  s.degenerate = !(total > 0.0);
  for (std::size_t c = 0; c < k_max; ++c) s.fractions.push_back(s.degenerate ? 0.0 : lam(static_cast<Eigen::Index>(c)) / total);
  return s;
}

enum class Sign { Negative, Positive };

struct Orientation {
  EmbeddingCoords coords;
  std::vector<std::string> warnings;
};

/// Flips each dimension so the anchor's coordinate has the requested sign.
/// Dimensions where the anchor sits exactly at 0 are left as they are.
inline Orientation orient(const EmbeddingCoords& in, std::size_t anchor, Sign sign) {
  require(anchor < static_cast<std::size_t>(in.coords.rows()), "orient: anchor index out of range");
  Orientation out{in, {}};
  const auto a = static_cast<Eigen::Index>(anchor);
  for (Eigen::Index c = 0; c < out.coords.coords.cols(); ++c) {
    const double v = out.coords.coords(a, c);
    if (v == 0.0) {
      out.warnings.push_back("orient: anchor coordinate is exactly 0 on dimension " + std::to_string(c + 1) +
                             "; left unflipped");
      continue;
    }
    if ((sign == Sign::Negative) != (v < 0.0)) out.coords.coords.col(c) = -out.coords.coords.col(c);
  }
  return out;
}

}  // namespace repspace
