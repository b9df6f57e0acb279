#pragma once

// Links representation embeddings to encoding performance: z-scored
// performance profiles, projection onto the first MDS dimension, the
// leave-two-out discriminability matrix and its cross-subject match rate,
// and the performance similarity matrix.

#include <map>
#include <string>
#include <thread>
#include <vector>

#include "repspace/common.hpp"
#include "repspace/concurrency.hpp"

namespace repspace {

struct PerformanceProfile {
  std::string subject;
  std::vector<std::string> ids;  // representation order
  Matrix P;                      // n x V rho values
  Matrix Pz;                     // per-channel z-score across representations
  std::vector<bool> constant;    // per channel: all representations equal
};

/// Stacks rho rows and z-scores each channel across representations
/// (population SD). Constant channels become zeros and are flagged.
inline PerformanceProfile perf_profile(const std::string& subject, const std::vector<std::string>& ids,
                                       const Matrix& rho) {
  require(rho.rows() >= 2, "perf_profile: need at least two representations");
  require(static_cast<Eigen::Index>(ids.size()) == rho.rows(), "perf_profile: one id per rho row required");
  require(rho.allFinite(), "perf_profile: non-finite rho");
  PerformanceProfile p{subject, ids, rho, Matrix::Zero(rho.rows(), rho.cols()), {}};
  p.constant.resize(static_cast<std::size_t>(rho.cols()));
  for (Eigen::Index v = 0; v < rho.cols(); ++v) {
    const double mean = rho.col(v).mean();
    const double sd = std::sqrt((rho.col(v).array() - mean).square().mean());
    if (!(sd > 0.0)) {
      p.constant[static_cast<std::size_t>(v)] = true;
      continue;
    }
    p.Pz.col(v) = (rho.col(v).array() - mean) / sd;
  }
  return p;
}

/// Keeps only the channels where `mask` is true.
inline Matrix apply_channel_mask(const Matrix& rho, const std::vector<bool>& mask) {
  require(static_cast<Eigen::Index>(mask.size()) == rho.cols(), "channel mask length differs from channel count");
  std::vector<Eigen::Index> keep;
  for (std::size_t v = 0; v < mask.size(); ++v)
    if (mask[v]) keep.push_back(static_cast<Eigen::Index>(v));
  Matrix out(rho.rows(), static_cast<Eigen::Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = rho.col(keep[k]);
  return out;
}

/// Per channel: dot product of the z-scored performance column with the
/// dimension-1 coordinates.
inline Vector project_dim1(const PerformanceProfile& profile, const std::vector<std::string>& coord_ids,
                           const Vector& dim1) {
  require(coord_ids == profile.ids, "project_dim1: coordinate order differs from profile order");
  require(dim1.size() == profile.Pz.rows(), "project_dim1: coordinate count differs from representation count");
  return profile.Pz.transpose() * dim1;
}

/// Row k of R without columns i and j, followed by column k of R without
/// rows i and j. Length 2n - 4.
inline Vector pair_embedding(const Matrix& R, std::size_t k, std::size_t i, std::size_t j) {
  const auto n = static_cast<std::size_t>(R.rows());
  require(R.cols() == R.rows(), "pair_embedding: R must be square");
  require(i != j, "pair_embedding: held-out pair must be two distinct representations");
  require(i < n && j < n && k < n, "pair_embedding: index out of range");
  Vector out(static_cast<Eigen::Index>(2 * n - 4));
  Eigen::Index pos = 0;
  for (std::size_t c = 0; c < n; ++c)
    if (c != i && c != j) out(pos++) = R(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c));
  for (std::size_t r = 0; r < n; ++r)
    if (r != i && r != j) out(pos++) = R(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k));
  return out;
}

struct PairLearner {
  std::size_t i = 0, j = 0;
  Matrix coef;                // (2n-4) x V
  Eigen::RowVectorXd intercept;

  Vector predict(const Vector& r) const { return (r.transpose() * coef + intercept).transpose(); }
};

/// Minimum-norm least squares with intercept from pair embeddings of the
/// n-2 training representations to their rho vectors.
inline PairLearner fit_pair_learner(const Matrix& R, const Matrix& rho, std::size_t i, std::size_t j) {
  const auto n = static_cast<std::size_t>(R.rows());
  if (n < 4) throw ValidationError("fit_pair_learner: need n >= 4 representations");
  require(rho.rows() == R.rows(), "fit_pair_learner: rho rows differ from R");
  Matrix X(static_cast<Eigen::Index>(n - 2), static_cast<Eigen::Index>(2 * n - 4));
  Matrix Y(static_cast<Eigen::Index>(n - 2), rho.cols());
  Eigen::Index row = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (k == i || k == j) continue;
    X.row(row) = pair_embedding(R, k, i, j).transpose();
    Y.row(row) = rho.row(static_cast<Eigen::Index>(k));
    ++row;
  }
  const Eigen::RowVectorXd xm = X.colwise().mean(), ym = Y.colwise().mean();
  Matrix Xc = X.rowwise() - xm;
  const Matrix Yc = Y.rowwise() - ym;
  // Constant features: centering leaves rounding residue that pinv would amplify.
  for (Eigen::Index c = 0; c < X.cols(); ++c)
    if (X.col(c).maxCoeff() == X.col(c).minCoeff()) Xc.col(c).setZero();
  PairLearner h;
  h.i = i;
  h.j = j;
  h.coef = pinv(Xc) * Yc;
  h.intercept = ym - xm * h.coef;
  return h;
}

struct Discrimination {
  double value = 0.0;
  bool flagged = false;  // some correlation was undefined and set to 0
};

/// [corr(ĥ(r_i), ρ_i) + corr(ĥ(r_j), ρ_j)] - [corr(ĥ(r_i), ρ_j) + corr(ĥ(r_j), ρ_i)],
/// correlations across channels.
inline Discrimination discriminability(const Vector& pred_i, const Vector& pred_j, const Vector& rho_i,
                                       const Vector& rho_j) {
  Discrimination d;
  bool u1 = false, u2 = false, u3 = false, u4 = false;
  const double same = pearson(pred_i, rho_i, &u1) + pearson(pred_j, rho_j, &u2);
  const double cross = pearson(pred_i, rho_j, &u3) + pearson(pred_j, rho_i, &u4);
  d.value = same - cross;
  d.flagged = u1 || u2 || u3 || u4;
  return d;
}

inline Discrimination discriminability(const PairLearner& h, const Matrix& R, const Matrix& rho) {
  const Vector ri = pair_embedding(R, h.i, h.i, h.j), rj = pair_embedding(R, h.j, h.i, h.j);
  return discriminability(h.predict(ri), h.predict(rj), rho.row(static_cast<Eigen::Index>(h.i)).transpose(),
                          rho.row(static_cast<Eigen::Index>(h.j)).transpose());
}

struct DiscriminabilityMatrix {
  std::string subject;
  Matrix M;
  std::size_t flagged = 0;
};

/// Leave-two-out score for every unordered pair. One learner serves both
/// orientations, so M is exactly symmetric.
inline DiscriminabilityMatrix discriminability_matrix(const std::string& subject, const Matrix& R, const Matrix& rho,
                                                      std::size_t workers = 1) {
  const auto n = static_cast<std::size_t>(R.rows());
  if (n < 4) throw ValidationError("discriminability_matrix: need n >= 4 representations");
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) pairs.emplace_back(i, j);
  std::vector<Discrimination> results(pairs.size());
  parallel_for(pairs.size(), workers, [&](std::size_t p) {
    const auto [i, j] = pairs[p];
    results[p] = discriminability(fit_pair_learner(R, rho, i, j), R, rho);
  });
  DiscriminabilityMatrix out{subject, Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n)), 0};
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const auto [i, j] = pairs[p];
    out.M(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = results[p].value;
    out.M(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = results[p].value;
    out.flagged += results[p].flagged ? 1 : 0;
  }
  return out;
}

/// For each representation, the percentage of partners j with M[i][j] > 0 in
/// at least `threshold` subjects.
inline std::vector<double> majority_match(const std::vector<Matrix>& subjects, std::size_t threshold = 3) {
  require(!subjects.empty(), "majority_match: need at least one subject");
  const Eigen::Index n = subjects.front().rows();
  require(n >= 2, "majority_match: need at least two representations");
  for (const auto& m : subjects)
    if (m.rows() != n || m.cols() != n) throw ValidationError("majority_match: subjects disagree on n");
  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  for (Eigen::Index i = 0; i < n; ++i) {
    std::size_t hits = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) continue;
      std::size_t positive = 0;
      for (const auto& m : subjects) positive += m(i, j) > 0.0 ? 1 : 0;
      hits += positive >= threshold ? 1 : 0;
    }
    out[static_cast<std::size_t>(i)] = 100.0 * static_cast<double>(hits) / static_cast<double>(n - 1);
  }
  return out;
}

struct Similarity {
  Matrix S;
  std::vector<bool> constant_rows;
};

/// Pearson correlations between representations' rho rows; unit diagonal.
inline Similarity perf_similarity(const Matrix& rho) {
  require(rho.cols() >= 2, "perf_similarity: need at least two channels");
  const Eigen::Index n = rho.rows();
  Similarity s{Matrix::Identity(n, n), std::vector<bool>(static_cast<std::size_t>(n), false)};
  for (Eigen::Index i = 0; i < n; ++i)
    s.constant_rows[static_cast<std::size_t>(i)] = !(rho.row(i).maxCoeff() > rho.row(i).minCoeff());
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j)
      s.S(i, j) = s.S(j, i) = pearson(rho.row(i).transpose(), rho.row(j).transpose());
  return s;
}

/// Mean of a per-channel quantity within each metadata label.
inline std::map<std::string, double> group_mean(const Vector& values, const std::vector<std::string>& labels) {
  require(static_cast<Eigen::Index>(labels.size()) == values.size(), "group_mean: one label per channel required");
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (std::size_t v = 0; v < labels.size(); ++v) {
    auto& a = acc[labels[v]];
    a.first += values(static_cast<Eigen::Index>(v));
    ++a.second;
  }
  std::map<std::string, double> out;
  for (const auto& [k, a] : acc) out[k] = a.first / static_cast<double>(a.second);
  return out;
}

}  // namespace repspace
