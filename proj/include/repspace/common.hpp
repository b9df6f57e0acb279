#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace repspace {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowIndex = std::vector<std::size_t>;

/// Raised when an input violates a documented invariant.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised on filesystem or container-format failures.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when an iterative routine fails to converge or diverges.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

/// Pearson correlation. Returns 0 and sets `undefined` when either side has
/// zero variance.
inline double pearson(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b,
                      bool* undefined = nullptr) {
  if (a.size() != b.size()) throw ValidationError("pearson: length mismatch");
  if (undefined) *undefined = false;
  const Eigen::Index n = a.size();
  if (n < 2) {
    if (undefined) *undefined = true;
    return 0.0;
  }
  const Vector ac = a.array() - a.mean();
  const Vector bc = b.array() - b.mean();
  const double saa = ac.squaredNorm();
  const double sbb = bc.squaredNorm();
  if (saa <= 0.0 || sbb <= 0.0) {
    if (undefined) *undefined = true;
    return 0.0;
  }
  double r = ac.dot(bc) / std::sqrt(saa * sbb);
  return std::clamp(r, -1.0, 1.0);
}

/// Selects rows of `m` by index.
inline Matrix take_rows(const Matrix& m, const RowIndex& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = m.row(static_cast<Eigen::Index>(rows[k]));
  return out;
}

inline RowIndex iota_rows(std::size_t begin, std::size_t end) {
  RowIndex r;
  r.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) r.push_back(i);
  return r;
}

/// Pseudo-inverse through SVD with the usual relative cutoff.
inline Matrix pinv(const Matrix& a, double rcond = -1.0) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& s = svd.singularValues();
  if (s.size() == 0) return Matrix::Zero(a.cols(), a.rows());
  if (rcond < 0) rcond = std::numeric_limits<double>::epsilon() * static_cast<double>(std::max(a.rows(), a.cols()));
  const double cut = rcond * s(0);
  Vector inv(s.size());
  for (Eigen::Index i = 0; i < s.size(); ++i) inv(i) = s(i) > cut ? 1.0 / s(i) : 0.0;
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

}  // namespace repspace
