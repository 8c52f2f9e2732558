#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace cfpanel {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace linalg {

/// Pseudo-inverse of a symmetric positive semidefinite matrix.
///
/// Eigenvalues below `rel_tol * lambda_max` are treated as zero. The factorization
/// is kept so several right-hand sides share one decomposition.
class SymmetricPinv {
public:
  SymmetricPinv() = default;

  explicit SymmetricPinv(const MatrixXd& gram, double rel_tol = 1e-10) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(gram);
    const VectorXd& ev = es.eigenvalues();
    const double top = ev.size() ? std::max(ev.maxCoeff(), 0.0) : 0.0;
    const double cut = rel_tol * top;
    rank_ = 0;
    for (Index k = 0; k < ev.size(); ++k)
      if (top > 0.0 && ev(k) > cut) ++rank_;
    basis_ = es.eigenvectors().rightCols(rank_);
    inv_eigen_ = ev.tail(rank_).cwiseInverse();
  }

  Index rank() const noexcept { return rank_; }

  MatrixXd solve(const MatrixXd& rhs) const {
    return basis_ * (inv_eigen_.asDiagonal() * (basis_.transpose() * rhs));
  }

  MatrixXd matrix() const { return basis_ * inv_eigen_.asDiagonal() * basis_.transpose(); }

  /// Quadratic form p' G^+ p.
  double quad(const VectorXd& p) const {
    const VectorXd w = basis_.transpose() * p;
    return w.dot(inv_eigen_.cwiseProduct(w));
  }

private:
  MatrixXd basis_;
  VectorXd inv_eigen_;
  Index rank_ = 0;
};

inline MatrixXd symmetrize(const MatrixXd& a) { return 0.5 * (a + a.transpose()); }

inline double lambda_min_sym(const MatrixXd& a) {
  if (a.size() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(a, Eigen::EigenvaluesOnly);
  return es.eigenvalues()(0);
}

/// Numerical rank from singular values, relative threshold.
inline Index numerical_rank(const VectorXd& singular_values, double rel_tol = 1e-10) {
  if (singular_values.size() == 0) return 0;
  const double top = singular_values.maxCoeff();
  if (!(top > 0.0)) return 0;
  return (singular_values.array() > rel_tol * top).count();
}

inline double condition_number(const MatrixXd& a) {
  Eigen::JacobiSVD<MatrixXd> svd(a);
  const VectorXd& s = svd.singularValues();
  if (s.size() == 0) return std::numeric_limits<double>::infinity();
  const double lo = s(s.size() - 1);
  return lo > 0.0 ? s(0) / lo : std::numeric_limits<double>::infinity();
}

/// Linear-interpolation sample quantile (R type 7).
inline double quantile(std::vector<double> values, double prob) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

/// Covariance of the rows of `draws` with divisor (rows - 1); zero for a single row.
inline MatrixXd row_covariance(const MatrixXd& draws) {
  const Index r = draws.rows();
  if (r < 2) return MatrixXd::Zero(draws.cols(), draws.cols());
  const MatrixXd centered = draws.rowwise() - draws.colwise().mean();
  return centered.transpose() * centered / static_cast<double>(r - 1);
}

/// Symmetrize and clip negative eigenvalues to zero.
inline MatrixXd nearest_psd(const MatrixXd& a) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(symmetrize(a));
  const VectorXd clipped = es.eigenvalues().cwiseMax(0.0);
  return es.eigenvectors() * clipped.asDiagonal() * es.eigenvectors().transpose();
}

} // namespace linalg
} // namespace cfpanel
