#pragma once

#include <limits>
#include <span>
#include <vector>

#include "cfpanel/controls.hpp"
#include "cfpanel/errors.hpp"
#include "cfpanel/panel.hpp"
#include "cfpanel/sieve.hpp"

namespace cfpanel {

/// Column-major vec of a square matrix.
inline VectorXd vec(const MatrixXd& m) { return Eigen::Map<const VectorXd>(m.data(), m.size()); }

inline MatrixXd unvec(const VectorXd& v, Index rows) {
  return Eigen::Map<const MatrixXd>(v.data(), rows, v.size() / rows);
}

/// Series estimates of M(V) = E(M | V) and k(V) = E(M ydot | V), and g = M(V)^{-1} k(V).
class GEstimate {
public:
  GEstimate(const SieveBasis& basis, const MatrixXd& V, std::span<const DifferencedUnit> units, double eig_floor)
      : basis_(basis), eig_floor_(eig_floor) {
    if (units.empty()) throw DataError("no units to fit");
    if (V.rows() != static_cast<Index>(units.size())) throw DataError("controls and units are not aligned");
    m_ = units.front().ydot.size();
    design_ = basis_.design(V);
    pinv_ = linalg::SymmetricPinv(design_.transpose() * design_);
    if (pinv_.rank() == 0) throw NumericalError("second-stage Gram matrix has rank 0");
    const Index n = V.rows();
    MatrixXd Y(n, m_ * m_ + m_);
    for (Index i = 0; i < n; ++i) {
      const auto& u = units[static_cast<std::size_t>(i)];
      Y.row(i).head(m_ * m_) = vec(u.M).transpose();
      Y.row(i).tail(m_) = (u.M * u.ydot).transpose();
    }
    const SeriesFit all = fit_response(Y);
    Mhat_ = {basis_, all.coeffs.leftCols(m_ * m_), all.gram_rank};
    khat_ = {basis_, all.coeffs.rightCols(m_), all.gram_rank};
    sample_lambda_.resize(n);
    for (Index i = 0; i < n; ++i) sample_lambda_(i) = lambda_min(V.row(i).transpose());
  }

  const SieveBasis& basis() const noexcept { return basis_; }
  const SeriesFit& Mhat() const noexcept { return Mhat_; }
  const SeriesFit& khat() const noexcept { return khat_; }
  Index periods() const noexcept { return m_; }
  double eig_floor() const noexcept { return eig_floor_; }
  const MatrixXd& design() const noexcept { return design_; }
  /// lambda_min of the symmetrized M-hat at each sample point.
  const VectorXd& sample_lambda() const noexcept { return sample_lambda_; }
  double min_eig() const { return sample_lambda_.minCoeff(); }

  /// Another regression on the same design, reusing the Gram factorization.
  SeriesFit fit_response(const MatrixXd& Y) const {
    if (Y.rows() != design_.rows()) throw DataError("response rows do not match the design");
    return {basis_, pinv_.solve(design_.transpose() * Y), pinv_.rank()};
  }

  MatrixXd M_at(const VectorXd& v) const { return linalg::symmetrize(unvec(Mhat_.predict(v), m_)); }
  VectorXd k_at(const VectorXd& v) const { return khat_.predict(v); }
  double lambda_min(const VectorXd& v) const { return linalg::lambda_min_sym(M_at(v)); }

  VectorXd g(const VectorXd& v) const {
    const MatrixXd M = M_at(v);
    check(M);
    return M.ldlt().solve(k_at(v));
  }

  /// (T-1) x dim(V) derivative of g, via dg = M^{-1} (dk - dM g).
  MatrixXd dg_dv(const VectorXd& v) const {
    VectorXd p;
    MatrixXd J;
    basis_.evaluate_with_jacobian(v, p, J);
    const MatrixXd M = linalg::symmetrize(unvec(Mhat_.coeffs.transpose() * p, m_));
    check(M);
    const auto ldlt = M.ldlt();
    const VectorXd gv = ldlt.solve(khat_.coeffs.transpose() * p);
    const MatrixXd dM = Mhat_.coeffs.transpose() * J;  // vec(M) x dim
    const MatrixXd dk = khat_.coeffs.transpose() * J;
    MatrixXd out(m_, v.size());
    for (Index k = 0; k < v.size(); ++k) {
      const MatrixXd dMk = linalg::symmetrize(unvec(dM.col(k), m_));
      out.col(k) = ldlt.solve(dk.col(k) - dMk * gv);
    }
    return out;
  }

private:
  void check(const MatrixXd& M) const {
    const double lam = linalg::lambda_min_sym(M);
    if (!(lam >= eig_floor_)) throw SingularMError("M(V) numerically singular at V", lam);
  }

  SieveBasis basis_;
  double eig_floor_;
  Index m_ = 0;
  MatrixXd design_;
  linalg::SymmetricPinv pinv_;
  SeriesFit Mhat_;
  SeriesFit khat_;
  VectorXd sample_lambda_;
};

inline GEstimate fit_g(std::span<const DifferencedUnit> units, const ControlVariableSet& cv, const SieveBasis& basisK,
                       double eig_floor = 0.03) {
  return GEstimate(basisK, cv.Vhat, units, eig_floor);
}

inline GEstimate fit_g(std::span<const DifferencedUnit> units, const ControlVariableSet& cv, const BasisSpec& spec,
                       double eig_floor = 0.03) {
  return GEstimate(make_basis(spec, cv.Vhat, cv.domain()), cv.Vhat, units, eig_floor);
}

struct SweepResult {
  MatrixXd points;
  VectorXd lambda;
  double grid_min = std::numeric_limits<double>::infinity();
  double sample_min = std::numeric_limits<double>::infinity();
  /// Raised when either minimum falls below the estimate's eigenvalue floor.
  bool flagged = false;
};

inline SweepResult invertibility_sweep(const GEstimate& ge, const MatrixXd& grid) {
  SweepResult r;
  r.points = grid;
  r.lambda.resize(grid.rows());
  for (Index k = 0; k < grid.rows(); ++k) r.lambda(k) = ge.lambda_min(grid.row(k).transpose());
  if (grid.rows() > 0) r.grid_min = r.lambda.minCoeff();
  r.sample_min = ge.min_eig();
  r.flagged = std::min(r.grid_min, r.sample_min) < ge.eig_floor();
  return r;
}

/// Grid over the control box: `per_dim` points per component, capped at `max_points`
/// by thinning to the box diagonal plus axis slices through the box centre.
inline MatrixXd box_grid(const Box& box, Index per_dim = 5, Index max_points = 4096) {
  const Index d = box.dim();
  double total = 1.0;
  for (Index j = 0; j < d; ++j) total *= static_cast<double>(per_dim);
  auto coord = [&](Index j, Index k) {
    return per_dim == 1 ? 0.5 * (box.lo(j) + box.hi(j))
                        : box.lo(j) + (box.hi(j) - box.lo(j)) * static_cast<double>(k) / static_cast<double>(per_dim - 1);
  };
  if (total <= static_cast<double>(max_points)) {
    const auto n = static_cast<Index>(total);
    MatrixXd g(n, d);
    for (Index r = 0; r < n; ++r) {
      Index rem = r;
      for (Index j = d - 1; j >= 0; --j) {
        g(r, j) = coord(j, rem % per_dim);
        rem /= per_dim;
      }
    }
    return g;
  }
  MatrixXd g(per_dim * (d + 1), d);
  const VectorXd mid = 0.5 * (box.lo + box.hi);
  Index r = 0;
  for (Index k = 0; k < per_dim; ++k, ++r)
    for (Index j = 0; j < d; ++j) g(r, j) = coord(j, k);
  for (Index j = 0; j < d; ++j)
    for (Index k = 0; k < per_dim; ++k, ++r) {
      g.row(r) = mid.transpose();
      g(r, j) = coord(j, k);
    }
  return g;
}

} // namespace cfpanel
