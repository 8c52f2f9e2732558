#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cfpanel/errors.hpp"
#include "cfpanel/linalg.hpp"

namespace cfpanel {

/// Balanced panel of n units observed over T periods.
///
/// Per-period blocks are stored unit-major: row i of `x1` holds
/// (x1_{i1}', ..., x1_{iT}')', so entry (i, t*d1 + j) is component j at period t.
/// `l` and `zl` carry the optional homogeneous-coefficient block and its instruments.
struct PanelData {
  Index n = 0;
  Index T = 0;
  Index d1 = 0;
  Index d2 = 0;
  Index dz = 0;
  Index dl = 0;
  Index dzl = 0;
  std::vector<std::string> unit_ids;
  std::vector<long long> periods;
  MatrixXd y;
  MatrixXd x1;
  MatrixXd x2;
  MatrixXd z;
  MatrixXd l;
  MatrixXd zl;

  Index dx() const noexcept { return d1 + d2; }

  static MatrixXd unit_block(const MatrixXd& m, Index d, Index i, Index T) {
    MatrixXd out(T, d);
    for (Index t = 0; t < T; ++t)
      for (Index j = 0; j < d; ++j) out(t, j) = m(i, t * d + j);
    return out;
  }

  /// T x dx matrix of (x1, x2) for unit i.
  MatrixXd regressors(Index i) const {
    MatrixXd out(T, dx());
    if (d1 > 0) out.leftCols(d1) = unit_block(x1, d1, i, T);
    if (d2 > 0) out.rightCols(d2) = unit_block(x2, d2, i, T);
    return out;
  }

  VectorXd regressor(Index i, Index t) const {
    VectorXd out(dx());
    for (Index j = 0; j < d1; ++j) out(j) = x1(i, t * d1 + j);
    for (Index j = 0; j < d2; ++j) out(d1 + j) = x2(i, t * d2 + j);
    return out;
  }

  /// n x (d1 + dz) matrix of first-stage conditioning variables xi_t = (x1_t, z_t).
  MatrixXd first_stage_inputs(Index t) const {
    MatrixXd out(n, d1 + dz);
    if (d1 > 0) out.leftCols(d1) = x1.middleCols(t * d1, d1);
    if (dz > 0) out.rightCols(dz) = z.middleCols(t * dz, dz);
    return out;
  }

  void validate() const {
    auto check = [&](const MatrixXd& m, Index d, const char* what) {
      if (m.rows() != (d > 0 ? n : m.rows()) || m.cols() != T * d)
        throw DataError(std::string("panel block '") + what + "' has inconsistent dimensions");
      if (!m.allFinite()) throw DataError(std::string("panel block '") + what + "' has non-finite values");
    };
    if (n < 1 || T < 1) throw DataError("panel must have at least one unit and one period");
    if (y.rows() != n || y.cols() != T) throw DataError("outcome block has inconsistent dimensions");
    if (!y.allFinite()) throw DataError("outcome block has non-finite values");
    check(x1, d1, "x1");
    check(x2, d2, "x2");
    check(z, dz, "z");
    check(l, dl, "l");
    check(zl, dzl, "zl");
  }

  /// Panel restricted to the given periods, in the given order.
  PanelData select_periods(std::span<const Index> keep) const {
    PanelData out = *this;
    const auto Tk = static_cast<Index>(keep.size());
    out.T = Tk;
    out.periods.clear();
    for (Index s : keep) out.periods.push_back(periods.empty() ? s + 1 : periods[s]);
    auto pick = [&](const MatrixXd& m, Index d) {
      MatrixXd r(m.rows(), Tk * d);
      for (Index k = 0; k < Tk; ++k)
        if (d > 0) r.middleCols(k * d, d) = m.middleCols(keep[k] * d, d);
      return r;
    };
    out.y = pick(y, 1);
    out.x1 = pick(x1, d1);
    out.x2 = pick(x2, d2);
    out.z = pick(z, dz);
    out.l = pick(l, dl);
    out.zl = pick(zl, dzl);
    return out;
  }

  /// Panel made of the listed units (repeats allowed, as in a bootstrap resample).
  PanelData select_units(std::span<const Index> rows) const {
    PanelData out = *this;
    const auto m = static_cast<Index>(rows.size());
    out.n = m;
    out.unit_ids.clear();
    auto pick = [&](const MatrixXd& src) {
      MatrixXd r(m, src.cols());
      if (src.cols() > 0)
        for (Index k = 0; k < m; ++k) r.row(k) = src.row(rows[k]);
      return r;
    };
    for (Index k = 0; k < m; ++k)
      out.unit_ids.push_back(unit_ids.empty() ? std::to_string(rows[k]) : unit_ids[rows[k]]);
    out.y = pick(y);
    out.x1 = pick(x1);
    out.x2 = pick(x2);
    out.z = pick(z);
    out.l = pick(l);
    out.zl = pick(zl);
    return out;
  }
};

/// First-differenced unit with its within-projector M and left inverse Q.
struct DifferencedUnit {
  MatrixXd Xdot;            ///< (T-1) x dx, row t is x_{t+1} - x_t
  VectorXd ydot;            ///< T-1
  MatrixXd M;               ///< projector onto the orthogonal complement of col(Xdot)
  std::optional<MatrixXd> Q; ///< (Xdot'Xdot)^{-1} Xdot', present when Xdot has full column rank
  double det = 0.0;         ///< det(Xdot'Xdot)
  Index rank = 0;
  bool delta = false;       ///< det > delta0
};

inline MatrixXd difference_rows(const MatrixXd& levels) {
  return levels.bottomRows(levels.rows() - 1) - levels.topRows(levels.rows() - 1);
}

/// Projection algebra for one unit. Rank is decided by singular values relative
/// to the largest; M uses the pseudo-inverse when Xdot is rank deficient.
inline DifferencedUnit make_differenced_unit(MatrixXd xdot, VectorXd ydot, double delta0) {
  DifferencedUnit u;
  const Index rows = xdot.rows();
  const Index cols = xdot.cols();
  u.Xdot = std::move(xdot);
  u.ydot = std::move(ydot);
  u.det = cols > 0 ? (u.Xdot.transpose() * u.Xdot).determinant() : 1.0;

  Eigen::JacobiSVD<MatrixXd> svd(u.Xdot, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const VectorXd& s = svd.singularValues();
  u.rank = linalg::numerical_rank(s);
  const MatrixXd Ur = svd.matrixU().leftCols(u.rank);
  u.M = MatrixXd::Identity(rows, rows) - Ur * Ur.transpose();
  if (cols > 0 && u.rank == cols) {
    const VectorXd inv = s.head(cols).cwiseInverse();
    u.Q = svd.matrixV() * inv.asDiagonal() * svd.matrixU().leftCols(cols).transpose();
  } else if (cols == 0) {
    u.Q = MatrixXd(0, rows);
  }
  u.delta = u.Q.has_value() && u.det > delta0;
  return u;
}

inline std::vector<DifferencedUnit> first_difference(const PanelData& p, double delta0) {
  if (p.T < 2) throw DataError("first differences need at least two periods");
  std::vector<DifferencedUnit> units;
  units.reserve(static_cast<std::size_t>(p.n));
  for (Index i = 0; i < p.n; ++i) {
    MatrixXd xdot = difference_rows(p.regressors(i));
    VectorXd ydot = difference_rows(p.y.row(i).transpose());
    units.push_back(make_differenced_unit(std::move(xdot), std::move(ydot), delta0));
  }
  return units;
}

/// (T-1) x d first differences of a unit-major block.
inline MatrixXd differenced_block(const MatrixXd& m, Index d, Index i, Index T) {
  return difference_rows(PanelData::unit_block(m, d, i, T));
}

inline std::vector<double> xdot_determinants(const PanelData& p) {
  std::vector<double> dets;
  dets.reserve(static_cast<std::size_t>(p.n));
  for (Index i = 0; i < p.n; ++i) {
    const MatrixXd xd = difference_rows(p.regressors(i));
    dets.push_back((xd.transpose() * xd).determinant());
  }
  return dets;
}

/// Default trimming threshold: the 1% quantile of det(Xdot'Xdot), floored at 1e-8.
inline double default_delta0(const PanelData& p) {
  return std::max(linalg::quantile(xdot_determinants(p), 0.01), 1e-8);
}

inline double trim_fraction(std::span<const DifferencedUnit> units) {
  if (units.empty()) throw DataError("trim_fraction needs at least one unit");
  std::size_t trimmed = 0;
  for (const auto& u : units)
    if (!u.delta) ++trimmed;
  return static_cast<double>(trimmed) / static_cast<double>(units.size());
}

} // namespace cfpanel
