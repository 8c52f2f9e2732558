#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cfpanel/config.hpp"
#include "cfpanel/controls.hpp"
#include "cfpanel/errors.hpp"
#include "cfpanel/gfunc.hpp"
#include "cfpanel/panel.hpp"

namespace cfpanel {

struct Diagnostics {
  double min_eig = 0.0;        ///< smallest lambda_min(M-hat(V_i)) over the sample
  double trim_fraction = 0.0;  ///< share of units with delta = 0
  Index eig_trimmed = 0;       ///< units with delta = 1 dropped because M-hat(V_i) is near singular
  Index n_used = 0;
  double delta0 = 0.0;
  std::optional<double> b_condition;
  Index subsets_used = 1;
  Index subsets_dropped = 0;
  Index bootstrap_failures = 0;
  std::vector<std::string> warnings;
};

struct ApeEstimate {
  VectorXd mu_hat;
  double alpha_hat = 0.0;
  double phi_hat = 0.0;  ///< share of units used
  VectorXd se;
  MatrixXd cov;
  Diagnostics diagnostics;
  /// Per-unit pseudo-coefficients Q_i (ydot_i - g(V_i)); rows of unused units are zero.
  MatrixXd mu_tilde;
  /// Fitted g at each unit; rows are zero where it was not evaluated.
  MatrixXd g_hat;
  std::vector<char> used;
  std::optional<VectorXd> b_hat;
  /// Per-unit influence values whose covariance / n is cov (plug-in inference only).
  std::optional<MatrixXd> influence;
};

/// Point estimate from per-unit g values. `eligible` selects units with a usable g row.
inline ApeEstimate ape_from_g(std::span<const DifferencedUnit> units, const MatrixXd& G,
                              const std::vector<char>& eligible) {
  const auto n = static_cast<Index>(units.size());
  if (n == 0) throw DataError("no units");
  const Index dx = units.front().Xdot.cols();
  ApeEstimate a;
  a.mu_tilde = MatrixXd::Zero(n, dx);
  a.g_hat = G;
  a.used.assign(static_cast<std::size_t>(n), 0);
  VectorXd sum = VectorXd::Zero(dx);
  Index used = 0;
  for (Index i = 0; i < n; ++i) {
    const auto& u = units[static_cast<std::size_t>(i)];
    if (!u.delta || !eligible[static_cast<std::size_t>(i)]) continue;
    a.mu_tilde.row(i) = (*u.Q * (u.ydot - G.row(i).transpose())).transpose();
    sum += a.mu_tilde.row(i).transpose();
    a.used[static_cast<std::size_t>(i)] = 1;
    ++used;
  }
  if (used == 0) throw NumericalError("all units trimmed");
  a.mu_hat = sum / static_cast<double>(used);
  a.phi_hat = static_cast<double>(used) / static_cast<double>(n);
  a.diagnostics.n_used = used;
  a.diagnostics.trim_fraction = trim_fraction(units);
  a.se = VectorXd::Zero(dx);
  a.cov = MatrixXd::Zero(dx, dx);
  return a;
}

/// Trimmed average of Q_i (ydot_i - g(V_i)) over units with delta = 1.
///
/// Units whose M-hat(V_i) falls below the eigenvalue floor are dropped (policy trim)
/// or reported as an error naming the unit (policy error).
inline ApeEstimate estimate_ape(std::span<const DifferencedUnit> units, const ControlVariableSet& cv,
                                const GEstimate& ge, SingularPolicy policy = SingularPolicy::trim) {
  const auto n = static_cast<Index>(units.size());
  if (cv.n() != n) throw DataError("controls and units are not aligned");
  MatrixXd G = MatrixXd::Zero(n, ge.periods());
  std::vector<char> eligible(static_cast<std::size_t>(n), 0);
  Index eig_trimmed = 0;
  for (Index i = 0; i < n; ++i) {
    const bool ok = ge.sample_lambda()(i) >= ge.eig_floor();
    if (ok) {
      G.row(i) = ge.g(cv.Vhat.row(i).transpose()).transpose();
      eligible[static_cast<std::size_t>(i)] = 1;
    } else if (units[static_cast<std::size_t>(i)].delta) {
      if (policy == SingularPolicy::error)
        throw SingularMError("M(V) numerically singular at unit " + std::to_string(i + 1), ge.sample_lambda()(i));
      ++eig_trimmed;
    }
  }
  ApeEstimate a = ape_from_g(units, G, eligible);
  a.diagnostics.min_eig = ge.min_eig();
  a.diagnostics.eig_trimmed = eig_trimmed;
  if (eig_trimmed > 0)
    a.diagnostics.warnings.push_back(std::to_string(eig_trimmed) + " units dropped: M(V) below eigenvalue floor");
  return a;
}

/// Mean over used units of y_i1 - x_i1' mu_tilde_i; `offset` is subtracted from y_i1 first.
inline double estimate_alpha(const PanelData& p, const ApeEstimate& a, const VectorXd* offset = nullptr) {
  double sum = 0.0;
  for (Index i = 0; i < p.n; ++i) {
    if (!a.used[static_cast<std::size_t>(i)]) continue;
    double y1 = p.y(i, 0) - (offset ? (*offset)(i) : 0.0);
    sum += y1 - p.regressor(i, 0).dot(a.mu_tilde.row(i).transpose());
  }
  return sum / static_cast<double>(a.diagnostics.n_used);
}

/// Mean over used units of (l(x_it) - x_it)' mu_tilde_i.
inline double policy_effect(const PanelData& p, const ApeEstimate& a, Index t,
                            const std::function<VectorXd(const VectorXd&)>& l) {
  if (t < 0 || t >= p.T) throw DataError("policy period out of range");
  double sum = 0.0;
  for (Index i = 0; i < p.n; ++i) {
    if (!a.used[static_cast<std::size_t>(i)]) continue;
    const VectorXd x = p.regressor(i, t);
    sum += (l(x) - x).dot(a.mu_tilde.row(i).transpose());
  }
  return sum / static_cast<double>(a.diagnostics.n_used);
}

struct CommonBResult {
  VectorXd b_hat;
  double condition = 0.0;
  /// ydot_i - Ldot_i b_hat per unit.
  std::vector<VectorXd> ydot_adjusted;
};

/// Homogeneous coefficient b on the L block, instrumented by Z^L:
/// b = [sum Zdot' M dL]^{-1} [sum Zdot' M dy] with dL = Ldot - M(V)^{-1} E(M Ldot | V)
/// and dy = ydot - g(V). Over-identified instruments use GMM weights (sum Zdot' M Zdot)^{-1}.
inline CommonBResult estimate_common_b(const PanelData& p, std::span<const DifferencedUnit> units,
                                       const ControlVariableSet& cv, const GEstimate& ge) {
  if (p.dl < 1) throw DataError("no homogeneous-coefficient block");
  if (p.dzl < p.dl) throw DataError("need at least as many instruments as homogeneous regressors");
  const Index m = ge.periods();
  const Index n = p.n;
  MatrixXd Ydl(n, m * p.dl);
  std::vector<MatrixXd> Ldot(static_cast<std::size_t>(n)), Zdot(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    Ldot[static_cast<std::size_t>(i)] = differenced_block(p.l, p.dl, i, p.T);
    Zdot[static_cast<std::size_t>(i)] = differenced_block(p.zl, p.dzl, i, p.T);
    Ydl.row(i) = vec(units[static_cast<std::size_t>(i)].M * Ldot[static_cast<std::size_t>(i)]).transpose();
  }
  const SeriesFit ml = ge.fit_response(Ydl);
  MatrixXd A = MatrixXd::Zero(p.dzl, p.dl);
  VectorXd c = VectorXd::Zero(p.dzl);
  MatrixXd W = MatrixXd::Zero(p.dzl, p.dzl);
  for (Index i = 0; i < n; ++i) {
    if (ge.sample_lambda()(i) < ge.eig_floor()) continue;
    const auto& u = units[static_cast<std::size_t>(i)];
    const VectorXd v = cv.Vhat.row(i).transpose();
    const MatrixXd Mv = ge.M_at(v);
    const auto ldlt = Mv.ldlt();
    const MatrixXd dL = Ldot[static_cast<std::size_t>(i)] - ldlt.solve(unvec(ml.coeffs.transpose() * ge.design().row(i).transpose(), m));
    const VectorXd dy = u.ydot - ldlt.solve(ge.k_at(v));
    const MatrixXd ZM = Zdot[static_cast<std::size_t>(i)].transpose() * u.M;
    A += ZM * dL;
    c += ZM * dy;
    W += ZM * Zdot[static_cast<std::size_t>(i)];
  }
  CommonBResult r;
  if (p.dzl == p.dl) {
    r.condition = linalg::condition_number(A);
    if (!(r.condition <= 1e10)) throw NumericalError("common-b moment matrix is near singular (condition " + std::to_string(r.condition) + ")");
    r.b_hat = A.fullPivLu().solve(c);
  } else {
    const MatrixXd Winv = linalg::SymmetricPinv(W).matrix();
    const MatrixXd AWA = A.transpose() * Winv * A;
    r.condition = linalg::condition_number(AWA);
    if (!(r.condition <= 1e10)) throw NumericalError("common-b moment matrix is near singular (condition " + std::to_string(r.condition) + ")");
    r.b_hat = AWA.ldlt().solve(A.transpose() * Winv * c);
  }
  for (Index i = 0; i < n; ++i)
    r.ydot_adjusted.push_back(units[static_cast<std::size_t>(i)].ydot - Ldot[static_cast<std::size_t>(i)] * r.b_hat);
  return r;
}

/// Per-unit pieces of the linearized estimator.
struct InfluenceParts {
  MatrixXd term1;  ///< u_i mu_tilde_i - mean
  MatrixXd term2;  ///< -E(Q|V_i) M(V_i)^{-1} M_i (ydot_i - g(V_i))
  MatrixXd term3;  ///< first-stage correction
  MatrixXd s;      ///< centered sum of the three terms
  MatrixXd psi;    ///< (s_i - mu (u_i - phi)) / phi
  MatrixXd omega0;
  MatrixXd xi;
};

/// Plug-in asymptotic covariance of the trimmed APE.
///
/// The residual in the Q-tilde term uses mu_tilde_i, so Q_i times it vanishes and only the
/// M-hat correction survives. The first-stage correction regresses Q-tilde dg/dv_t on the
/// first-stage basis (residual controls) or uses the delta method for rho (AR(1) controls).
inline InfluenceParts plug_in_variance(const PanelData& p, std::span<const DifferencedUnit> units,
                                       const ControlVariableSet& cv, const GEstimate& ge, ApeEstimate& a,
                                       XiSigns signs = XiSigns::delta_method) {
  const auto n = static_cast<Index>(units.size());
  const Index dx = a.mu_hat.size();
  const Index m = ge.periods();
  if (a.diagnostics.n_used < dx + 1) throw NumericalError("too few untrimmed units for the variance");
  const double phi = a.phi_hat;
  InfluenceParts f;

  // E(Q^delta | V): vec of u_i Q_i regressed on the second-stage basis.
  MatrixXd Yq = MatrixXd::Zero(n, dx * m);
  for (Index i = 0; i < n; ++i)
    if (a.used[static_cast<std::size_t>(i)]) Yq.row(i) = vec(*units[static_cast<std::size_t>(i)].Q).transpose();
  const MatrixXd EQ = ge.design() * ge.fit_response(Yq).coeffs;

  f.term1 = MatrixXd::Zero(n, dx);
  for (Index i = 0; i < n; ++i)
    if (a.used[static_cast<std::size_t>(i)]) f.term1.row(i) = a.mu_tilde.row(i);
  f.term1.rowwise() -= f.term1.colwise().mean();

  f.term2 = MatrixXd::Zero(n, dx);
  f.term3 = MatrixXd::Zero(n, dx);
  const Index dv = cv.dim();
  const Index per = cv.per_period > 0 ? cv.per_period : dv;
  const Index nper = dv / per;
  // D[t] holds vec(Q-tilde_i dg/dv_t) per unit, dx * per columns.
  std::vector<MatrixXd> D(static_cast<std::size_t>(nper), MatrixXd::Zero(n, dx * per));
  for (Index i = 0; i < n; ++i) {
    if (ge.sample_lambda()(i) < ge.eig_floor()) continue;
    const auto& u = units[static_cast<std::size_t>(i)];
    const VectorXd v = cv.Vhat.row(i).transpose();
    const auto ldlt = ge.M_at(v).ldlt();
    const MatrixXd EQi = unvec(EQ.row(i).transpose(), dx);
    const MatrixXd corr = EQi * ldlt.solve(u.M);  // E(Q|V) M(V)^{-1} M_i
    f.term2.row(i) = -(corr * (u.ydot - a.g_hat.row(i).transpose())).transpose();
    MatrixXd Qt = -corr;
    if (a.used[static_cast<std::size_t>(i)]) Qt += *u.Q;
    const MatrixXd dg = ge.dg_dv(v);
    for (Index t = 0; t < nper; ++t)
      D[static_cast<std::size_t>(t)].row(i) = vec(Qt * dg.middleCols(t * per, per)).transpose();
  }

  if (cv.provider == ControlProvider::residual && !cv.first_stage.empty()) {
    for (Index t = 0; t < nper; ++t) {
      const SeriesFit& fs = cv.first_stage[static_cast<std::size_t>(t)];
      const MatrixXd xi = p.first_stage_inputs(t);
      const MatrixXd P = fs.basis.design(xi);
      const MatrixXd F = P * series_fit_design(fs.basis, P, D[static_cast<std::size_t>(t)]).coeffs;
      for (Index i = 0; i < n; ++i)
        f.term3.row(i) += (unvec(F.row(i).transpose(), dx) * cv.Vtilde.row(i).segment(t * per, per).transpose()).transpose();
    }
  } else if (cv.provider == ControlProvider::ar1) {
    const MatrixXd& x = p.d1 == 1 ? p.x1 : p.x2;
    const Index k = cv.ar1_hinv.rows();
    auto w = [&](Index i, Index t) {
      VectorXd out(k);
      out(0) = x(i, t);
      if (k > 1) out(1) = 1.0;
      return out;
    };
    MatrixXd G = MatrixXd::Zero(dx, k);  // mean_j sum_t D_jt w_jt'
    for (Index t = 0; t < nper; ++t)
      for (Index j = 0; j < n; ++j) G += unvec(D[static_cast<std::size_t>(t)].row(j).transpose(), dx) * w(j, t).transpose();
    G /= static_cast<double>(n);
    for (Index i = 0; i < n; ++i) {
      VectorXd score = VectorXd::Zero(k);
      for (Index t = 0; t < nper; ++t) score += w(i, t) * cv.Vtilde(i, t);
      f.term3.row(i) = (G * (cv.ar1_hinv * score)).transpose();
    }
  }

  f.s = f.term1 + f.term2 + f.term3;
  f.s.rowwise() -= f.s.colwise().mean();
  VectorXd ucent(n);
  for (Index i = 0; i < n; ++i) ucent(i) = (a.used[static_cast<std::size_t>(i)] ? 1.0 : 0.0) - phi;

  const double nn = static_cast<double>(n);
  f.omega0 = f.s.transpose() * f.s / nn;
  const VectorXd c = f.s.transpose() * ucent / nn;
  const VectorXd& mu = a.mu_hat;
  const double cross = signs == XiSigns::delta_method ? -1.0 : 1.0;
  f.xi = f.omega0 + cross * (c * mu.transpose() + mu * c.transpose()) + (phi - phi * phi) * mu * mu.transpose();
  f.psi = (f.s - ucent * mu.transpose()) / phi;

  a.cov = linalg::nearest_psd(f.xi / (phi * phi * nn));
  a.se = a.cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  a.influence = f.psi;
  return f;
}

} // namespace cfpanel
