#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "cfpanel/config.hpp"
#include "cfpanel/errors.hpp"
#include "cfpanel/panel.hpp"
#include "cfpanel/sieve.hpp"

namespace cfpanel {

/// tau(d) = s (exp(-d^2 / (2 s^2) + d / s) - 1). Increasing on d <= 0 with tau(0) = 0,
/// tau'(0) = 1, tau''(0) = 0 and tau(d) > -s.
inline double smooth_tau_offset(double d, double s) {
  const double r = d / s;
  return s * std::expm1(-0.5 * r * r + r);
}

inline double smooth_tau_offset_derivative(double d, double s) {
  const double r = d / s;
  return (1.0 - r) * std::exp(-0.5 * r * r + r);
}

/// Identity on [lo, hi]; outside, a smooth pull back to within s of the box.
inline double smooth_tau(double x, double lo, double hi, double s) {
  if (x < lo) return lo + smooth_tau_offset(x - lo, s);
  if (x > hi) return hi - smooth_tau_offset(hi - x, s);
  return x;
}

struct TrimSettings {
  TrimMode mode = TrimMode::box;
  double sigma_fraction = 0.1;
  std::optional<double> sigma;

  static TrimSettings from(const EstimationConfig& c) { return {c.trim, c.sigma_fraction, c.sigma}; }
};

/// Generated control variables for every unit, laid out period-major:
/// column t * d + j is component j of the control at period t.
struct ControlVariableSet {
  MatrixXd Vhat;
  MatrixXd Vtilde;
  Box box;
  TrimMode mode = TrimMode::box;
  VectorXd sigma;  ///< per-component smoothing width (smooth mode)
  ControlProvider provider = ControlProvider::residual;
  Index per_period = 0;  ///< components per period
  /// Residual provider: one fit of x2_t on xi_t per period.
  std::vector<SeriesFit> first_stage;
  /// AR(1) provider: slope, optional intercept, and inverse of mean sum_t w_t w_t'.
  double rho_hat = 0.0;
  std::optional<double> intercept_hat;
  MatrixXd ar1_hinv;
  std::vector<std::string> warnings;

  Index dim() const noexcept { return Vhat.cols(); }
  Index n() const noexcept { return Vhat.rows(); }

  /// Domain the second-stage basis must cover.
  Box domain() const { return mode == TrimMode::smooth ? box.widened(sigma) : box; }

  VectorXd trim(const VectorXd& v) const {
    VectorXd out(v.size());
    for (Index k = 0; k < v.size(); ++k)
      out(k) = mode == TrimMode::box ? std::clamp(v(k), box.lo(k), box.hi(k))
                                     : smooth_tau(v(k), box.lo(k), box.hi(k), sigma(k));
    return out;
  }

  /// Controls from known values (no first stage), e.g. the true V of a simulation.
  static ControlVariableSet from_values(const MatrixXd& V, const TrimSettings& ts = {}, Index per_period = 0) {
    ControlVariableSet cv;
    cv.provider = ControlProvider::residual;
    cv.per_period = per_period > 0 ? per_period : V.cols();
    cv.finish(V, ts);
    return cv;
  }

  void finish(const MatrixXd& Vt, const TrimSettings& ts) {
    if (Vt.cols() < 1) throw DataError("control variables need at least one component");
    if (!Vt.allFinite()) throw NumericalError("control variables are not finite");
    Vtilde = Vt;
    box = Box::of_rows(Vt);
    mode = ts.mode;
    const VectorXd width = box.hi - box.lo;
    const double scale = 1.0 + std::max(box.hi.cwiseAbs().maxCoeff(), box.lo.cwiseAbs().maxCoeff());
    for (Index k = 0; k < width.size(); ++k)
      if (width(k) <= 1e-10 * scale) {
        warnings.push_back("control box collapses in component " + std::to_string(k) + " (width " +
                           std::to_string(width(k)) + ")");
      }
    sigma = VectorXd::Zero(width.size());
    if (mode == TrimMode::smooth) {
      for (Index k = 0; k < width.size(); ++k)
        sigma(k) = ts.sigma ? *ts.sigma : std::max(ts.sigma_fraction * width(k), 1e-12);
    }
    Vhat.resize(Vt.rows(), Vt.cols());
    for (Index i = 0; i < Vt.rows(); ++i) Vhat.row(i) = trim(Vt.row(i).transpose()).transpose();
  }
};

/// Nonparametric first stage: x2_t = b_t(x1_t, z_t) + v_t, one series fit per period.
inline ControlVariableSet fit_residual_controls(const PanelData& p, const BasisSpec& basisL, const TrimSettings& ts = {}) {
  if (p.d2 < 1) throw DataError("residual controls need at least one endogenous regressor");
  if (p.d1 + p.dz < 1) throw DataError("residual controls need exogenous regressors or instruments");
  ControlVariableSet cv;
  cv.provider = ControlProvider::residual;
  cv.per_period = p.d2;
  MatrixXd Vt(p.n, p.T * p.d2);
  for (Index t = 0; t < p.T; ++t) {
    const MatrixXd xi = p.first_stage_inputs(t);
    const MatrixXd x2t = p.x2.middleCols(t * p.d2, p.d2);
    const SieveBasis basis = make_basis(basisL, xi, Box::of_rows(xi));
    const MatrixXd P = basis.design(xi);
    SeriesFit fit = series_fit_design(basis, P, x2t);
    if (fit.gram_rank == 0) throw NumericalError("degenerate first stage at period " + std::to_string(t + 1));
    Vt.middleCols(t * p.d2, p.d2) = x2t - P * fit.coeffs;
    cv.first_stage.push_back(std::move(fit));
  }
  cv.finish(Vt, ts);
  return cv;
}

/// Sequential-exogeneity controls: x_{t+1} = rho x_t + eta_{t+1}, V = (eta_2, ..., eta_T).
inline ControlVariableSet fit_ar1_feedback_controls(const PanelData& p, bool intercept = false,
                                                    const TrimSettings& ts = {}) {
  if (p.dx() != 1) throw DataError("AR(1) controls need a single regressor");
  if (p.T < 2) throw DataError("AR(1) controls need at least two periods");
  const MatrixXd x = p.d1 == 1 ? p.x1 : p.x2;
  const Index m = intercept ? 2 : 1;
  MatrixXd H = MatrixXd::Zero(m, m);
  VectorXd c = VectorXd::Zero(m);
  for (Index i = 0; i < p.n; ++i)
    for (Index t = 0; t + 1 < p.T; ++t) {
      VectorXd w(m);
      w(0) = x(i, t);
      if (intercept) w(1) = 1.0;
      H += w * w.transpose();
      c += w * x(i, t + 1);
    }
  H /= static_cast<double>(p.n);
  c /= static_cast<double>(p.n);
  if (linalg::numerical_rank(Eigen::JacobiSVD<MatrixXd>(H).singularValues()) < m)
    throw NumericalError("AR(1) regression is singular");
  const VectorXd theta = H.ldlt().solve(c);
  ControlVariableSet cv;
  cv.provider = ControlProvider::ar1;
  cv.per_period = 1;
  cv.rho_hat = theta(0);
  if (intercept) cv.intercept_hat = theta(1);
  if (std::abs(cv.rho_hat - 1.0) < 1e-6) throw NumericalError("rho ~ 1 violates identification (unit root)");
  cv.ar1_hinv = H.inverse();
  MatrixXd Vt(p.n, p.T - 1);
  for (Index i = 0; i < p.n; ++i)
    for (Index t = 0; t + 1 < p.T; ++t)
      Vt(i, t) = x(i, t + 1) - cv.rho_hat * x(i, t) - (intercept ? theta(1) : 0.0);
  cv.finish(Vt, ts);
  return cv;
}

inline ControlVariableSet build_controls(const PanelData& p, const EstimationConfig& c) {
  const TrimSettings ts = TrimSettings::from(c);
  return c.provider == ControlProvider::ar1 ? fit_ar1_feedback_controls(p, c.ar1_intercept, ts)
                                            : fit_residual_controls(p, c.first_stage, ts);
}

} // namespace cfpanel
