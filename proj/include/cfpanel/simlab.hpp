#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "cfpanel/config.hpp"
#include "cfpanel/controls.hpp"
#include "cfpanel/errors.hpp"
#include "cfpanel/estimator.hpp"
#include "cfpanel/panel.hpp"
#include "cfpanel/parallel.hpp"
#include "cfpanel/pipeline.hpp"
#include "cfpanel/rng.hpp"

namespace cfpanel {

enum class DgpName { crc_baseline, exogenous_null, discrete_v_oracle, ar1_feedback, mixed_common_b };

inline std::string to_string(DgpName d) {
  switch (d) {
    case DgpName::crc_baseline: return "crc-baseline";
    case DgpName::exogenous_null: return "exogenous-null";
    case DgpName::discrete_v_oracle: return "discrete-V-oracle";
    case DgpName::ar1_feedback: return "ar1-feedback";
    case DgpName::mixed_common_b: return "mixed-common-b";
  }
  return "unknown";
}

inline DgpName parse_dgp_name(const std::string& s) {
  for (DgpName d : {DgpName::crc_baseline, DgpName::exogenous_null, DgpName::discrete_v_oracle, DgpName::ar1_feedback,
                    DgpName::mixed_common_b})
    if (to_string(d) == s) return d;
  throw ConfigError("unknown simulation spec '" + s + "'");
}

struct DgpSpec {
  DgpName name = DgpName::crc_baseline;
  Index n = 2000;
  Index T = 4;
  unsigned long long seed = 1;
  /// mu = A nu with nu ~ U[0,1]^2 (crc-baseline, mixed-common-b).
  Eigen::Matrix2d A = (Eigen::Matrix2d() << 2.0, 1.0, 1.0, 3.0).finished();
  /// Standard deviation of the idiosyncratic normal error.
  double u_sd = 0.5;
  /// AR(1) slope and the loading of eps_t on eta_{t+1} (ar1-feedback).
  double rho = 0.6;
  double feedback = 0.5;
  /// Homogeneous coefficients on L (mixed-common-b).
  VectorXd b0 = (VectorXd(2) << 1.0, -0.5).finished();

  /// Spec with the conventional period count for the named design.
  static DgpSpec make(DgpName name, Index n, unsigned long long seed) {
    DgpSpec s;
    s.name = name;
    s.n = n;
    s.seed = seed;
    s.T = (name == DgpName::crc_baseline || name == DgpName::mixed_common_b) ? 4 : 3;
    return s;
  }

  /// Population mean of the random coefficients.
  VectorXd mu_mean() const {
    switch (name) {
      case DgpName::crc_baseline:
      case DgpName::mixed_common_b: return A * VectorXd::Constant(2, 0.5);
      default: return VectorXd::Constant(1, 1.0);
    }
  }

  Index dv() const {
    return name == DgpName::ar1_feedback ? T - 1 : T;
  }
};

/// Unobservables behind a simulated panel: y = x'mu + alpha + f + u (+ L'b).
struct Truth {
  MatrixXd mu;      ///< n x dx
  VectorXd alpha;   ///< n
  MatrixXd V;       ///< n x dim(V), true control variables
  MatrixXd f;       ///< n x T, E(eps_t | X, V)
  MatrixXd u;       ///< n x T, remaining error
  std::optional<VectorXd> b;
};

struct SimDraw {
  PanelData panel;
  Truth truth;
};

/// True g(V) = (f_{t+1}(V) - f_t(V))_t for the named design.
inline VectorXd true_g(const DgpSpec& s, const VectorXd& V) {
  VectorXd f(s.T);
  switch (s.name) {
    case DgpName::crc_baseline:
    case DgpName::mixed_common_b:
      for (Index t = 0; t < s.T; ++t) f(t) = std::sin(3.0 * V(t));
      break;
    case DgpName::exogenous_null: f.setZero(); break;
    case DgpName::discrete_v_oracle:
      for (Index t = 0; t < s.T; ++t) f(t) = 0.5 * static_cast<double>(t * (t + 1) / 2) * V(t);
      break;
    case DgpName::ar1_feedback:
      for (Index t = 0; t + 1 < s.T; ++t) f(t) = s.feedback * V(t);
      f(s.T - 1) = 0.0;
      break;
  }
  return f.tail(s.T - 1) - f.head(s.T - 1);
}

namespace sim_detail {

inline PanelData empty_panel(Index n, Index T, Index d1, Index d2, Index dz) {
  PanelData p;
  p.n = n;
  p.T = T;
  p.d1 = d1;
  p.d2 = d2;
  p.dz = dz;
  p.y = MatrixXd::Zero(n, T);
  p.x1 = MatrixXd::Zero(n, T * d1);
  p.x2 = MatrixXd::Zero(n, T * d2);
  p.z = MatrixXd::Zero(n, T * dz);
  p.l = MatrixXd::Zero(n, 0);
  p.zl = MatrixXd::Zero(n, 0);
  for (Index i = 0; i < n; ++i) p.unit_ids.push_back(std::to_string(i + 1));
  for (Index t = 0; t < T; ++t) p.periods.push_back(t + 1);
  return p;
}

} // namespace sim_detail

/// Draw a panel and its truth record. The draw is a pure function of the spec.
inline SimDraw generate(const DgpSpec& s) {
  if (s.n < 1) throw ConfigError("simulation needs n >= 1");
  CounterRng rng(s.seed);
  SimDraw out;
  PanelData& p = out.panel;
  Truth& tr = out.truth;
  const Index n = s.n, T = s.T;
  const double sqrt3 = std::sqrt(3.0);
  tr.alpha = VectorXd::Zero(n);
  tr.f = MatrixXd::Zero(n, T);
  tr.u = MatrixXd::Zero(n, T);

  switch (s.name) {
    case DgpName::crc_baseline:
    case DgpName::mixed_common_b: {
      if (T < 2) throw ConfigError("crc-baseline needs T >= 2");
      p = sim_detail::empty_panel(n, T, 1, 1, 1);
      tr.mu.resize(n, 2);
      tr.V.resize(n, T);
      for (Index i = 0; i < n; ++i) {
        Eigen::Vector2d nu(rng.uniform(), rng.uniform());
        const Eigen::Vector2d mu = s.A * nu;
        tr.mu.row(i) = mu.transpose();
        for (Index t = 0; t < T; ++t) {
          const double x1 = 5.0 * std::pow(mu(0), 0.25) * rng.uniform();
          const double z = 5.0 * std::pow(mu(1), 0.25) * rng.uniform();
          const double v = rng.uniform(-0.5, 0.5);
          const double x2 = std::sqrt(x1 + z) + v;
          p.x1(i, t) = x1;
          p.z(i, t) = z;
          p.x2(i, t) = x2;
          tr.V(i, t) = v;
          tr.f(i, t) = std::sin(3.0 * v);
          tr.u(i, t) = rng.normal(0.0, s.u_sd);
          p.y(i, t) = x1 * mu(0) + x2 * mu(1) + tr.f(i, t) + tr.u(i, t);
        }
      }
      if (s.name == DgpName::mixed_common_b) {
        const Index dl = s.b0.size();
        p.dl = dl;
        p.dzl = dl;
        p.l.resize(n, T * dl);
        for (Index i = 0; i < n; ++i)
          for (Index k = 0; k < T * dl; ++k) p.l(i, k) = rng.normal();
        p.zl = p.l;
        tr.b = s.b0;
        for (Index i = 0; i < n; ++i)
          for (Index t = 0; t < T; ++t) p.y(i, t) += p.l.row(i).segment(t * dl, dl).dot(s.b0);
      }
      break;
    }
    case DgpName::exogenous_null: {
      p = sim_detail::empty_panel(n, T, 0, 1, 1);
      tr.mu.resize(n, 1);
      tr.V.resize(n, T);
      for (Index i = 0; i < n; ++i) {
        double zbar = 0.0;
        for (Index t = 0; t < T; ++t) {
          p.z(i, t) = rng.normal();
          tr.V(i, t) = rng.normal();
          p.x2(i, t) = p.z(i, t) + tr.V(i, t);
          zbar += p.z(i, t) / static_cast<double>(T);
        }
        tr.mu(i, 0) = 1.0 + 0.5 * zbar + 0.25 * rng.normal();
        tr.alpha(i) = rng.normal();
        for (Index t = 0; t < T; ++t) {
          tr.u(i, t) = rng.normal(0.0, s.u_sd);
          p.y(i, t) = p.x2(i, t) * tr.mu(i, 0) + tr.alpha(i) + tr.u(i, t);
        }
      }
      break;
    }
    case DgpName::discrete_v_oracle: {
      p = sim_detail::empty_panel(n, T, 0, 1, 1);
      tr.mu.resize(n, 1);
      tr.V.resize(n, T);
      for (Index i = 0; i < n; ++i) {
        const double sgroup = static_cast<double>(rng.below(3)) - 1.0;
        tr.mu(i, 0) = 1.0 + 0.5 * sgroup + 0.3 * rng.normal();
        tr.alpha(i) = sgroup;
        for (Index t = 0; t < T; ++t) {
          tr.V(i, t) = sgroup;
          p.z(i, t) = rng.normal();
          p.x2(i, t) = p.z(i, t) * (1.0 + 0.5 * sgroup) + sgroup;
          tr.f(i, t) = 0.5 * static_cast<double>(t * (t + 1) / 2) * sgroup;
          tr.u(i, t) = rng.normal(0.0, s.u_sd);
          p.y(i, t) = p.x2(i, t) * tr.mu(i, 0) + tr.alpha(i) + tr.f(i, t) + tr.u(i, t);
        }
      }
      break;
    }
    case DgpName::ar1_feedback: {
      if (T < 3) throw ConfigError("ar1-feedback needs T >= 3");
      p = sim_detail::empty_panel(n, T, 1, 0, 0);
      tr.mu.resize(n, 1);
      tr.V.resize(n, T - 1);
      const double e_load = std::sqrt(1.0 - s.feedback * s.feedback);
      for (Index i = 0; i < n; ++i) {
        const double mu = rng.uniform(0.0, 2.0);
        tr.mu(i, 0) = mu;
        p.x1(i, 0) = mu + 2.0 * rng.uniform(-sqrt3, sqrt3);
        for (Index t = 1; t < T; ++t) {
          const double eta = rng.uniform(-sqrt3, sqrt3);
          tr.V(i, t - 1) = eta;
          p.x1(i, t) = s.rho * p.x1(i, t - 1) + eta;
        }
        for (Index t = 0; t < T; ++t) {
          const double e = rng.uniform(-sqrt3, sqrt3);
          if (t + 1 < T) {
            tr.f(i, t) = s.feedback * tr.V(i, t);
            tr.u(i, t) = e_load * e;
          } else {
            tr.u(i, t) = e;
          }
          p.y(i, t) = p.x1(i, t) * mu + tr.f(i, t) + tr.u(i, t);
        }
      }
      break;
    }
  }
  return out;
}

/// Pooled 2SLS on first differences: instruments (dx1, dz) for regressors (dx1, dx2).
inline VectorXd fdiv_estimator(const PanelData& p) {
  if (p.dz < p.d2) throw DataError("FD-IV needs at least as many instruments as endogenous regressors");
  if (p.T < 2) throw DataError("FD-IV needs at least two periods");
  const Index dx = p.dx();
  const Index dw = p.d1 + (p.d2 > 0 ? p.dz : 0);
  MatrixXd WW = MatrixXd::Zero(dw, dw), WX = MatrixXd::Zero(dw, dx);
  VectorXd Wy = VectorXd::Zero(dw);
  for (Index i = 0; i < p.n; ++i) {
    const MatrixXd X = difference_rows(p.regressors(i));
    const VectorXd y = difference_rows(p.y.row(i).transpose());
    MatrixXd W(p.T - 1, dw);
    if (p.d1 > 0) W.leftCols(p.d1) = differenced_block(p.x1, p.d1, i, p.T);
    if (p.d2 > 0) W.rightCols(p.dz) = differenced_block(p.z, p.dz, i, p.T);
    WW += W.transpose() * W;
    WX += W.transpose() * X;
    Wy += W.transpose() * y;
  }
  const MatrixXd WWinv = linalg::SymmetricPinv(WW).matrix();
  const MatrixXd H = WX.transpose() * WWinv * WX;
  if (!(linalg::condition_number(H) < 1e12)) throw NumericalError("FD-IV moment matrix is singular");
  return H.ldlt().solve(WX.transpose() * WWinv * Wy);
}

/// Trimmed mean of Q_i ydot_i, i.e. the second step with g set to zero.
inline VectorXd naive_crc_estimator(std::span<const DifferencedUnit> units) {
  if (units.empty()) throw DataError("no units");
  VectorXd sum = VectorXd::Zero(units.front().Xdot.cols());
  Index used = 0;
  for (const auto& u : units) {
    if (!u.delta) continue;
    sum += *u.Q * u.ydot;
    ++used;
  }
  if (used == 0) throw NumericalError("all units trimmed");
  return sum / static_cast<double>(used);
}

struct McOptions {
  Index R = 200;
  std::vector<std::string> estimators{"ape", "fdiv", "crc"};
  EstimationConfig config;
  int threads = 1;
  /// Points v1 of the slice V = (v1, 0, ..., 0) where g-hat_1 is recorded.
  VectorXd grid = VectorXd::LinSpaced(50, -0.5, 0.5);
};

struct McResult {
  DgpSpec spec;
  McOptions options;
  /// draws[e] is R x dx; rows of failed replicates are NaN.
  std::vector<MatrixXd> draws;
  /// Plug-in standard errors for the estimators that produce them (NaN otherwise).
  std::vector<MatrixXd> se;
  /// R x grid, first component of g-hat along the slice (ape only).
  MatrixXd g_grid;
  std::vector<std::string> failures;
  Index failed_replicates = 0;
};

struct EstimatorSummary {
  std::string name;
  Index ok = 0;
  VectorXd mean, sd, q05, q95;
  std::optional<VectorXd> coverage;  ///< share of 95% intervals covering the truth
  std::optional<double> mean_se_ratio;
};

inline bool is_known_estimator(const std::string& e) {
  return e == "ape" || e == "fdiv" || e == "crc" || e == "ape_true_v";
}

/// Repeated draws and estimation. Replicate r uses seed spec.seed ^ r.
inline McResult run_replications(const DgpSpec& spec, const McOptions& opt) {
  if (opt.R < 1) throw ConfigError("need at least one replication");
  if (opt.estimators.empty()) throw ConfigError("no estimators requested");
  for (const auto& e : opt.estimators)
    if (!is_known_estimator(e)) throw ConfigError("unknown estimator '" + e + "'");
  McResult mc;
  mc.spec = spec;
  mc.options = opt;
  const Index dx = spec.mu_mean().size();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const std::size_t ne = opt.estimators.size();
  mc.draws.assign(ne, MatrixXd::Constant(opt.R, dx, nan));
  mc.se.assign(ne, MatrixXd::Constant(opt.R, dx, nan));
  const bool band = spec.name == DgpName::crc_baseline || spec.name == DgpName::mixed_common_b;
  mc.g_grid = MatrixXd::Constant(opt.R, band ? opt.grid.size() : 0, nan);
  std::vector<std::vector<std::string>> logs(static_cast<std::size_t>(opt.R));
  std::vector<char> failed(static_cast<std::size_t>(opt.R), 0);
  EstimationConfig inner = opt.config;
  inner.threads = 1;
  const bool plugin = inner.inference == InferenceMode::plugin;

  parallel_for(opt.R, opt.threads, [&](Index r) {
    DgpSpec rs = spec;
    rs.seed = CounterRng::derive(spec.seed, static_cast<std::uint64_t>(r));
    const SimDraw draw = generate(rs);
    const PanelData& p = draw.panel;
    auto& log = logs[static_cast<std::size_t>(r)];
    for (std::size_t e = 0; e < ne; ++e) {
      const std::string& name = opt.estimators[e];
      try {
        if (name == "ape" || name == "ape_true_v") {
          EstimationConfig c = inner;
          if (name == "ape_true_v") c.provider = ControlProvider::residual;
          ApeEstimate a;
          if (p.T == p.dx() + 2) {
            std::optional<ControlVariableSet> truth_cv;
            if (name == "ape_true_v") truth_cv = ControlVariableSet::from_values(draw.truth.V, TrimSettings::from(c));
            PipelineState st = run_window(p, c, plugin, truth_cv ? &*truth_cv : nullptr);
            a = st.ape;
            if (name == "ape" && band) {
              for (Index k = 0; k < opt.grid.size(); ++k) {
                VectorXd v = VectorXd::Zero(st.cv.dim());
                v(0) = opt.grid(k);
                try {
                  mc.g_grid(r, k) = st.ge->g(st.cv.trim(v))(0);
                } catch (const SingularMError&) {
                }
              }
            }
          } else {
            if (name == "ape_true_v") throw ConfigError("true-V estimator needs T = d_x + 2");
            a = estimate_point(p, c, plugin);
          }
          mc.draws[e].row(r) = a.mu_hat.transpose();
          if (plugin) mc.se[e].row(r) = a.se.transpose();
        } else if (name == "fdiv") {
          mc.draws[e].row(r) = fdiv_estimator(p).transpose();
        } else if (name == "crc") {
          const double d0 = inner.delta0 ? *inner.delta0 : default_delta0(p);
          mc.draws[e].row(r) = naive_crc_estimator(first_difference(p, d0)).transpose();
        }
      } catch (const Error& ex) {
        log.push_back("replicate " + std::to_string(r) + " " + name + ": " + ex.what());
        if (name == "ape") failed[static_cast<std::size_t>(r)] = 1;
      }
    }
  });
  for (Index r = 0; r < opt.R; ++r) {
    for (auto& l : logs[static_cast<std::size_t>(r)]) mc.failures.push_back(l);
    mc.failed_replicates += failed[static_cast<std::size_t>(r)];
  }
  if (mc.failed_replicates * 5 > opt.R) {
    std::string msg = "too many failed replicates (" + std::to_string(mc.failed_replicates) + " of " +
                      std::to_string(opt.R) + ")";
    for (const auto& l : mc.failures) msg += "\n  " + l;
    throw NumericalError(msg);
  }
  return mc;
}

inline std::vector<double> finite_values(const auto& col) {
  std::vector<double> v;
  for (Index k = 0; k < col.size(); ++k)
    if (std::isfinite(col(k))) v.push_back(col(k));
  return v;
}

inline std::vector<EstimatorSummary> summarize(const McResult& mc) {
  std::vector<EstimatorSummary> out;
  const VectorXd truth = mc.spec.mu_mean();
  for (std::size_t e = 0; e < mc.draws.size(); ++e) {
    EstimatorSummary s;
    s.name = mc.options.estimators[e];
    const MatrixXd& D = mc.draws[e];
    const Index dx = D.cols();
    s.mean = s.sd = s.q05 = s.q95 = VectorXd::Constant(dx, std::numeric_limits<double>::quiet_NaN());
    bool any_se = false;
    VectorXd cover = VectorXd::Zero(dx);
    Index n_se = 0;
    double ratio_sum = 0.0;
    for (Index j = 0; j < dx; ++j) {
      const auto v = finite_values(D.col(j));
      s.ok = static_cast<Index>(v.size());
      if (v.empty()) continue;
      const Eigen::Map<const VectorXd> m(v.data(), static_cast<Index>(v.size()));
      s.mean(j) = m.mean();
      s.sd(j) = v.size() > 1 ? std::sqrt((m.array() - m.mean()).square().sum() / static_cast<double>(v.size() - 1)) : 0.0;
      s.q05(j) = linalg::quantile(v, 0.05);
      s.q95(j) = linalg::quantile(v, 0.95);
    }
    for (Index r = 0; r < D.rows(); ++r) {
      if (!mc.se[e].row(r).allFinite() || !D.row(r).allFinite()) continue;
      any_se = true;
      ++n_se;
      for (Index j = 0; j < dx; ++j)
        if (std::abs(D(r, j) - truth(j)) <= 1.959963984540054 * mc.se[e](r, j)) cover(j) += 1.0;
    }
    if (any_se) {
      s.coverage = cover / static_cast<double>(n_se);
      for (Index j = 0; j < dx; ++j) {
        const auto se = finite_values(mc.se[e].col(j));
        const Eigen::Map<const VectorXd> m(se.data(), static_cast<Index>(se.size()));
        ratio_sum += m.mean() / s.sd(j);
      }
      s.mean_se_ratio = ratio_sum / static_cast<double>(dx);
    }
    out.push_back(s);
  }
  return out;
}

struct GBandRow {
  double v1, true_g, mean_g, q05, q95;
  Index ok;
};

/// Pointwise mean and 5%/95% quantiles of g-hat_1 along V = (v1, 0, ..., 0), with the truth.
inline std::vector<GBandRow> g_band_table(const McResult& mc) {
  std::vector<GBandRow> rows;
  for (Index k = 0; k < mc.g_grid.cols(); ++k) {
    const auto v = finite_values(mc.g_grid.col(k));
    VectorXd V = VectorXd::Zero(mc.spec.dv());
    V(0) = mc.options.grid(k);
    GBandRow row{mc.options.grid(k), true_g(mc.spec, V)(0), std::numeric_limits<double>::quiet_NaN(),
                 std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN(),
                 static_cast<Index>(v.size())};
    if (!v.empty()) {
      double sum = 0.0;
      for (double x : v) sum += x;
      row.mean_g = sum / static_cast<double>(v.size());
      row.q05 = linalg::quantile(v, 0.05);
      row.q95 = linalg::quantile(v, 0.95);
    }
    rows.push_back(row);
  }
  return rows;
}

} // namespace cfpanel
