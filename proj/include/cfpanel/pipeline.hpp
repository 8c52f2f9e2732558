#pragma once

#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "cfpanel/config.hpp"
#include "cfpanel/controls.hpp"
#include "cfpanel/errors.hpp"
#include "cfpanel/estimator.hpp"
#include "cfpanel/gfunc.hpp"
#include "cfpanel/panel.hpp"
#include "cfpanel/parallel.hpp"
#include "cfpanel/rng.hpp"

namespace cfpanel {

/// Everything one pass of the estimator produces on a single period window.
struct PipelineState {
  std::vector<DifferencedUnit> units;
  ControlVariableSet cv;
  std::optional<GEstimate> ge;
  ApeEstimate ape;
  std::optional<InfluenceParts> parts;
};

/// Controls, g, optional common b, APE and (optionally) plug-in inference on all periods of `p`.
/// `controls` replaces the first stage, e.g. with known control values.
inline PipelineState run_window(const PanelData& p, const EstimationConfig& c, bool plugin,
                                const ControlVariableSet* controls = nullptr) {
  PipelineState st;
  const double delta0 = c.delta0 ? *c.delta0 : default_delta0(p);
  st.units = first_difference(p, delta0);
  st.cv = controls ? *controls : build_controls(p, c);
  st.ge.emplace(fit_g(st.units, st.cv, c.second_stage, c.eig_floor));
  std::optional<CommonBResult> cb;
  if (p.dl > 0) {
    cb = estimate_common_b(p, st.units, st.cv, *st.ge);
    for (std::size_t i = 0; i < st.units.size(); ++i) st.units[i].ydot = cb->ydot_adjusted[i];
    st.ge.emplace(fit_g(st.units, st.cv, c.second_stage, c.eig_floor));
  }
  st.ape = estimate_ape(st.units, st.cv, *st.ge, c.singular_units);
  if (cb) {
    VectorXd offset(p.n);
    for (Index i = 0; i < p.n; ++i) offset(i) = PanelData::unit_block(p.l, p.dl, i, p.T).row(0).dot(cb->b_hat);
    st.ape.alpha_hat = estimate_alpha(p, st.ape, &offset);
    st.ape.b_hat = cb->b_hat;
    st.ape.diagnostics.b_condition = cb->condition;
  } else {
    st.ape.alpha_hat = estimate_alpha(p, st.ape);
  }
  st.ape.diagnostics.delta0 = delta0;
  for (const auto& w : st.cv.warnings) st.ape.diagnostics.warnings.push_back(w);
  if (plugin) st.parts = plug_in_variance(p, st.units, st.cv, *st.ge, st.ape, c.xi_signs);
  return st;
}

/// All size-k subsets of {0, ..., T-1} in lexicographic order.
inline std::vector<std::vector<Index>> period_subsets(Index T, Index k) {
  std::vector<std::vector<Index>> out;
  if (k > T || k < 1) return out;
  std::vector<Index> s(static_cast<std::size_t>(k));
  for (Index j = 0; j < k; ++j) s[static_cast<std::size_t>(j)] = j;
  while (true) {
    out.push_back(s);
    Index j = k - 1;
    while (j >= 0 && s[static_cast<std::size_t>(j)] == T - k + j) --j;
    if (j < 0) break;
    ++s[static_cast<std::size_t>(j)];
    for (Index r = j + 1; r < k; ++r) s[static_cast<std::size_t>(r)] = s[static_cast<std::size_t>(r - 1)] + 1;
  }
  return out;
}

/// Equal-weight average of the estimator over every window of d_x + 2 periods, each with
/// its own controls. Windows that fail numerically are dropped and counted.
inline ApeEstimate subset_average_ape(const PanelData& p, const EstimationConfig& c, bool plugin) {
  const Index k = p.dx() + 2;
  if (p.T < k) throw DataError("need T >= d_x + 2 periods");
  const auto subsets = period_subsets(p.T, k);
  std::vector<std::optional<PipelineState>> runs(subsets.size());
  std::vector<std::string> failures(subsets.size());
  parallel_for(static_cast<Index>(subsets.size()), c.threads, [&](Index s) {
    try {
      runs[static_cast<std::size_t>(s)] = run_window(p.select_periods(subsets[static_cast<std::size_t>(s)]), c, plugin);
    } catch (const NumericalError& e) {
      failures[static_cast<std::size_t>(s)] = e.what();
    }
  });
  ApeEstimate out;
  Index ok = 0;
  const Index dx = p.dx();
  out.mu_hat = VectorXd::Zero(dx);
  out.mu_tilde = MatrixXd::Zero(p.n, dx);
  out.used.assign(static_cast<std::size_t>(p.n), 0);
  MatrixXd psi = MatrixXd::Zero(p.n, dx);
  VectorXd used_count = VectorXd::Zero(p.n);
  out.diagnostics.min_eig = std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s < subsets.size(); ++s) {
    if (!runs[s]) {
      out.diagnostics.warnings.push_back("period window " + std::to_string(s + 1) + " dropped: " + failures[s]);
      continue;
    }
    const ApeEstimate& a = runs[s]->ape;
    ++ok;
    out.mu_hat += a.mu_hat;
    out.alpha_hat += a.alpha_hat;
    out.phi_hat += a.phi_hat;
    if (a.b_hat) out.b_hat = out.b_hat ? VectorXd(*out.b_hat + *a.b_hat) : *a.b_hat;
    if (a.influence) psi += *a.influence;
    out.diagnostics.min_eig = std::min(out.diagnostics.min_eig, a.diagnostics.min_eig);
    out.diagnostics.trim_fraction += a.diagnostics.trim_fraction;
    out.diagnostics.eig_trimmed += a.diagnostics.eig_trimmed;
    out.diagnostics.delta0 += a.diagnostics.delta0;
    for (Index i = 0; i < p.n; ++i)
      if (a.used[static_cast<std::size_t>(i)]) {
        out.mu_tilde.row(i) += a.mu_tilde.row(i);
        used_count(i) += 1.0;
        out.used[static_cast<std::size_t>(i)] = 1;
      }
    for (const auto& w : a.diagnostics.warnings) out.diagnostics.warnings.push_back(w);
  }
  if (ok == 0) throw NumericalError("every period window failed: " + failures.front());
  const double w = 1.0 / static_cast<double>(ok);
  out.mu_hat *= w;
  out.alpha_hat *= w;
  out.phi_hat *= w;
  if (out.b_hat) *out.b_hat *= w;
  out.diagnostics.trim_fraction *= w;
  out.diagnostics.delta0 *= w;
  out.diagnostics.subsets_used = ok;
  out.diagnostics.subsets_dropped = static_cast<Index>(subsets.size()) - ok;
  for (Index i = 0; i < p.n; ++i) {
    if (used_count(i) > 0) out.mu_tilde.row(i) /= used_count(i);
    out.diagnostics.n_used += out.used[static_cast<std::size_t>(i)] ? 1 : 0;
  }
  out.se = VectorXd::Zero(dx);
  out.cov = MatrixXd::Zero(dx, dx);
  if (plugin) {
    psi *= w;
    psi.rowwise() -= psi.colwise().mean();
    const double n = static_cast<double>(p.n);
    out.cov = linalg::nearest_psd(psi.transpose() * psi / (n * n));
    out.se = out.cov.diagonal().cwiseSqrt();
    out.influence = psi;
  }
  return out;
}

/// Point estimate (and plug-in inference when requested) with subset averaging when T > d_x + 2.
inline ApeEstimate estimate_point(const PanelData& p, const EstimationConfig& c, bool plugin) {
  p.validate();
  if (p.T < p.dx() + 2)
    throw DataError("need T >= d_x + 2 periods (T = " + std::to_string(p.T) + ", d_x = " + std::to_string(p.dx()) + ")");
  if (p.T == p.dx() + 2) return run_window(p, c, plugin).ape;
  return subset_average_ape(p, c, plugin);
}

struct BootstrapResult {
  MatrixXd cov;
  VectorXd se;
  MatrixXd draws;  ///< successful replicates only, in replicate order
  Index failures = 0;
  std::vector<std::string> log;
};

/// Unit-level iid bootstrap. Replicate b draws its resample from mix(seed) ^ b, so results
/// do not depend on the number of threads and nearby master seeds give unrelated streams.
inline BootstrapResult bootstrap_variance(const PanelData& p, const std::function<VectorXd(const PanelData&)>& estimator,
                                          int B, unsigned long long seed, int threads = 1) {
  if (B < 2) throw ConfigError("bootstrap needs at least 2 replicates");
  std::vector<std::optional<VectorXd>> slots(static_cast<std::size_t>(B));
  std::vector<std::string> errors(static_cast<std::size_t>(B));
  parallel_for(B, threads, [&](Index b) {
    CounterRng rng(CounterRng::derive(CounterRng::mix(seed), static_cast<std::uint64_t>(b)));
    std::vector<Index> rows(static_cast<std::size_t>(p.n));
    for (auto& r : rows) r = static_cast<Index>(rng.below(static_cast<std::uint64_t>(p.n)));
    try {
      slots[static_cast<std::size_t>(b)] = estimator(p.select_units(rows));
    } catch (const Error& e) {
      errors[static_cast<std::size_t>(b)] = e.what();
    }
  });
  BootstrapResult r;
  std::vector<VectorXd> ok;
  for (int b = 0; b < B; ++b) {
    if (slots[static_cast<std::size_t>(b)]) {
      ok.push_back(*slots[static_cast<std::size_t>(b)]);
    } else {
      ++r.failures;
      r.log.push_back("replicate " + std::to_string(b) + ": " + errors[static_cast<std::size_t>(b)]);
    }
  }
  if (r.failures * 10 > B) {
    std::string msg = "bootstrap: " + std::to_string(r.failures) + " of " + std::to_string(B) + " replicates failed";
    for (const auto& l : r.log) msg += "\n  " + l;
    throw NumericalError(msg);
  }
  const Index d = ok.front().size();
  r.draws.resize(static_cast<Index>(ok.size()), d);
  for (std::size_t k = 0; k < ok.size(); ++k) r.draws.row(static_cast<Index>(k)) = ok[k].transpose();
  r.cov = linalg::row_covariance(r.draws);
  r.se = r.cov.diagonal().cwiseSqrt();
  return r;
}

/// Full estimator with the configured inference.
inline ApeEstimate estimate(const PanelData& p, const EstimationConfig& c) {
  c.validate();
  ApeEstimate a = estimate_point(p, c, c.inference == InferenceMode::plugin);
  if (c.inference == InferenceMode::bootstrap) {
    EstimationConfig inner = c;
    inner.inference = InferenceMode::none;
    inner.threads = 1;
    const auto br = bootstrap_variance(
        p, [&](const PanelData& q) { return estimate_point(q, inner, false).mu_hat; }, c.bootstrap_B, c.seed, c.threads);
    a.cov = br.cov;
    a.se = br.se;
    a.diagnostics.bootstrap_failures = br.failures;
    for (const auto& l : br.log) a.diagnostics.warnings.push_back("bootstrap " + l);
  }
  return a;
}

} // namespace cfpanel
