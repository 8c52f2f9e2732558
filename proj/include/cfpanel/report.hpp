#pragma once

#include <charconv>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfpanel/config.hpp"
#include "cfpanel/errors.hpp"
#include "cfpanel/estimator.hpp"
#include "cfpanel/gfunc.hpp"
#include "cfpanel/panel.hpp"
#include "cfpanel/rng.hpp"
#include "cfpanel/simlab.hpp"

namespace cfpanel::report {

using json = nlohmann::ordered_json;

inline constexpr const char* version = "0.1.0";

/// Shortest round-trip decimal; "NA" for non-finite values.
inline std::string num(double v) {
  if (!std::isfinite(v)) return "NA";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline json num_json(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json vec_json(const VectorXd& v) {
  json a = json::array();
  for (Index k = 0; k < v.size(); ++k) a.push_back(num_json(v(k)));
  return a;
}

inline json mat_json(const MatrixXd& m) {
  json a = json::array();
  for (Index r = 0; r < m.rows(); ++r) a.push_back(vec_json(m.row(r).transpose()));
  return a;
}

inline std::string basis_token(const BasisSpec& b) {
  std::string s = b.kind == BasisKind::power ? "power:" + std::to_string(b.degree)
                                             : "bspline:" + std::to_string(b.degree) + ":" +
                                                   (b.quantile_knots ? "auto" : "") + std::to_string(b.knots);
  for (const auto& t : b.extra_terms) {
    s += "+";
    for (std::size_t k = 0; k < t.size(); ++k) s += (k ? ":" : "") + std::to_string(t[k]);
  }
  return s;
}

inline json config_json(const EstimationConfig& c) {
  auto basis = [](const BasisSpec& b) {
    return json{{"basis", basis_token(b)}, {"grow", b.grow_with_n ? "sqrt_n" : "none"}};
  };
  json j;
  j["delta0"] = c.delta0 ? json(*c.delta0) : json("auto");
  j["first_stage"] = basis(c.first_stage);
  j["second_stage"] = basis(c.second_stage);
  j["controls.provider"] = c.provider == ControlProvider::ar1 ? "ar1" : "residual";
  j["controls.ar1_intercept"] = c.ar1_intercept;
  j["controls.trim"] = c.trim == TrimMode::box ? "box" : "smooth";
  j["controls.sigma"] = c.sigma ? json(*c.sigma) : json(nullptr);
  j["controls.sigma_fraction"] = c.sigma_fraction;
  j["gfunc.eig_floor"] = c.eig_floor;
  j["gfunc.singular_units"] = c.singular_units == SingularPolicy::trim ? "trim" : "error";
  j["inference"] = c.inference == InferenceMode::plugin ? "plugin"
                   : c.inference == InferenceMode::bootstrap ? "bootstrap" : "none";
  j["inference.xi_signs"] = c.xi_signs == XiSigns::delta_method ? "delta_method" : "as_printed";
  j["bootstrap.B"] = c.bootstrap_B;
  j["seed"] = c.seed;
  j["prng"] = CounterRng::name;
  return j;
}

inline json ape_json(const ApeEstimate& a) {
  json j;
  j["mu_hat"] = vec_json(a.mu_hat);
  j["alpha_hat"] = num_json(a.alpha_hat);
  j["phi_hat"] = num_json(a.phi_hat);
  j["se"] = vec_json(a.se);
  j["cov"] = mat_json(a.cov);
  if (a.b_hat) j["b_hat"] = vec_json(*a.b_hat);
  const Diagnostics& d = a.diagnostics;
  json dj;
  dj["min_eig"] = num_json(d.min_eig);
  dj["trim_fraction"] = d.trim_fraction;
  dj["eig_trimmed"] = d.eig_trimmed;
  dj["n_used"] = d.n_used;
  dj["delta0"] = num_json(d.delta0);
  if (d.b_condition) dj["b_condition"] = *d.b_condition;
  dj["subsets_used"] = d.subsets_used;
  dj["subsets_dropped"] = d.subsets_dropped;
  dj["bootstrap_failures"] = d.bootstrap_failures;
  j["diagnostics"] = dj;
  return j;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  return out;
}

/// unit,used,mu_tilde_1..mu_tilde_dx
inline void write_unit_csv(const std::string& path, const PanelData& p, const ApeEstimate& a) {
  auto out = open_out(path);
  out << "unit,used";
  for (Index j = 1; j <= a.mu_tilde.cols(); ++j) out << ",mu_tilde_" << j;
  out << '\n';
  for (Index i = 0; i < a.mu_tilde.rows(); ++i) {
    const bool used = a.used[static_cast<std::size_t>(i)];
    out << (p.unit_ids.empty() ? std::to_string(i + 1) : p.unit_ids[static_cast<std::size_t>(i)]) << ',' << (used ? 1 : 0);
    for (Index j = 0; j < a.mu_tilde.cols(); ++j) out << ',' << (used ? num(a.mu_tilde(i, j)) : "NA");
    out << '\n';
  }
}

/// replicate,estimator,component,value,se
inline void write_mc_draws(const std::string& path, const McResult& mc) {
  auto out = open_out(path);
  out << "replicate,estimator,component,value,se\n";
  for (Index r = 0; r < mc.options.R; ++r)
    for (std::size_t e = 0; e < mc.draws.size(); ++e)
      for (Index j = 0; j < mc.draws[e].cols(); ++j)
        out << r << ',' << mc.options.estimators[e] << ',' << (j + 1) << ',' << num(mc.draws[e](r, j)) << ','
            << num(mc.se[e](r, j)) << '\n';
}

/// v1,true_g,mean_g,q05,q95,n_ok
inline void write_g_band(const std::string& path, const std::vector<GBandRow>& rows) {
  auto out = open_out(path);
  out << "v1,true_g,mean_g,q05,q95,n_ok\n";
  for (const auto& r : rows)
    out << num(r.v1) << ',' << num(r.true_g) << ',' << num(r.mean_g) << ',' << num(r.q05) << ',' << num(r.q95) << ','
        << r.ok << '\n';
}

inline json mc_summary_json(const McResult& mc) {
  json j;
  j["spec"] = to_string(mc.spec.name);
  j["n"] = mc.spec.n;
  j["T"] = mc.spec.T;
  j["R"] = mc.options.R;
  j["seed"] = mc.spec.seed;
  j["replicate_seed_rule"] = "seed xor replicate";
  j["prng"] = CounterRng::name;
  j["u_law"] = "normal(0, " + num(mc.spec.u_sd * mc.spec.u_sd) + ")";
  j["truth_mu_mean"] = vec_json(mc.spec.mu_mean());
  j["config"] = config_json(mc.options.config);
  json est = json::object();
  for (const auto& s : summarize(mc)) {
    json e;
    e["ok"] = s.ok;
    e["mean"] = vec_json(s.mean);
    e["sd"] = vec_json(s.sd);
    e["q05"] = vec_json(s.q05);
    e["q95"] = vec_json(s.q95);
    e["bias"] = vec_json(s.mean - mc.spec.mu_mean());
    if (s.coverage) e["coverage95"] = vec_json(*s.coverage);
    if (s.mean_se_ratio) e["mean_se_over_sd"] = num_json(*s.mean_se_ratio);
    est[s.name] = e;
  }
  j["estimators"] = est;
  const auto band = g_band_table(mc);
  if (!band.empty()) {
    Index inside = 0;
    for (const auto& r : band) inside += (r.true_g >= r.q05 && r.true_g <= r.q95) ? 1 : 0;
    j["g_band"] = json{{"points", band.size()}, {"truth_inside_q05_q95", inside}};
  }
  j["failed_replicates"] = mc.failed_replicates;
  j["failures"] = mc.failures;
  return j;
}

inline void write_json(const std::string& path, const json& j) {
  auto out = open_out(path);
  out << j.dump(2) << '\n';
}

} // namespace cfpanel::report
