// Command-line front end: estimate, simulate, cv, check-identification.

#include <chrono>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cfpanel/cfpanel.hpp"
#include "cfpanel/report.hpp"

namespace fs = std::filesystem;
using namespace cfpanel;
using report::json;

namespace {

enum Exit { ok = 0, failure = 1, config_error = 2, data_error = 3, numerical_error = 4 };

struct Common {
  std::string data;
  std::string config;
  std::string out_dir = ".";
  std::optional<unsigned long long> seed;
  std::optional<int> threads;
  std::string inference;
  std::optional<int> B;
  bool timings = false;
};

EstimationConfig resolve_config(const Common& o) {
  EstimationConfig c = o.config.empty() ? EstimationConfig{} : load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.threads) c.threads = *o.threads;
  if (o.B) c.bootstrap_B = *o.B;
  if (!o.inference.empty()) {
    if (o.inference == "plugin") c.inference = InferenceMode::plugin;
    else if (o.inference == "bootstrap") c.inference = InferenceMode::bootstrap;
    else if (o.inference == "none") c.inference = InferenceMode::none;
    else throw ConfigError("--inference must be plugin, bootstrap or none");
  }
  c.validate();
  return c;
}

std::string out_path(const Common& o, const std::string& name) {
  fs::create_directories(o.out_dir);
  return (fs::path(o.out_dir) / name).string();
}

json base_report(const std::string& command, const EstimationConfig& c) {
  json r;
  r["command"] = command;
  r["version"] = report::version;
  r["config"] = report::config_json(c);
  return r;
}

void finish_report(json& r, const std::vector<std::string>& warnings) {
  r["warnings"] = warnings;
  r["warning_count"] = warnings.size();
}

class Timer {
public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

int cmd_estimate(const Common& o, bool unit_csv) {
  Timer timer;
  const EstimationConfig c = resolve_config(o);
  const PanelData p = load_panel(o.data);
  const ApeEstimate a = estimate(p, c);
  json r = base_report("estimate", c);
  r["data"] = json{{"path", o.data}, {"n", p.n}, {"T", p.T}, {"d1", p.d1}, {"d2", p.d2}, {"dz", p.dz}, {"dl", p.dl}};
  r["results"] = report::ape_json(a);
  if (o.timings) r["timings"] = json{{"total_seconds", timer.seconds()}};
  finish_report(r, a.diagnostics.warnings);
  report::write_json(out_path(o, "report.json"), r);
  if (unit_csv) report::write_unit_csv(out_path(o, "units.csv"), p, a);
  std::cout << r.dump(2) << '\n';
  return ok;
}

int cmd_simulate(const Common& o, const std::string& spec, Index n, Index R, std::optional<Index> T,
                 const std::string& estimators) {
  Timer timer;
  EstimationConfig c = resolve_config(o);
  DgpSpec s = DgpSpec::make(parse_dgp_name(spec), n, o.seed ? *o.seed : c.seed);
  // Without a config file the feedback design gets the controls it needs.
  if (o.config.empty() && s.name == DgpName::ar1_feedback) {
    c.provider = ControlProvider::ar1;
    c.second_stage.grow_with_n = true;
  }
  if (T) s.T = *T;
  McOptions opt;
  opt.R = R;
  opt.config = c;
  opt.threads = c.threads;
  opt.estimators.clear();
  std::stringstream ss(estimators);
  for (std::string e; std::getline(ss, e, ',');)
    if (!e.empty()) opt.estimators.push_back(e);
  const McResult mc = run_replications(s, opt);
  report::write_mc_draws(out_path(o, "mc_draws.csv"), mc);
  report::write_g_band(out_path(o, "g_band.csv"), g_band_table(mc));
  json summary = report::mc_summary_json(mc);
  if (o.timings) summary["timings"] = json{{"total_seconds", timer.seconds()}};
  report::write_json(out_path(o, "summary.json"), summary);
  std::cout << summary["estimators"].dump(2) << '\n';
  return ok;
}

int cmd_cv(const Common& o) {
  const EstimationConfig c = resolve_config(o);
  if (c.cv_candidates.empty()) throw ConfigError("cv.candidates is empty");
  const PanelData p = load_panel(o.data);
  const double delta0 = c.delta0 ? *c.delta0 : default_delta0(p);
  const auto units = first_difference(p, delta0);
  const ControlVariableSet cv = build_controls(p, c);
  const Index m = units.front().ydot.size();
  MatrixXd target(p.n, m * m);
  for (Index i = 0; i < p.n; ++i) target.row(i) = vec(units[static_cast<std::size_t>(i)].M).transpose();
  std::vector<SieveBasis> bases;
  for (const auto& spec : c.cv_candidates) bases.push_back(make_basis(spec, cv.Vhat, cv.domain()));
  std::vector<double> scores;
  const std::size_t best = select_basis(bases, cv.Vhat, target, &scores);
  std::ostringstream table;
  table << "spec,dim_out,cv_score,winner\n";
  for (std::size_t k = 0; k < bases.size(); ++k)
    table << report::basis_token(c.cv_candidates[k]) << ',' << bases[k].dim_out() << ',' << report::num(scores[k]) << ','
          << (k == best ? 1 : 0) << '\n';
  auto out = report::open_out(out_path(o, "cv.csv"));
  out << table.str();
  std::cout << table.str();
  return ok;
}

int cmd_check_identification(const Common& o, Index per_dim) {
  const EstimationConfig c = resolve_config(o);
  const PanelData p = load_panel(o.data);
  const double delta0 = c.delta0 ? *c.delta0 : default_delta0(p);
  const auto units = first_difference(p, delta0);
  const ControlVariableSet cv = build_controls(p, c);
  const GEstimate ge = fit_g(units, cv, c.second_stage, c.eig_floor);
  const SweepResult sw = invertibility_sweep(ge, box_grid(cv.box, per_dim));
  std::ostringstream table;
  for (Index j = 1; j <= sw.points.cols(); ++j) table << "v_" << j << ',';
  table << "lambda_min\n";
  for (Index k = 0; k < sw.points.rows(); ++k) {
    for (Index j = 0; j < sw.points.cols(); ++j) table << report::num(sw.points(k, j)) << ',';
    table << report::num(sw.lambda(k)) << '\n';
  }
  auto out = report::open_out(out_path(o, "sweep.csv"));
  out << table.str();
  json r = base_report("check-identification", c);
  r["results"] = json{{"grid_points", sw.points.rows()},
                      {"grid_min", report::num_json(sw.grid_min)},
                      {"sample_min", report::num_json(sw.sample_min)},
                      {"eig_floor", c.eig_floor},
                      {"flagged", sw.flagged}};
  std::vector<std::string> warnings = cv.warnings;
  if (sw.flagged) warnings.push_back("minimum eigenvalue of M(V) below the floor");
  finish_report(r, warnings);
  report::write_json(out_path(o, "identification.json"), r);
  std::cout << table.str();
  std::cerr << "grid_min=" << report::num(sw.grid_min) << " sample_min=" << report::num(sw.sample_min)
            << " flagged=" << (sw.flagged ? "true" : "false") << '\n';
  return ok;
}

void add_common(CLI::App* app, Common& o, bool data_required) {
  auto* d = app->add_option("--data", o.data, "panel CSV (unit,time,y,x1_*,x2_*,z_*)");
  if (data_required) d->required();
  app->add_option("--config", o.config, "flat key = value config file");
  app->add_option("--out-dir", o.out_dir, "output directory");
  app->add_option("--seed", o.seed, "master seed");
  app->add_option("--threads", o.threads, "worker cap");
  app->add_flag("--timings", o.timings, "include wall-clock timings in JSON output");
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Control-function estimator for panels with correlated random coefficients"};
  app.require_subcommand(1);
  Common o;
  bool unit_csv = false;
  std::string spec = "crc-baseline", estimators = "ape,fdiv,crc";
  Index n = 2000, R = 200, per_dim = 5;
  std::optional<Index> T;

  auto* est = app.add_subcommand("estimate", "estimate the average partial effect");
  add_common(est, o, true);
  est->add_option("--inference", o.inference, "plugin | bootstrap | none");
  est->add_option("--B", o.B, "bootstrap replicates");
  est->add_flag("--unit-csv", unit_csv, "also write per-unit pseudo-coefficients");

  auto* sim = app.add_subcommand("simulate", "Monte Carlo replications of a simulation design");
  add_common(sim, o, false);
  sim->add_option("--spec", spec, "crc-baseline | exogenous-null | discrete-V-oracle | ar1-feedback | mixed-common-b");
  sim->add_option("--n", n, "units per replicate");
  sim->add_option("--R", R, "replications");
  sim->add_option("--T", T, "periods per unit");
  sim->add_option("--estimators", estimators, "comma list of ape, fdiv, crc, ape_true_v");
  sim->add_option("--inference", o.inference, "plugin | none");

  auto* cv = app.add_subcommand("cv", "leave-one-out CV over candidate second-stage bases");
  add_common(cv, o, true);

  auto* chk = app.add_subcommand("check-identification", "minimum-eigenvalue sweep of M(V)");
  add_common(chk, o, true);
  chk->add_option("--grid-points", per_dim, "grid points per control dimension");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : config_error;
  }

  try {
    if (*est) return cmd_estimate(o, unit_csv);
    if (*sim) return cmd_simulate(o, spec, n, R, T, estimators);
    if (*cv) return cmd_cv(o);
    if (*chk) return cmd_check_identification(o, per_dim);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return config_error;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return data_error;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return numerical_error;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return failure;
  }
  return failure;
}
