#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cfpanel/errors.hpp"

namespace cfpanel {

enum class BasisKind { power, bspline };
enum class TrimMode { box, smooth };
enum class ControlProvider { residual, ar1 };
enum class InferenceMode { plugin, bootstrap, none };
enum class SingularPolicy { trim, error };
enum class XiSigns { delta_method, as_printed };

/// Basis request resolved against data at fit time (box, quantile knots).
struct BasisSpec {
  BasisKind kind = BasisKind::power;
  int degree = 3;
  /// Interior knots per dimension (B-spline only).
  int knots = 0;
  /// Place interior knots at sample quantiles instead of uniformly.
  bool quantile_knots = true;
  /// Extra monomials for the power series, one exponent vector per term.
  std::vector<std::vector<int>> extra_terms;
  /// Scale the degree by sqrt(n / 1000), rounded, with n the fitting sample size.
  bool grow_with_n = false;

  int degree_for(long long n) const {
    if (!grow_with_n) return degree;
    const double d = std::round(degree * std::sqrt(static_cast<double>(n) / 1000.0));
    return std::max(1, static_cast<int>(d));
  }

  std::string label() const {
    std::string s = kind == BasisKind::power ? "power(" + std::to_string(degree)
                                             : "bspline(" + std::to_string(degree) + "," + std::to_string(knots);
    for (const auto& t : extra_terms) {
      s += ",+";
      for (std::size_t k = 0; k < t.size(); ++k) s += (k ? ":" : "") + std::to_string(t[k]);
    }
    return s + (grow_with_n ? ")*sqrt(n/1000)" : ")");
  }
};

struct EstimationConfig {
  /// Trimming threshold on det(Xdot'Xdot); empty means the data-driven default.
  std::optional<double> delta0;
  BasisSpec first_stage{BasisKind::bspline, 3, 0, true, {}};
  BasisSpec second_stage{BasisKind::power, 3, 0, true, {}};
  ControlProvider provider = ControlProvider::residual;
  bool ar1_intercept = false;
  TrimMode trim = TrimMode::box;
  /// Smooth trimming width as a fraction of each box side.
  double sigma_fraction = 0.1;
  /// Absolute smooth trimming width; overrides sigma_fraction when set.
  std::optional<double> sigma;
  double eig_floor = 0.03;
  SingularPolicy singular_units = SingularPolicy::trim;
  InferenceMode inference = InferenceMode::plugin;
  XiSigns xi_signs = XiSigns::delta_method;
  int bootstrap_B = 200;
  unsigned long long seed = 20240601ULL;
  int threads = 1;
  /// Candidate second-stage bases for the cv command.
  std::vector<BasisSpec> cv_candidates;

  void validate() const {
    if (delta0 && !(*delta0 >= 0.0)) throw ConfigError("delta0 must be >= 0");
    if (trim == TrimMode::smooth) {
      if (sigma && !(*sigma > 0.0)) throw ConfigError("controls.sigma must be > 0");
      if (!sigma && !(sigma_fraction > 0.0)) throw ConfigError("controls.sigma_fraction must be > 0");
    }
    for (const BasisSpec* b : {&first_stage, &second_stage}) {
      if (b->degree < 1) throw ConfigError("basis degree must be >= 1");
      if (b->knots < 0) throw ConfigError("basis knots must be >= 0");
    }
    if (!(eig_floor >= 0.0)) throw ConfigError("gfunc.eig_floor must be >= 0");
    if (inference == InferenceMode::bootstrap && bootstrap_B < 2) throw ConfigError("bootstrap.B must be >= 2");
    if (threads < 1) throw ConfigError("threads must be >= 1");
  }
};

namespace config_detail {

inline std::string trim_ws(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size())
    throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
  return out;
}

inline long long to_int(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size())
    throw ConfigError("key '" + key + "': expected an integer, got '" + v + "'");
  return out;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("key '" + key + "': expected true or false, got '" + v + "'");
}

/// "power:2", "power:2+1:1:0", "bspline:3:2" or "bspline:3:auto2".
inline BasisSpec parse_basis_token(const std::string& key, const std::string& token) {
  std::vector<std::string> parts;
  std::string extras;
  std::string head = token;
  if (const auto plus = token.find('+'); plus != std::string::npos) {
    head = token.substr(0, plus);
    extras = token.substr(plus + 1);
  }
  std::stringstream ss(head);
  for (std::string p; std::getline(ss, p, ':');) parts.push_back(trim_ws(p));
  if (parts.empty()) throw ConfigError("key '" + key + "': empty basis");
  BasisSpec b;
  if (parts[0] == "power") {
    b.kind = BasisKind::power;
    if (parts.size() > 2) throw ConfigError("key '" + key + "': power basis takes power:<degree>");
  } else if (parts[0] == "bspline") {
    b.kind = BasisKind::bspline;
    if (parts.size() > 3) throw ConfigError("key '" + key + "': bspline basis takes bspline:<degree>:<knots>");
  } else {
    throw ConfigError("key '" + key + "': unknown basis kind '" + parts[0] + "'");
  }
  if (parts.size() > 1) b.degree = static_cast<int>(to_int(key, parts[1]));
  if (parts.size() > 2) {
    std::string k = parts[2];
    b.quantile_knots = false;
    if (k.rfind("auto", 0) == 0) {
      b.quantile_knots = true;
      k = k.substr(4);
    }
    b.knots = static_cast<int>(to_int(key, k));
  }
  if (!extras.empty()) {
    std::stringstream es(extras);
    for (std::string term; std::getline(es, term, '+');) {
      std::vector<int> expo;
      std::stringstream ts(term);
      for (std::string e; std::getline(ts, e, ':');) expo.push_back(static_cast<int>(to_int(key, trim_ws(e))));
      b.extra_terms.push_back(expo);
    }
  }
  return b;
}

inline void apply_basis_key(BasisSpec& b, const std::string& key, const std::string& field, const std::string& v) {
  if (field == "kind") {
    if (v == "power") b.kind = BasisKind::power;
    else if (v == "bspline") b.kind = BasisKind::bspline;
    else throw ConfigError("key '" + key + "': unknown basis kind '" + v + "'");
  } else if (field == "degree") {
    b.degree = static_cast<int>(to_int(key, v));
  } else if (field == "knots") {
    if (v.rfind("auto", 0) == 0) {
      b.quantile_knots = true;
      b.knots = static_cast<int>(to_int(key, trim_ws(v.substr(4))));
    } else {
      b.quantile_knots = false;
      b.knots = static_cast<int>(to_int(key, v));
    }
  } else if (field == "grow") {
    if (v == "sqrt_n") b.grow_with_n = true;
    else if (v == "none") b.grow_with_n = false;
    else throw ConfigError("key '" + key + "': expected sqrt_n or none");
  } else if (field == "extra") {
    b.extra_terms = parse_basis_token(key, "power+" + v).extra_terms;
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

} // namespace config_detail

/// Flat `key = value` configuration; '#' starts a comment.
inline EstimationConfig parse_config(std::istream& in) {
  using namespace config_detail;
  EstimationConfig c;
  std::string line;
  int line_no = 0;
  std::map<std::string, int> seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim_ws(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim_ws(line.substr(0, eq));
    const std::string v = trim_ws(line.substr(eq + 1));
    if (seen[key]++) throw ConfigError("config key '" + key + "' given twice");

    if (key == "delta0") {
      if (v != "auto") c.delta0 = to_double(key, v);
    } else if (key.rfind("first_stage.", 0) == 0) {
      apply_basis_key(c.first_stage, key, key.substr(12), v);
    } else if (key.rfind("second_stage.", 0) == 0) {
      apply_basis_key(c.second_stage, key, key.substr(13), v);
    } else if (key == "controls.provider") {
      if (v == "residual") c.provider = ControlProvider::residual;
      else if (v == "ar1") c.provider = ControlProvider::ar1;
      else throw ConfigError("key '" + key + "': expected residual or ar1");
    } else if (key == "controls.ar1_intercept") {
      c.ar1_intercept = to_bool(key, v);
    } else if (key == "controls.trim") {
      if (v == "box") c.trim = TrimMode::box;
      else if (v == "smooth") c.trim = TrimMode::smooth;
      else throw ConfigError("key '" + key + "': expected box or smooth");
    } else if (key == "controls.sigma") {
      c.sigma = to_double(key, v);
    } else if (key == "controls.sigma_fraction") {
      c.sigma_fraction = to_double(key, v);
    } else if (key == "gfunc.eig_floor") {
      c.eig_floor = to_double(key, v);
    } else if (key == "gfunc.singular_units") {
      if (v == "trim") c.singular_units = SingularPolicy::trim;
      else if (v == "error") c.singular_units = SingularPolicy::error;
      else throw ConfigError("key '" + key + "': expected trim or error");
    } else if (key == "inference") {
      if (v == "plugin") c.inference = InferenceMode::plugin;
      else if (v == "bootstrap") c.inference = InferenceMode::bootstrap;
      else if (v == "none") c.inference = InferenceMode::none;
      else throw ConfigError("key '" + key + "': expected plugin, bootstrap or none");
    } else if (key == "inference.xi_signs") {
      if (v == "delta_method") c.xi_signs = XiSigns::delta_method;
      else if (v == "as_printed") c.xi_signs = XiSigns::as_printed;
      else throw ConfigError("key '" + key + "': expected delta_method or as_printed");
    } else if (key == "bootstrap.B") {
      c.bootstrap_B = static_cast<int>(to_int(key, v));
    } else if (key == "seed") {
      c.seed = static_cast<unsigned long long>(to_int(key, v));
    } else if (key == "threads") {
      c.threads = static_cast<int>(to_int(key, v));
    } else if (key == "cv.candidates") {
      std::stringstream ss(v);
      for (std::string tok; std::getline(ss, tok, ',');) {
        tok = trim_ws(tok);
        if (!tok.empty()) c.cv_candidates.push_back(parse_basis_token(key, tok));
      }
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

inline EstimationConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config(in);
}

inline EstimationConfig parse_config_string(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

} // namespace cfpanel
