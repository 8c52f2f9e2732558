#include <cmath>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace cfpanel;

namespace {

EstimationConfig plain_config() {
  EstimationConfig c;
  c.inference = InferenceMode::none;
  return c;
}

/// Homogeneous exogenous design: x2 = z + v, y = mu0 x2 + alpha_i + u.
PanelData homogeneous_panel(Index n, double mu0, double noise, std::uint64_t seed) {
  auto p = testutil::random_panel(n, 3, 0, 1, 1, seed);
  CounterRng rng(seed + 1000);
  for (Index i = 0; i < n; ++i) {
    const double alpha = rng.normal();
    for (Index t = 0; t < 3; ++t) {
      p.x2(i, t) = p.z(i, t) + rng.normal();
      p.y(i, t) = mu0 * p.x2(i, t) + alpha + noise * rng.normal();
    }
  }
  return p;
}

} // namespace

TEST(Ape, ZeroGIsNaiveCrc) {
  const auto draw = generate(DgpSpec::make(DgpName::crc_baseline, 300, 1));
  const auto units = first_difference(draw.panel, default_delta0(draw.panel));
  const MatrixXd G = MatrixXd::Zero(300, 3);
  const auto a = ape_from_g(units, G, std::vector<char>(300, 1));
  EXPECT_LT((a.mu_hat - naive_crc_estimator(units)).norm(), 1e-12);
}

TEST(Ape, NoiselessHomogeneousDesignIsExact) {
  auto p = homogeneous_panel(400, 1.75, 0.0, 2);
  const auto st = run_window(p, plain_config(), false);
  EXPECT_NEAR(st.ape.mu_hat(0), 1.75, 1e-10);
}

TEST(Ape, TrueGInjectionIsUnbiased) {
  const Index R = 60;
  VectorXd sum = VectorXd::Zero(2), sq = VectorXd::Zero(2);
  for (Index r = 0; r < R; ++r) {
    const DgpSpec spec = DgpSpec::make(DgpName::crc_baseline, 2000, 500 + r);
    const auto draw = generate(spec);
    const auto units = first_difference(draw.panel, default_delta0(draw.panel));
    MatrixXd G(2000, 3);
    for (Index i = 0; i < 2000; ++i) G.row(i) = true_g(spec, draw.truth.V.row(i).transpose()).transpose();
    // Population target E(mu | delta) approximated by the in-sample mean over the same units.
    const auto a = ape_from_g(units, G, std::vector<char>(2000, 1));
    VectorXd target = VectorXd::Zero(2);
    for (Index i = 0; i < 2000; ++i)
      if (a.used[i]) target += draw.truth.mu.row(i).transpose() / a.diagnostics.n_used;
    const VectorXd err = a.mu_hat - target;
    sum += err;
    sq += err.cwiseAbs2();
  }
  const VectorXd mean = sum / R;
  const VectorXd se = ((sq / R - mean.cwiseAbs2()) / (R - 1)).cwiseSqrt();
  for (Index j = 0; j < 2; ++j) EXPECT_LE(std::abs(mean(j)), 2.0 * se(j)) << "component " << j;
}

TEST(Ape, ShiftEquivariance) {
  const auto draw = generate(DgpSpec::make(DgpName::crc_baseline, 800, 3));
  const auto base = run_window(draw.panel, plain_config(), false).ape;
  PanelData shifted = draw.panel;
  shifted.y.array() += 2.5;
  const auto a = run_window(shifted, plain_config(), false).ape;
  EXPECT_LT((a.mu_hat - base.mu_hat).norm(), 1e-10);
  EXPECT_NEAR(a.alpha_hat, base.alpha_hat + 2.5, 1e-10);

  PanelData tilted = draw.panel;
  const Eigen::Vector2d c(0.3, -1.2);
  for (Index i = 0; i < tilted.n; ++i)
    for (Index t = 0; t < tilted.T; ++t) tilted.y(i, t) += tilted.regressor(i, t).dot(c);
  const auto b = run_window(tilted, plain_config(), false).ape;
  EXPECT_LT((b.mu_hat - base.mu_hat - c).norm(), 1e-8);
}

TEST(Alpha, RecoversInterceptLevel) {
  const Index R = 20;
  std::vector<double> est;
  for (Index r = 0; r < R; ++r) {
    auto draw = generate(DgpSpec::make(DgpName::exogenous_null, 1000, 40 + r));
    for (Index i = 0; i < draw.panel.n; ++i) draw.panel.y.row(i).array() += 5.0 - draw.truth.alpha(i);
    est.push_back(run_window(draw.panel, plain_config(), false).ape.alpha_hat);
  }
  const Eigen::Map<const VectorXd> v(est.data(), R);
  const double sd = std::sqrt((v.array() - v.mean()).square().sum() / (R - 1));
  EXPECT_LE(std::abs(v.mean() - 5.0), 3.0 * sd / std::sqrt(static_cast<double>(R)));
}

TEST(Alpha, ZeroInterceptDesign) {
  const auto draw = generate(DgpSpec::make(DgpName::crc_baseline, 2000, 4));
  const auto a = run_window(draw.panel, plain_config(), false).ape;
  EXPECT_LT(std::abs(a.alpha_hat), 0.15);
}

TEST(PolicyEffect, IdentityAndUnitShift) {
  const auto draw = generate(DgpSpec::make(DgpName::crc_baseline, 600, 5));
  const auto a = run_window(draw.panel, plain_config(), false).ape;
  EXPECT_EQ(policy_effect(draw.panel, a, 1, [](const VectorXd& x) { return x; }), 0.0);
  for (Index j = 0; j < 2; ++j) {
    const double e = policy_effect(draw.panel, a, 0, [j](const VectorXd& x) {
      VectorXd y = x;
      y(j) += 1.0;
      return y;
    });
    EXPECT_NEAR(e, a.mu_hat(j), 1e-12);
  }
}

TEST(PolicyEffect, DoublingMatchesOracle) {
  const auto draw = generate(DgpSpec::make(DgpName::crc_baseline, 4000, 6));
  const auto a = run_window(draw.panel, plain_config(), false).ape;
  const Index t = 2;
  const double est = policy_effect(draw.panel, a, t, [](const VectorXd& x) { return VectorXd(2.0 * x); });
  double oracle = 0.0;
  for (Index i = 0; i < draw.panel.n; ++i) oracle += draw.panel.regressor(i, t).dot(draw.truth.mu.row(i).transpose());
  oracle /= draw.panel.n;
  EXPECT_NEAR(est, oracle, 0.03 * oracle);
}

TEST(Ape, AllTrimmedIsAnError) {
  const auto draw = generate(DgpSpec::make(DgpName::crc_baseline, 100, 7));
  EstimationConfig c = plain_config();
  c.delta0 = 1e300;
  EXPECT_THROW(run_window(draw.panel, c, false), NumericalError);
}

TEST(Ape, SingularPolicyErrorNamesUnit) {
  const auto draw = generate(DgpSpec::make(DgpName::crc_baseline, 500, 8));
  EstimationConfig c = plain_config();
  c.eig_floor = 0.2;
  c.singular_units = SingularPolicy::error;
  try {
    run_window(draw.panel, c, false);
    FAIL() << "expected SingularMError";
  } catch (const SingularMError& e) {
    EXPECT_NE(std::string(e.what()).find("unit"), std::string::npos);
  }
  c.singular_units = SingularPolicy::trim;
  const auto a = run_window(draw.panel, c, false).ape;
  EXPECT_GT(a.diagnostics.eig_trimmed, 0);
}

TEST(CommonB, ReducesToPooledFirstDifferenceOls) {
  // Stayers in x (M = I), constant second-stage basis and period-demeaned Ldot.
  const Index n = 60, T = 3, dl = 2;
  auto p = testutil::random_panel(n, T, 0, 1, 1, 9);
  p.x2.setZero();
  p.dl = p.dzl = dl;
  CounterRng rng(10);
  p.l.resize(n, T * dl);
  for (Index i = 0; i < n; ++i)
    for (Index k = 0; k < T * dl; ++k) p.l(i, k) = rng.normal();
  // Make every period's differenced L have zero mean across units.
  for (Index t = 1; t < T; ++t)
    for (Index j = 0; j < dl; ++j) {
      double m = 0.0;
      for (Index i = 0; i < n; ++i) m += (p.l(i, t * dl + j) - p.l(i, (t - 1) * dl + j)) / n;
      for (Index i = 0; i < n; ++i) p.l(i, t * dl + j) -= m;
    }
  p.zl = p.l;
  const auto units = first_difference(p, 0.0);
  const auto cv = ControlVariableSet::from_values(MatrixXd::Zero(n, 1));
  const GEstimate ge = fit_g(units, cv, SieveBasis::power(1, 0), 0.5);
  const auto r = estimate_common_b(p, units, cv, ge);
  MatrixXd LL = MatrixXd::Zero(dl, dl);
  VectorXd Ly = VectorXd::Zero(dl);
  for (Index i = 0; i < n; ++i) {
    const MatrixXd Ld = differenced_block(p.l, dl, i, T);
    LL += Ld.transpose() * Ld;
    Ly += Ld.transpose() * units[i].ydot;
  }
  EXPECT_LT((r.b_hat - LL.ldlt().solve(Ly)).norm(), 1e-8);
}

TEST(CommonB, JustIdentifiedMatchesIvFormula) {
  const auto draw = generate(DgpSpec::make(DgpName::mixed_common_b, 1500, 11));
  const auto& p = draw.panel;
  const EstimationConfig c;
  const auto units = first_difference(p, default_delta0(p));
  const auto cv = fit_residual_controls(p, c.first_stage);
  const GEstimate ge = fit_g(units, cv, c.second_stage, c.eig_floor);
  const auto r = estimate_common_b(p, units, cv, ge);
  // Independent assembly: separate series fits of M Ldot and M ydot on the same basis.
  const MatrixXd P = ge.basis().design(cv.Vhat);
  MatrixXd YL(p.n, 3 * 2), Yy(p.n, 3), YM(p.n, 9);
  for (Index i = 0; i < p.n; ++i) {
    const MatrixXd Ld = differenced_block(p.l, 2, i, p.T);
    const MatrixXd ML = units[i].M * Ld;
    YL.row(i) = Eigen::Map<const VectorXd>(ML.data(), 6).transpose();
    Yy.row(i) = (units[i].M * units[i].ydot).transpose();
    YM.row(i) = Eigen::Map<const VectorXd>(units[i].M.data(), 9).transpose();
  }
  const MatrixXd G = P.transpose() * P;
  const MatrixXd FL = P * G.completeOrthogonalDecomposition().solve(P.transpose() * YL);
  const MatrixXd Fy = P * G.completeOrthogonalDecomposition().solve(P.transpose() * Yy);
  const MatrixXd FM = P * G.completeOrthogonalDecomposition().solve(P.transpose() * YM);
  Eigen::Matrix2d A = Eigen::Matrix2d::Zero();
  Eigen::Vector2d cvec = Eigen::Vector2d::Zero();
  for (Index i = 0; i < p.n; ++i) {
    if (ge.sample_lambda()(i) < ge.eig_floor()) continue;
    const VectorXd fm = FM.row(i).transpose();
    MatrixXd Mi = Eigen::Map<const MatrixXd>(fm.data(), 3, 3);
    Mi = 0.5 * (Mi + Mi.transpose());
    const MatrixXd EL = Eigen::Map<const MatrixXd>(VectorXd(FL.row(i).transpose()).data(), 3, 2);
    const MatrixXd dL = differenced_block(p.l, 2, i, p.T) - Mi.inverse() * EL;
    const VectorXd dy = units[i].ydot - Mi.inverse() * Fy.row(i).transpose();
    const MatrixXd Z = differenced_block(p.zl, 2, i, p.T);
    A += Z.transpose() * units[i].M * dL;
    cvec += Z.transpose() * units[i].M * dy;
  }
  EXPECT_LT((r.b_hat - A.inverse() * cvec).norm(), 1e-8);
  EXPECT_LT((r.b_hat - draw.truth.b.value()).cwiseAbs().maxCoeff(), 0.1);
}

TEST(CommonB, CollinearBlockRejected) {
  auto draw = generate(DgpSpec::make(DgpName::mixed_common_b, 300, 12));
  auto& p = draw.panel;
  for (Index t = 0; t < p.T; ++t) p.l(Eigen::all, t * 2 + 1) = p.l(Eigen::all, t * 2);
  p.zl = p.l;
  EXPECT_THROW(run_window(p, plain_config(), false), NumericalError);
}

TEST(SubsetAverage, SingleWindowEqualsDirectEstimate) {
  const auto draw = generate(DgpSpec::make(DgpName::crc_baseline, 500, 13));
  const auto a = estimate_point(draw.panel, plain_config(), false);
  const auto b = run_window(draw.panel, plain_config(), false).ape;
  EXPECT_EQ(a.mu_hat, b.mu_hat);
  EXPECT_EQ(a.diagnostics.subsets_used, 1);
}

TEST(SubsetAverage, FourWindowsForScalarRegressor) {
  EXPECT_EQ(period_subsets(4, 3).size(), 4u);
  EXPECT_EQ(period_subsets(5, 4).size(), 5u);
  EXPECT_EQ(period_subsets(6, 3).size(), 20u);
  DgpSpec spec = DgpSpec::make(DgpName::exogenous_null, 800, 14);
  spec.T = 4;
  const auto draw = generate(spec);
  const auto a = estimate_point(draw.panel, EstimationConfig{}, true);
  EXPECT_EQ(a.diagnostics.subsets_used, 4);
  VectorXd mean = VectorXd::Zero(1);
  for (const auto& s : period_subsets(4, 3)) mean += run_window(draw.panel.select_periods(s), plain_config(), false).ape.mu_hat / 4.0;
  EXPECT_LT((a.mu_hat - mean).norm(), 1e-12);
  EXPECT_GT(a.se(0), 0.0);
}

TEST(SubsetAverage, ReducesMonteCarloSpread) {
  const Index R = 40;
  MatrixXd avg(R, 2), single(R, 2);
  for (Index r = 0; r < R; ++r) {
    DgpSpec spec = DgpSpec::make(DgpName::crc_baseline, 1000, 900 + r);
    spec.T = 5;
    const auto draw = generate(spec);
    avg.row(r) = estimate_point(draw.panel, plain_config(), false).mu_hat.transpose();
    const std::vector<Index> first{0, 1, 2, 3};
    single.row(r) = run_window(draw.panel.select_periods(first), plain_config(), false).ape.mu_hat.transpose();
  }
  const VectorXd sd_avg = linalg::row_covariance(avg).diagonal().cwiseSqrt();
  const VectorXd sd_single = linalg::row_covariance(single).diagonal().cwiseSqrt();
  for (Index j = 0; j < 2; ++j) EXPECT_LE(sd_avg(j), sd_single(j)) << "component " << j;
}

TEST(SubsetAverage, TooFewPeriods) {
  const auto p = testutil::random_panel(50, 3, 1, 1, 1, 15);
  EXPECT_THROW(estimate_point(p, plain_config(), false), DataError);
}

TEST(PlugIn, InfluenceCenteredAndCovariancePsd) {
  const auto draw = generate(DgpSpec::make(DgpName::crc_baseline, 2000, 16));
  EstimationConfig c;
  const auto st = run_window(draw.panel, c, true);
  const auto& f = *st.parts;
  EXPECT_LT(f.s.colwise().mean().cwiseAbs().maxCoeff(), 1e-6);
  const MatrixXd raw = f.xi / (st.ape.phi_hat * st.ape.phi_hat * draw.panel.n);
  EXPECT_LT((raw - raw.transpose()).norm(), 1e-12 * raw.norm());
  EXPECT_GE(linalg::lambda_min_sym(raw), -1e-10);
  // Delta-method covariance equals the variance of the influence values.
  const MatrixXd direct = f.psi.transpose() * f.psi / std::pow(static_cast<double>(draw.panel.n), 2);
  EXPECT_LT((direct - st.ape.cov).norm(), 1e-10 * st.ape.cov.norm());
  EXPECT_TRUE(st.ape.se.allFinite());
  EXPECT_GT(st.ape.se.minCoeff(), 0.0);
}

TEST(PlugIn, PrintedSignsDifferOnlyInCrossTerms) {
  const auto draw = generate(DgpSpec::make(DgpName::crc_baseline, 1000, 17));
  EstimationConfig c;
  const auto a = run_window(draw.panel, c, true);
  c.xi_signs = XiSigns::as_printed;
  const auto b = run_window(draw.panel, c, true);
  const double phi = a.ape.phi_hat;
  const Index n = draw.panel.n;
  VectorXd ucent(n);
  for (Index i = 0; i < n; ++i) ucent(i) = (a.ape.used[i] ? 1.0 : 0.0) - phi;
  const VectorXd cc = a.parts->s.transpose() * ucent / n;
  const VectorXd& m = a.ape.mu_hat;
  const MatrixXd diff = b.parts->xi - a.parts->xi;
  EXPECT_LT((diff - 2.0 * (cc * m.transpose() + m * cc.transpose())).norm(), 1e-12);
}

TEST(PlugIn, ConstantOutcomeGivesZeroSe) {
  auto p = testutil::random_panel(300, 3, 0, 1, 1, 18);
  p.y.setConstant(2.0);
  const auto st = run_window(p, EstimationConfig{}, true);
  EXPECT_LT(st.ape.se.norm(), 1e-12);
}

TEST(PlugIn, MatchesMonteCarloSpreadInHomogeneousDesign) {
  // The textbook sandwich on mu_tilde ignores the noise in g-hat, so it sits below the
  // sampling spread; the plug-in se must track the spread itself.
  const int R = 100;
  std::vector<double> mu, se;
  double sandwich = 0.0;
  for (int r = 0; r < R; ++r) {
    const auto p = homogeneous_panel(2000, 1.0, 0.5, 1000 + r);
    const auto a = run_window(p, EstimationConfig{}, true).ape;
    const Index k = a.diagnostics.n_used;
    double m = 0.0, sq = 0.0;
    for (Index i = 0; i < p.n; ++i)
      if (a.used[i]) m += a.mu_tilde(i, 0) / k;
    for (Index i = 0; i < p.n; ++i)
      if (a.used[i]) sq += std::pow(a.mu_tilde(i, 0) - m, 2);
    sandwich += std::sqrt(sq / (k - 1) / k) / R;
    mu.push_back(a.mu_hat(0));
    se.push_back(a.se(0));
  }
  const Eigen::Map<const VectorXd> m(mu.data(), R), s(se.data(), R);
  const double sd = std::sqrt((m.array() - m.mean()).square().sum() / (R - 1));
  EXPECT_NEAR(s.mean() / sd, 1.0, 0.2);
  EXPECT_GE(s.mean(), sandwich);
  EXPECT_NEAR(m.mean(), 1.0, 3.0 * sd / std::sqrt(static_cast<double>(R)));
}

TEST(Bootstrap, DeterministicAcrossRunsAndThreads) {
  const auto draw = generate(DgpSpec::make(DgpName::crc_baseline, 300, 20));
  EstimationConfig c = plain_config();
  auto est = [&](const PanelData& q) { return estimate_point(q, c, false).mu_hat; };
  const auto a = bootstrap_variance(draw.panel, est, 20, 7, 1);
  const auto b = bootstrap_variance(draw.panel, est, 20, 7, 3);
  const auto d = bootstrap_variance(draw.panel, est, 20, 8, 1);
  EXPECT_EQ(a.draws, b.draws);
  EXPECT_EQ(a.cov, b.cov);
  EXPECT_NE(a.cov, d.cov);
}

TEST(Bootstrap, SingleUnitHasZeroVariance) {
  const auto p = testutil::random_panel(1, 3, 1, 0, 0, 21);
  const auto r = bootstrap_variance(p, [](const PanelData& q) { return VectorXd(q.y.row(0).transpose()); }, 2, 3);
  EXPECT_EQ(r.cov.norm(), 0.0);
}

TEST(Bootstrap, TooManyFailuresIsAnError) {
  const auto p = testutil::random_panel(30, 3, 1, 0, 0, 22);
  int calls = 0;
  auto flaky = [&](const PanelData&) -> VectorXd {
    if (++calls % 3 == 0) throw NumericalError("singular");
    return VectorXd::Zero(1);
  };
  EXPECT_THROW(bootstrap_variance(p, flaky, 30, 1), NumericalError);
}
