#include <fstream>
#include <limits>
#include <sstream>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace cfpanel;

namespace {

DifferencedUnit unit_from(const MatrixXd& xdot, double delta0 = 0.0) {
  return make_differenced_unit(xdot, VectorXd::Zero(xdot.rows()), delta0);
}

} // namespace

TEST(FirstDifference, ConstantColumnProjector) {
  const auto u = unit_from(MatrixXd::Ones(3, 1));
  ASSERT_TRUE(u.Q.has_value());
  EXPECT_TRUE(u.Q->isApprox(MatrixXd::Constant(1, 3, 1.0 / 3.0), 1e-14));
  const MatrixXd expected = MatrixXd::Identity(3, 3) - MatrixXd::Constant(3, 3, 1.0 / 3.0);
  EXPECT_LT((u.M - expected).norm(), 1e-14);
  EXPECT_TRUE(u.delta);
}

TEST(FirstDifference, SquareNonsingularGivesZeroProjector) {
  MatrixXd x(2, 2);
  x << 1.0, 2.0, -0.5, 3.0;
  const auto u = unit_from(x);
  EXPECT_LT(u.M.norm(), 1e-12);
  ASSERT_TRUE(u.Q.has_value());
  EXPECT_LT((*u.Q - x.inverse()).norm(), 1e-12);
}

TEST(FirstDifference, StayerHasIdentityProjector) {
  const auto u = unit_from(MatrixXd::Zero(3, 2));
  EXPECT_TRUE(u.M.isApprox(MatrixXd::Identity(3, 3)));
  EXPECT_FALSE(u.Q.has_value());
  EXPECT_FALSE(u.delta);
  EXPECT_EQ(u.rank, 0);
}

TEST(FirstDifference, RankDeficientUsesPseudoInverse) {
  MatrixXd x(4, 2);
  x << 1, 2, 2, 4, -1, -2, 0.5, 1;
  const auto u = unit_from(x);
  EXPECT_EQ(u.rank, 1);
  EXPECT_FALSE(u.Q.has_value());
  // Pseudo-inverse projector from the normal equations of the first column alone.
  const VectorXd c = x.col(0);
  const MatrixXd expected = MatrixXd::Identity(4, 4) - c * c.transpose() / c.squaredNorm();
  EXPECT_LT((u.M - expected).norm(), 1e-12);
}

TEST(FirstDifference, DifferencesPanelRows) {
  auto p = testutil::random_panel(3, 4, 1, 1, 1, 5);
  const auto units = first_difference(p, 0.0);
  ASSERT_EQ(units.size(), 3u);
  for (Index i = 0; i < 3; ++i)
    for (Index t = 0; t < 3; ++t) {
      EXPECT_DOUBLE_EQ(units[i].Xdot(t, 0), p.x1(i, t + 1) - p.x1(i, t));
      EXPECT_DOUBLE_EQ(units[i].Xdot(t, 1), p.x2(i, t + 1) - p.x2(i, t));
      EXPECT_DOUBLE_EQ(units[i].ydot(t), p.y(i, t + 1) - p.y(i, t));
    }
}

TEST(FirstDifference, InvariantsOnRandomUnits) {
  CounterRng rng(99);
  for (int k = 0; k < 300; ++k) {
    const Index T = 3 + static_cast<Index>(rng.below(3));
    const Index dx = 1 + static_cast<Index>(rng.below(2));
    MatrixXd x(T - 1, dx);
    for (Index r = 0; r < x.rows(); ++r)
      for (Index c = 0; c < dx; ++c) x(r, c) = rng.normal();
    const auto u = unit_from(x);
    EXPECT_LE((u.M - u.M.transpose()).norm(), 1e-12);
    EXPECT_LE((u.M * u.M - u.M).norm(), 1e-10);
    EXPECT_LE((u.M * x).norm(), 1e-10);
    ASSERT_TRUE(u.Q.has_value());
    EXPECT_LE((*u.Q * x - MatrixXd::Identity(dx, dx)).norm(), 1e-10);
    EXPECT_LE((*u.Q * u.M).norm(), 1e-10);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(u.M);
    const double trace = es.eigenvalues().sum();
    EXPECT_NEAR(trace, static_cast<double>(T - 1 - dx), 1e-10);
  }
}

TEST(FirstDifference, PermutationEquivariant) {
  const auto p = testutil::random_panel(6, 4, 1, 1, 1, 11);
  const std::vector<Index> perm{3, 0, 5, 1, 4, 2};
  const auto a = first_difference(p, 0.1);
  const auto b = first_difference(p.select_units(perm), 0.1);
  for (std::size_t k = 0; k < perm.size(); ++k) {
    EXPECT_EQ(b[k].M, a[perm[k]].M);
    EXPECT_EQ(b[k].delta, a[perm[k]].delta);
  }
}

TEST(FirstDifference, NeedsTwoPeriods) {
  const auto p = testutil::random_panel(2, 1, 1, 0, 0, 1);
  EXPECT_THROW(first_difference(p, 0.0), DataError);
}

TEST(TrimFraction, Extremes) {
  const auto p = testutil::random_panel(50, 4, 1, 1, 1, 3);
  EXPECT_DOUBLE_EQ(trim_fraction(first_difference(p, 0.0)), 0.0);
  EXPECT_DOUBLE_EQ(trim_fraction(first_difference(p, 1e300)), 1.0);
  EXPECT_THROW(trim_fraction(std::vector<DifferencedUnit>{}), DataError);
}

TEST(TrimFraction, DefaultThresholdOnBaselineDesign) {
  const auto draw = generate(DgpSpec::make(DgpName::crc_baseline, 2000, 17));
  const double d0 = default_delta0(draw.panel);
  EXPECT_GE(d0, 1e-8);
  EXPECT_LT(trim_fraction(first_difference(draw.panel, d0)), 0.02);
}

TEST(PanelCsv, MinimalBalancedPanel) {
  std::istringstream in("unit,time,y,x1_1\n1,1,0.5,1\n1,2,0.7,2\n2,1,1.5,3\n2,2,-1,4\n");
  const auto p = read_panel(in);
  EXPECT_EQ(p.n, 2);
  EXPECT_EQ(p.T, 2);
  EXPECT_EQ(p.d1, 1);
  EXPECT_EQ(p.d2, 0);
  EXPECT_DOUBLE_EQ(p.y(1, 1), -1.0);
  EXPECT_DOUBLE_EQ(p.x1(1, 0), 3.0);
}

TEST(PanelCsv, HomogeneousBlockInstrumentsItselfByDefault) {
  std::istringstream in("unit,time,y,x1_1,l_1\n1,1,0.5,1,3\n1,2,0.7,2,4\n");
  const auto p = read_panel(in);
  EXPECT_EQ(p.dl, 1);
  EXPECT_EQ(p.dzl, 1);
  EXPECT_EQ(p.zl, p.l);
}

TEST(PanelCsv, SortsUnitsAndPeriods) {
  std::istringstream in("time,unit,y,x1_1\n2,10,4,0\n1,10,3,0\n2,9,2,0\n1,9,1,0\n");
  const auto p = read_panel(in);
  EXPECT_EQ(p.unit_ids, (std::vector<std::string>{"9", "10"}));
  EXPECT_DOUBLE_EQ(p.y(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(p.y(1, 1), 4.0);
}

TEST(PanelCsv, UnbalancedNamesUnit) {
  std::istringstream in("unit,time,y,x1_1\n1,1,0,0\n1,2,0,0\n2,1,0,0\n2,2,0,0\n3,1,0,0\n");
  try {
    read_panel(in);
    FAIL() << "expected an error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("unbalanced"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("'3'"), std::string::npos);
  }
}

TEST(PanelCsv, NonNumericCellReportsRow) {
  std::istringstream in("unit,time,y,x1_1\n1,1,0,0\n1,2,abc,0\n");
  try {
    read_panel(in);
    FAIL() << "expected an error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("row 3"), std::string::npos);
  }
}

TEST(PanelCsv, DuplicateCellIsUnbalanced) {
  std::istringstream in("unit,time,y,x1_1\n1,1,0,0\n1,1,0,0\n");
  EXPECT_THROW(read_panel(in), DataError);
}

TEST(PanelCsv, SimulatedPanelRoundTripsBitForBit) {
  const auto draw = generate(DgpSpec::make(DgpName::mixed_common_b, 50, 4));
  std::stringstream buf;
  write_panel(buf, draw.panel);
  const auto p = read_panel(buf);
  EXPECT_EQ(p.n, draw.panel.n);
  EXPECT_EQ(p.T, draw.panel.T);
  EXPECT_EQ(p.dl, 2);
  EXPECT_TRUE(p.y == draw.panel.y);
  EXPECT_TRUE(p.x1 == draw.panel.x1);
  EXPECT_TRUE(p.x2 == draw.panel.x2);
  EXPECT_TRUE(p.z == draw.panel.z);
  EXPECT_TRUE(p.l == draw.panel.l);
  EXPECT_TRUE(p.zl == draw.panel.zl);
}

TEST(PanelCsv, MissingFile) { EXPECT_THROW(load_panel("/nonexistent/panel.csv"), DataError); }

TEST(PanelSelect, PeriodsAndUnits) {
  const auto p = testutil::random_panel(4, 5, 1, 1, 2, 8);
  const std::vector<Index> keep{0, 2, 4};
  const auto q = p.select_periods(keep);
  EXPECT_EQ(q.T, 3);
  EXPECT_EQ(q.periods, (std::vector<long long>{1, 3, 5}));
  EXPECT_DOUBLE_EQ(q.z(2, 2 * 2 + 1), p.z(2, 4 * 2 + 1));
  EXPECT_DOUBLE_EQ(q.y(3, 1), p.y(3, 2));
  const std::vector<Index> rows{1, 1, 3};
  const auto r = p.select_units(rows);
  EXPECT_EQ(r.n, 3);
  EXPECT_TRUE(r.x2.row(1) == p.x2.row(1));
}

TEST(Config, ParsesKeys) {
  const auto c = parse_config_string(
      "# comment\n"
      "delta0 = 0.25\n"
      "first_stage.kind = power\n"
      "first_stage.degree = 2\n"
      "second_stage.kind = bspline\n"
      "second_stage.knots = auto2\n"
      "controls.provider = ar1\n"
      "controls.trim = smooth\n"
      "controls.sigma = 0.05\n"
      "gfunc.eig_floor = 1e-4\n"
      "inference = bootstrap\n"
      "bootstrap.B = 60\n"
      "seed = 7\n"
      "cv.candidates = power:1, power:2+1:1:0, bspline:3:1\n");
  EXPECT_DOUBLE_EQ(*c.delta0, 0.25);
  EXPECT_EQ(c.first_stage.kind, BasisKind::power);
  EXPECT_EQ(c.first_stage.degree, 2);
  EXPECT_EQ(c.second_stage.kind, BasisKind::bspline);
  EXPECT_EQ(c.second_stage.knots, 2);
  EXPECT_TRUE(c.second_stage.quantile_knots);
  EXPECT_EQ(c.provider, ControlProvider::ar1);
  EXPECT_EQ(c.trim, TrimMode::smooth);
  EXPECT_DOUBLE_EQ(*c.sigma, 0.05);
  EXPECT_DOUBLE_EQ(c.eig_floor, 1e-4);
  EXPECT_EQ(c.inference, InferenceMode::bootstrap);
  EXPECT_EQ(c.bootstrap_B, 60);
  EXPECT_EQ(c.seed, 7u);
  ASSERT_EQ(c.cv_candidates.size(), 3u);
  EXPECT_EQ(c.cv_candidates[1].extra_terms, (std::vector<std::vector<int>>{{1, 1, 0}}));
  EXPECT_EQ(c.cv_candidates[2].knots, 1);
  EXPECT_FALSE(c.cv_candidates[2].quantile_knots);
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(parse_config_string("nonsense.key = 1\n"), ConfigError);
  EXPECT_THROW(parse_config_string("delta0 = -1\n"), ConfigError);
  EXPECT_THROW(parse_config_string("delta0 = abc\n"), ConfigError);
  EXPECT_THROW(parse_config_string("controls.trim = smooth\ncontrols.sigma = 0\n"), ConfigError);
  EXPECT_THROW(parse_config_string("seed = 1\nseed = 2\n"), ConfigError);
  EXPECT_THROW(parse_config_string("no equals sign\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/config.txt"), ConfigError);
}

TEST(Config, DegreeGrowsWithSampleSize) {
  BasisSpec b;
  b.degree = 3;
  b.grow_with_n = true;
  EXPECT_EQ(b.degree_for(1000), 3);
  EXPECT_EQ(b.degree_for(4000), 6);
  b.grow_with_n = false;
  EXPECT_EQ(b.degree_for(4000), 3);
}

TEST(Rng, DeterministicAndDistinct) {
  CounterRng a(5), b(5), c(6);
  for (int k = 0; k < 10; ++k) {
    const auto va = a.next_u64();
    EXPECT_EQ(va, b.next_u64());
    EXPECT_NE(va, c.next_u64());
  }
  CounterRng u(1);
  double sum = 0.0, sq = 0.0;
  for (int k = 0; k < 200000; ++k) {
    const double z = u.normal();
    sum += z;
    sq += z * z;
  }
  EXPECT_NEAR(sum / 200000, 0.0, 0.01);
  EXPECT_NEAR(sq / 200000, 1.0, 0.02);
}
