#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <numbers>

#include "lssdiff/mp_law.hpp"
#include "lssdiff/spectral.hpp"

using namespace lssdiff;

namespace {

MPModel null_model(double y) { return {y, SpectralMeasure::point_mass(1.0)}; }

std::vector<cplx> grid_points(const Interval& iv) {
  // 100 points on a rectangle around the support, none on the real axis
  const double xl = iv.lo - 0.3, xr = iv.hi + 0.3, v = 0.8;
  std::vector<cplx> out;
  for (int k = 0; k < 25; ++k) {
    const double t = (k + 0.5) / 25.0;
    out.emplace_back(xl + t * (xr - xl), v);
    out.emplace_back(xl + t * (xr - xl), -v);
    const double s = (k + 0.25) / 25.0;
    out.emplace_back(xl, v * (2 * s - 1));
    out.emplace_back(xr, v * (2 * s - 1));
  }
  return out;
}

}  // namespace

TEST(CompanionSolver, NullCaseMatchesQuadraticRoot) {
  for (double y : {0.25, 0.5, 1.0, 2.0}) {
    const auto model = null_model(y);
    const auto pts = grid_points(support_interval(model.H, y));
    ASSERT_EQ(pts.size(), 100u);
    for (cplx z : pts) {
      const auto v = solve_companion_stieltjes(model, z);
      const cplx root = null_companion_stieltjes(y, z);
      EXPECT_LT(std::abs(v.s_under - root), 1e-10) << "y=" << y << " z=" << z;
      EXPECT_GT(v.s.imag() * z.imag(), 0.0);
      EXPECT_GT(v.s_under.imag() * z.imag(), 0.0);
      EXPECT_LT(std::abs(v.s_under - (-(1 - y) / z + y * v.s)), 1e-10);
      EXPECT_LE(v.residual, 1e-12 * std::max(1.0, std::abs(z)));
      EXPECT_LT(fundamental_residual(model, v), 1e-12 * std::max(1.0, std::abs(v.s)) * 10);
    }
  }
}

TEST(CompanionSolver, ConjugationSymmetry) {
  const MPModel model{0.4, SpectralMeasure::make({1.0, 3.0}, {0.5, 0.5})};
  for (cplx z : {cplx(0.5, 0.2), cplx(2.0, 1.0), cplx(-1.0, 0.3)}) {
    const auto a = solve_companion_stieltjes(model, z);
    const auto b = solve_companion_stieltjes(model, std::conj(z));
    EXPECT_EQ(b.s_under, std::conj(a.s_under));
    EXPECT_EQ(b.s, std::conj(a.s));
  }
}

TEST(CompanionSolver, ScaledIdentity) {
  const double c = 2.5;
  for (double y : {0.3, 1.7}) {
    const MPModel model{y, SpectralMeasure::point_mass(c)};
    for (cplx z : {cplx(1.0, 0.5), cplx(4.0, 0.1), cplx(-2.0, 2.0)}) {
      const cplx got = solve_companion_stieltjes(model, z).s_under;
      const cplx expect = null_companion_stieltjes(y, z / c) / c;
      EXPECT_LT(std::abs(got - expect), 1e-10);
    }
  }
}

TEST(CompanionSolver, GeneralMeasureResiduals) {
  const MPModel model{0.6, SpectralMeasure::make({0.5, 1.0, 4.0}, {0.2, 0.5, 0.3})};
  const Interval iv = support_interval(model.H, model.y);
  for (const auto& nd : build_contour(iv, 0.2, 1.0, 32).nodes()) {
    const auto v = solve_companion_stieltjes(model, nd.z);
    EXPECT_GT(v.s.imag() * nd.z.imag(), 0.0);
    EXPECT_LE(v.residual, 1e-12 * std::max(1.0, std::abs(nd.z)));
    EXPECT_LT(fundamental_residual(model, v), 1e-11);
  }
}

TEST(CompanionSolver, RejectsRealAxis) {
  EXPECT_THROW(solve_companion_stieltjes(null_model(0.5), cplx(1.0, 0.0)), InvalidArgument);
}

TEST(CompanionSolver, ReportsNonConvergence) {
  SolverOptions opt;
  opt.max_iterations = 1;
  try {
    solve_companion_stieltjes(null_model(0.5), cplx(1.0, 1e-3), std::nullopt, opt);
    FAIL() << "expected a solver error";
  } catch (const SolverError& e) {
    EXPECT_GT(e.last_residual(), 0.0);
  }
}

TEST(CompanionSolver, HundredPointsUnderOneSecond) {
  const auto start = std::chrono::steady_clock::now();
  for (double y : {0.25, 0.5, 1.0, 2.0})
    for (cplx z : grid_points(support_interval(SpectralMeasure::point_mass(1.0), y)))
      (void)solve_companion_stieltjes(null_model(y), z);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_LT(secs, 1.0);
}

TEST(Density, OutsideSupportNearZero) {
  const auto model = null_model(0.25);
  for (double x : {0.1, 0.2, 2.3, 3.0}) EXPECT_LT(mp_density(model, x, 1e-6), 1e-3) << x;
  EXPECT_GT(mp_density(model, 1.25, 1e-6), 0.1);
}

TEST(Density, IntegratesToContinuousMass) {
  for (double y : {0.25, 2.0}) {
    const auto model = null_model(y);
    const double lo = (1 - std::sqrt(y)) * (1 - std::sqrt(y)), hi = (1 + std::sqrt(y)) * (1 + std::sqrt(y));
    const int N = 4000;
    double acc = 0.0;
    for (int i = 0; i < N; ++i) {
      const double x = lo + (hi - lo) * (i + 0.5) / N;
      acc += mp_density(model, x, 1e-9) * (hi - lo) / N;
    }
    // F^{y} puts 1 - 1/y at 0 when y > 1; the density of s carries the rest
    const double continuous = y > 1 ? 1.0 / y : 1.0;
    EXPECT_NEAR(acc, continuous * std::min(1.0, 1.0), 2e-3) << "y=" << y;
  }
}

TEST(SupportInterval, Examples) {
  const auto I = make_population(Identity{4});
  auto iv = support_interval(I, 0.25);
  EXPECT_NEAR(iv.lo, 0.25, 1e-15);
  EXPECT_NEAR(iv.hi, 2.25, 1e-15);
  EXPECT_EQ(support_interval(I, 1.0).lo, 0.0);
  EXPECT_EQ(support_interval(I, 3.0).lo, 0.0);
  const auto D = make_population(Diagonal{{1.0, 4.0}});
  iv = support_interval(D, 0.25);
  EXPECT_NEAR(iv.lo, 0.25, 1e-15);
  EXPECT_NEAR(iv.hi, 9.0, 1e-14);
}

TEST(BuildContour, Corners) {
  const Contour c = build_contour({0.25, 2.25}, 0.1, 1.0, 64);
  EXPECT_NEAR(c.x_l, 0.15, 1e-15);
  EXPECT_NEAR(c.x_r, 2.35, 1e-15);
  EXPECT_EQ(c.v0, 1.0);
  EXPECT_THROW(build_contour({0.05, 2.0}, 0.1, 1.0, 64, true), DomainError);
  EXPECT_THROW(build_contour({0.25, 2.25}, 0.0), InvalidArgument);
  // symmetric about the real axis: every node has a mirrored partner
  const auto nodes = c.nodes();
  for (const auto& nd : nodes) {
    bool found = false;
    for (const auto& other : nodes)
      if (std::abs(other.z - std::conj(nd.z)) < 1e-13) found = true;
    EXPECT_TRUE(found);
  }
  // positively oriented: the contour integral of 1/(z - 1) is 2 pi i
  cplx acc = 0;
  for (const auto& nd : nodes) acc += nd.dz / (nd.z - 1.0);
  EXPECT_NEAR(std::abs(acc - cplx(0, 2 * std::numbers::pi)), 0.0, 1e-10);
}

TEST(MpIntegral, NullCaseMoments) {
  for (double y : {0.25, 0.5, 2.0}) {
    const auto model = null_model(y);
    const Contour c = default_contour(support_interval(model.H, y));
    EXPECT_NEAR(mp_integral(model, TestFunction::parse("x"), c).value, 1.0, 1e-8);
    EXPECT_NEAR(mp_integral(model, TestFunction::parse("x^2"), c).value, 1.0 + y, 1e-8);
    EXPECT_NEAR(mp_integral(model, TestFunction::parse("x^3"), c).value, mp_moment_null(y, 3), 1e-8);
  }
  const auto model = null_model(0.5);
  const Contour c = default_contour(support_interval(model.H, 0.5), true);
  EXPECT_NEAR(mp_integral(model, TestFunction::logarithm(), c).value, -0.30685, 1e-5);
  EXPECT_NEAR(mp_integral(model, TestFunction::logarithm(), c).value, mp_log_moment_null(0.5), 1e-8);
}

TEST(MpIntegral, FirstMomentEqualsPopulationMean) {
  const std::vector<MPModel> models{
      {0.3, SpectralMeasure::make({0.5, 2.0}, {0.5, 0.5})},
      {1.5, SpectralMeasure::make({1.0, 3.0, 4.0}, {0.2, 0.3, 0.5})},
      {0.8, SpectralMeasure::point_mass(2.0)}};
  for (const auto& m : models) {
    const Contour c = default_contour(support_interval(m.H, m.y));
    EXPECT_NEAR(mp_integral(m, TestFunction::parse("x"), c).value, m.H.mean(), 1e-8);
  }
}

TEST(MpIntegral, AtomHandlingAboveOne) {
  // with the contour right of the origin the atom (1 - 1/y) f(0) is added explicitly
  const double y = 2.0;
  const auto model = null_model(y);
  const double lo = (1 - std::sqrt(y)) * (1 - std::sqrt(y));
  const Contour right{0.5 * lo, 6.5, 1.0, 512};
  const Contour around{-0.3, 6.5, 1.0, 512};
  const auto f = TestFunction::parse("poly:2,1,1");
  const double expect = 2.0 + 1.0 + (1.0 + y);
  EXPECT_NEAR(mp_integral(model, f, right).value, expect, 1e-8);
  EXPECT_NEAR(mp_integral(model, f, around).value, expect, 1e-8);
}

TEST(MpIntegral, AgreesWithDensityQuadrature) {
  const MPModel m{0.3, SpectralMeasure::make({1.0, 2.0}, {0.5, 0.5})};
  const Interval iv = support_interval(m.H, m.y);
  const auto f = TestFunction::parse("poly:0.5,-1,0.25");
  const double via_contour = mp_integral(m, f, default_contour(iv)).value;
  const int N = 6000;
  double acc = 0.0;
  for (int i = 0; i < N; ++i) {
    const double x = iv.lo + (iv.hi - iv.lo) * (i + 0.5) / N;
    acc += f(x) * mp_density(m, x, 1e-10) * (iv.hi - iv.lo) / N;
  }
  EXPECT_NEAR(via_contour, acc, 1e-5);
}

TEST(MpIntegral, NodeDoublingStable) {
  const auto model = null_model(0.25);
  const Contour c = default_contour(support_interval(model.H, 0.25));
  const auto a = mp_integral(model, TestFunction::parse("x^2"), c);
  const auto b = mp_integral(model, TestFunction::parse("x^2"), c.with_nodes(2 * c.nodes_per_side));
  EXPECT_LT(std::abs(a.value - b.value), 1e-8);
  EXPECT_LT(a.error, 1e-8);
}

TEST(MpIntegral, LogDomainErrors) {
  EXPECT_THROW(mp_integral(null_model(0.5), TestFunction::logarithm(), Contour{-0.1, 3.5, 1.0, 64}), DomainError);
  EXPECT_THROW(mp_integral(null_model(2.0), TestFunction::logarithm(), Contour{0.01, 6.5, 1.0, 64}), DomainError);
}

TEST(Centering, ClosedFormsForIdentity) {
  const auto H = SpectralMeasure::point_mass(1.0);
  EXPECT_NEAR(centering_difference(50, 100, H, H, TestFunction::parse("x")), 1.0, 1e-12);
  EXPECT_NEAR(centering_difference(50, 100, H, H, TestFunction::parse("x^2")), 1.99, 1e-12);
  EXPECT_NEAR(1.0 + 2.0 * 50 / 100, 2.0, 0.0);
  // log: p L(y) - (p-1) L(y') is log(51/100) + O(1/n)
  const double lc = centering_difference(50, 100, H, H, TestFunction::logarithm());
  EXPECT_NEAR(lc, std::log(0.51), 0.02);
  auto closed = [](int p, int n) {
    const double y = static_cast<double>(p) / n;
    return -p - n * std::log1p(-y) + p * std::log1p(-y);
  };
  EXPECT_NEAR(lc, closed(50, 100) - closed(49, 100), 1e-12);
}

TEST(Centering, ContourPathMatchesClosedFormAndGeneralSigma) {
  // the contour path reproduces the closed form when forced through it
  const auto H = SpectralMeasure::point_mass(1.0);
  const auto f = TestFunction::parse("x^2");
  const Contour c = default_contour(support_interval(H, 0.5));
  const double via_contour = 50 * mp_integral({0.5, H}, f, c, 1e-10).value - 49 * mp_integral({0.49, H}, f, c, 1e-10).value;
  EXPECT_NEAR(via_contour, 1.99, 1e-8);
  // general Sigma: f = x gives p mean(H_n) - (p-1) mean(H_nq) = Sigma_qq
  const auto cov = make_population(Toeplitz{0.5, 6});
  const double v = centering_difference(6, 12, cov.spectral_measure, cov.deleted_measure(2), TestFunction::parse("x"));
  EXPECT_NEAR(v, cov.sigma(1, 1).real(), 1e-8);
}

TEST(Centering, SingleDimension) {
  const auto H = SpectralMeasure::point_mass(2.0);
  EXPECT_NEAR(centering_difference(1, 10, H, std::nullopt, TestFunction::parse("x")), 2.0, 1e-12);
}

TEST(CauchyRecovery, EmpiricalSpectrumContourMatchesDirectSum) {
  // -(1/2 pi i) oint f(z) s_G(z) dz for the empirical spectral law G
  const auto cov = make_population(Toeplitz{0.3, 20});
  const MatrixXd X = sample_matrix_as<double>(make_entry_law(LawKind::gaussian), 20, 60, 4, 0);
  const auto eigs = eigenvalues(sample_covariance(cov, X));
  const Interval iv{eigs.front(), eigs.back()};
  for (const auto& f : {TestFunction::parse("x"), TestFunction::parse("x^2"), TestFunction::logarithm()}) {
    const Contour c = build_contour(iv, std::min(0.5 * iv.lo, 0.2), 1.0, 2048, f.is_log());
    cplx acc = 0.0;
    for (const auto& nd : c.nodes()) acc += f(nd.z) * stieltjes_esd(eigs, nd.z) * nd.dz;
    const double via_contour = (-acc / cplx(0, 2 * std::numbers::pi)).real();
    const double direct = lss(eigs, f) / eigs.size();
    EXPECT_NEAR(via_contour, direct, 1e-6 * std::max(1.0, std::abs(direct))) << f.description();
  }
}
