#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numeric>

#include "lssdiff/ensembles.hpp"

using namespace lssdiff;

namespace {

struct Moments {
  cplx m1, m2;           // E x, E x^2
  double abs2, abs4;     // E|x|^2, E|x|^4
  double se_abs2, se_abs4;
};

Moments empirical_moments(const EntryLaw& law, int draws) {
  const int p = 1000, n = draws / p;
  Moments mo{};
  double s2 = 0, s4 = 0, s8 = 0;
  cplx s1 = 0, sq = 0;
  if (law.is_complex()) {
    MatrixXcd X = sample_matrix_as<cplx>(law, p, n, 99, 0);
    for (Eigen::Index i = 0; i < X.size(); ++i) {
      const cplx x = X.data()[i];
      const double a2 = std::norm(x);
      s1 += x;
      sq += x * x;
      s2 += a2;
      s4 += a2 * a2;
      s8 += a2 * a2 * a2 * a2;
    }
  } else {
    MatrixXd X = sample_matrix_as<double>(law, p, n, 99, 0);
    for (Eigen::Index i = 0; i < X.size(); ++i) {
      const double x = X.data()[i], a2 = x * x;
      s1 += x;
      sq += a2;
      s2 += a2;
      s4 += a2 * a2;
      s8 += a2 * a2 * a2 * a2;
    }
  }
  const double N = static_cast<double>(p) * n;
  mo.m1 = s1 / N;
  mo.m2 = sq / N;
  mo.abs2 = s2 / N;
  mo.abs4 = s4 / N;
  mo.se_abs2 = std::sqrt((mo.abs4 - mo.abs2 * mo.abs2) / N);
  mo.se_abs4 = std::sqrt((s8 / N - mo.abs4 * mo.abs4) / N);
  return mo;
}

}  // namespace

TEST(EntryLaw, GaussianRealMoments) {
  const auto law = make_entry_law(LawKind::gaussian);
  EXPECT_EQ(law.kappa, 2);
  EXPECT_DOUBLE_EQ(law.nu4, 3.0);
  const auto m = law_moments(law);
  EXPECT_EQ(m.kappa, 2);
  EXPECT_DOUBLE_EQ(m.nu4, 3.0);
  EXPECT_TRUE(m.fifth_ok);
}

TEST(EntryLaw, RademacherMoments) {
  const auto law = make_entry_law(LawKind::rademacher);
  EXPECT_EQ(law.kappa, 2);
  EXPECT_DOUBLE_EQ(law.nu4, 1.0);
}

TEST(EntryLaw, TwoPointFourthMomentByEnumeration) {
  const double p0 = 0.2;
  const auto law = make_entry_law(LawKind::two_point, {Field::real, p0, std::nullopt});
  // enumerate the two outcomes of (B - p0)/sqrt(p0(1-p0))
  const double sd = std::sqrt(p0 * (1 - p0));
  const double hi = (1 - p0) / sd, lo = -p0 / sd;
  const double nu4 = p0 * std::pow(hi, 4) + (1 - p0) * std::pow(lo, 4);
  EXPECT_NEAR(nu4, 3.25, 1e-12);
  EXPECT_NEAR(law.nu4, nu4, 1e-12);
  EXPECT_NEAR(law_moments(law).nu4, 3.25, 1e-12);
}

TEST(EntryLaw, ComplexGaussian) {
  const auto law = make_entry_law(LawKind::complex_gaussian);
  EXPECT_TRUE(law.is_complex());
  EXPECT_EQ(law.kappa, 1);
  EXPECT_DOUBLE_EQ(law.nu4, 2.0);
  const auto g = make_entry_law(LawKind::gaussian, {Field::complex, std::nullopt, std::nullopt});
  EXPECT_EQ(g.kappa, 1);
  EXPECT_DOUBLE_EQ(g.nu4, 2.0);
}

TEST(EntryLaw, StudentTValidation) {
  EXPECT_THROW(make_entry_law(LawKind::student_t, {Field::real, std::nullopt, 5.0}), InvalidArgument);
  EXPECT_THROW(make_entry_law(LawKind::student_t, {Field::real, std::nullopt, 4.0}), InvalidArgument);
  try {
    make_entry_law(LawKind::student_t, {Field::real, std::nullopt, 4.0});
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("fifth moment"), std::string::npos);
  }
  const auto t = make_entry_law(LawKind::student_t, {Field::real, std::nullopt, 8.0});
  EXPECT_TRUE(t.fifth_moment_finite);
  EXPECT_NEAR(t.nu4, 3.0 * 6.0 / 4.0, 1e-12);
}

TEST(EntryLaw, ParameterValidation) {
  EXPECT_THROW(make_entry_law(LawKind::two_point, {Field::real, 0.0, std::nullopt}), InvalidArgument);
  EXPECT_THROW(make_entry_law(LawKind::two_point, {Field::real, 1.0, std::nullopt}), InvalidArgument);
  EXPECT_THROW(make_entry_law(LawKind::rademacher, {Field::complex, std::nullopt, std::nullopt}), InvalidArgument);
  EXPECT_THROW(parse_law_kind("cauchy"), InvalidArgument);
}

class LawMomentTest : public ::testing::TestWithParam<int> {};

TEST_P(LawMomentTest, EmpiricalMomentsWithinFiveStandardErrors) {
  std::vector<EntryLaw> laws{make_entry_law(LawKind::gaussian), make_entry_law(LawKind::rademacher),
                             make_entry_law(LawKind::two_point, {Field::real, 0.2, std::nullopt}),
                             make_entry_law(LawKind::student_t, {Field::real, std::nullopt, 12.0}),
                             make_entry_law(LawKind::complex_gaussian)};
  const auto& law = laws[GetParam()];
  const int N = 1'000'000;
  const auto m = empirical_moments(law, N);
  const double se1 = 1.0 / std::sqrt(static_cast<double>(N));
  EXPECT_LT(std::abs(m.m1.real()), 5 * se1) << law.name();
  EXPECT_LT(std::abs(m.m1.imag()), 5 * se1) << law.name();
  if (m.se_abs2 > 0) EXPECT_LT(std::abs(m.abs2 - 1.0), 5 * m.se_abs2) << law.name();
  else EXPECT_NEAR(m.abs2, 1.0, 1e-12);
  // E x^2 = kappa - 1
  const double se_sq = std::sqrt(law.nu4 / N);
  EXPECT_LT(std::abs(m.m2.real() - (law.kappa - 1)), 5 * se_sq + (m.se_abs2 == 0 ? 1e-12 : 0)) << law.name();
  EXPECT_LT(std::abs(m.m2.imag()), 5 * se_sq) << law.name();
  if (m.se_abs4 > 0) EXPECT_LT(std::abs(m.abs4 - law.nu4), 5 * m.se_abs4) << law.name();
  else EXPECT_NEAR(m.abs4, law.nu4, 1e-12);
}

INSTANTIATE_TEST_SUITE_P(AllLaws, LawMomentTest, ::testing::Range(0, 5));

TEST(Sampling, DeterministicGivenSeedAndReplicate) {
  const auto law = make_entry_law(LawKind::gaussian);
  const MatrixXd a = sample_matrix_as<double>(law, 2, 3, 7, 0);
  const MatrixXd b = sample_matrix_as<double>(law, 2, 3, 7, 0);
  EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(double) * 6), 0);
  const MatrixXd c = sample_matrix_as<double>(law, 2, 3, 7, 1);
  EXPECT_NE((a - c).norm(), 0.0);
  const auto v = sample_matrix(law, 2, 3, 7, 0);
  EXPECT_TRUE(std::holds_alternative<MatrixXd>(v));
  EXPECT_EQ((std::get<MatrixXd>(v) - a).norm(), 0.0);
}

TEST(Sampling, RademacherSupport) {
  const auto law = make_entry_law(LawKind::rademacher);
  const MatrixXd X = sample_matrix_as<double>(law, 30, 40, 3, 5);
  for (Eigen::Index i = 0; i < X.size(); ++i) EXPECT_TRUE(X.data()[i] == 1.0 || X.data()[i] == -1.0);
}

TEST(Sampling, GrandMeanAcrossReplicates) {
  const auto law = make_entry_law(LawKind::gaussian);
  const int p = 100, n = 100, R = 10000;
  double total = 0.0;
  for (int r = 0; r < R; ++r) total += sample_matrix_as<double>(law, p, n, 11, r).sum();
  const double N = static_cast<double>(p) * n * R;
  EXPECT_LT(std::abs(total / N), 4.0 / std::sqrt(N));
}

TEST(Sampling, RejectsEmptyShape) {
  EXPECT_THROW(sample_matrix(make_entry_law(LawKind::gaussian), 0, 3, 1, 0), InvalidArgument);
}

TEST(Population, Identity) {
  const auto cov = make_population(Identity{3});
  EXPECT_TRUE(cov.sigma.isApprox(MatrixXcd::Identity(3, 3)));
  ASSERT_EQ(cov.spectral_measure.atoms.size(), 1u);
  EXPECT_DOUBLE_EQ(cov.spectral_measure.atoms[0], 1.0);
  EXPECT_DOUBLE_EQ(cov.spectral_measure.weights[0], 1.0);
}

TEST(Population, DiagonalSquareRoot) {
  const auto cov = make_population(Diagonal{{1.0, 4.0}});
  MatrixXcd expect = MatrixXcd::Zero(2, 2);
  expect(0, 0) = 1.0;
  expect(1, 1) = 2.0;
  EXPECT_EQ((cov.sigma_sqrt - expect).norm(), 0.0);
}

TEST(Population, ToeplitzTwoByTwo) {
  const auto cov = make_population(Toeplitz{0.5, 2});
  EXPECT_NEAR(cov.eigenvalues(0), 0.5, 1e-14);
  EXPECT_NEAR(cov.eigenvalues(1), 1.5, 1e-14);
}

TEST(Population, RejectsNonHermitianAndIndefinite) {
  MatrixXcd A(2, 2);
  A << 1.0, 0.5, 0.2, 1.0;
  EXPECT_THROW(make_population(Explicit{A}), InvalidArgument);
  MatrixXcd B(2, 2);
  B << 1.0, 2.0, 2.0, 1.0;  // eigenvalues -1, 3
  try {
    make_population(Explicit{B});
    FAIL() << "indefinite matrix accepted";
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("-1"), std::string::npos) << e.what();
  }
}

TEST(Population, ClampsTinyNegativeEigenvalues) {
  MatrixXcd A(2, 2);
  A << 1.0, 1.0, 1.0, 1.0 - 1e-13;  // smallest eigenvalue about -5e-14
  const auto cov = make_population(Explicit{A});
  EXPECT_GE(cov.eigenvalues(0), 0.0);
}

TEST(Population, InvariantsOnRandomMatrices) {
  std::mt19937_64 eng(5);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 20; ++trial) {
    const int p = 2 + trial % 9;
    MatrixXcd G(p, p);
    for (int i = 0; i < p; ++i)
      for (int j = 0; j < p; ++j) G(i, j) = cplx(nd(eng), trial % 2 ? nd(eng) : 0.0);
    const MatrixXcd S = G * G.adjoint() / p + 0.1 * MatrixXcd::Identity(p, p);
    const auto cov = make_population(Explicit{S});
    EXPECT_LT((cov.sigma - cov.sigma.adjoint()).norm(), 1e-12 * cov.sigma.norm());
    EXPECT_LT((cov.sigma_sqrt * cov.sigma_sqrt - cov.sigma).norm(), 1e-10 * cov.sigma.norm());
    double w = 0.0;
    for (double x : cov.spectral_measure.weights) w += x;
    EXPECT_NEAR(w, 1.0, 1e-12);
    EXPECT_TRUE(std::is_sorted(cov.spectral_measure.atoms.begin(), cov.spectral_measure.atoms.end()));
    EXPECT_EQ(cov.real_valued, trial % 2 == 0);
  }
}

TEST(Population, DeletedMeasure) {
  const auto cov = make_population(Diagonal{{1.0, 2.0, 4.0}});
  const auto del = cov.deleted_measure(2);
  ASSERT_EQ(del.atoms.size(), 2u);
  EXPECT_DOUBLE_EQ(del.atoms[0], 1.0);
  EXPECT_DOUBLE_EQ(del.atoms[1], 4.0);
  EXPECT_THROW(cov.deleted_measure(0), InvalidArgument);
  EXPECT_THROW(cov.deleted_measure(4), InvalidArgument);
}

TEST(SpectralMeasure, Validation) {
  EXPECT_THROW(SpectralMeasure::make({2.0, 1.0}, {0.5, 0.5}), InvalidArgument);
  EXPECT_THROW(SpectralMeasure::make({1.0}, {0.5}), InvalidArgument);
  EXPECT_THROW(SpectralMeasure::make({1.0, 2.0}, {1.0}), InvalidArgument);
  const auto m = SpectralMeasure::from_eigenvalues({3.0, 1.0, 1.0});
  ASSERT_EQ(m.atoms.size(), 2u);
  EXPECT_NEAR(m.weights[0], 2.0 / 3.0, 1e-15);
}
