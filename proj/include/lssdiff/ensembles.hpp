#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "lssdiff/error.hpp"

namespace lssdiff {

using cplx = std::complex<double>;
using Eigen::MatrixXcd;
using Eigen::MatrixXd;
using Eigen::VectorXcd;
using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Entry laws
// ---------------------------------------------------------------------------

enum class Field { real, complex };

enum class LawKind { gaussian, rademacher, two_point, student_t, complex_gaussian };

/// Distribution of the i.i.d. standardized entries x_ij.
///
/// kappa is 2 for real laws and 1 for complex laws with E x^2 = 0; nu4 is the
/// analytic E|x|^4. Laws are only constructed through make_entry_law, which
/// guarantees mean 0, unit variance and a finite fifth moment.
struct EntryLaw {
  Field field = Field::real;
  LawKind kind = LawKind::gaussian;
  double p0 = 0.5;   // two_point success probability
  double df = 0.0;   // student_t degrees of freedom
  int kappa = 2;
  double nu4 = 3.0;
  bool fifth_moment_finite = true;

  bool is_complex() const { return field == Field::complex; }
  std::string name() const;
};

struct LawParams {
  Field field = Field::real;
  std::optional<double> p0;
  std::optional<double> df;
};

inline std::string to_string(LawKind kind) {
  switch (kind) {
    case LawKind::gaussian: return "gaussian";
    case LawKind::rademacher: return "rademacher";
    case LawKind::two_point: return "two_point";
    case LawKind::student_t: return "student_t";
    case LawKind::complex_gaussian: return "complex_gaussian";
  }
  return "?";
}

inline LawKind parse_law_kind(const std::string& s) {
  if (s == "gaussian") return LawKind::gaussian;
  if (s == "rademacher") return LawKind::rademacher;
  if (s == "two_point") return LawKind::two_point;
  if (s == "student_t") return LawKind::student_t;
  if (s == "complex_gaussian") return LawKind::complex_gaussian;
  throw InvalidArgument("unknown entry law kind '" + s + "'");
}

inline std::string EntryLaw::name() const {
  std::ostringstream os;
  os << to_string(kind);
  if (kind == LawKind::gaussian) os << (is_complex() ? "(complex)" : "(real)");
  if (kind == LawKind::two_point) os << "(p0=" << p0 << ")";
  if (kind == LawKind::student_t) os << "(df=" << df << ")";
  return os.str();
}

/// Fourth moment of the standardized two-point law (B - p0)/sqrt(p0(1-p0)).
inline double two_point_nu4(double p0) {
  return (1.0 - 3.0 * p0 + 3.0 * p0 * p0) / (p0 * (1.0 - p0));
}

inline EntryLaw make_entry_law(LawKind kind, const LawParams& params = {}) {
  EntryLaw law;
  law.kind = kind;
  law.field = params.field;
  if (kind == LawKind::complex_gaussian) law.field = Field::complex;
  if (law.field == Field::complex && kind != LawKind::gaussian &&
      kind != LawKind::complex_gaussian) {
    throw InvalidArgument("entry law " + to_string(kind) + " is real-valued only");
  }
  law.kappa = law.is_complex() ? 1 : 2;

  switch (kind) {
    case LawKind::gaussian:
    case LawKind::complex_gaussian:
      law.nu4 = law.is_complex() ? 2.0 : 3.0;
      break;
    case LawKind::rademacher:
      law.nu4 = 1.0;
      break;
    case LawKind::two_point: {
      const double p0 = params.p0.value_or(0.5);
      if (!(p0 > 0.0 && p0 < 1.0)) {
        throw InvalidArgument("two_point law requires 0 < p0 < 1, got " +
                              std::to_string(p0));
      }
      law.p0 = p0;
      law.nu4 = two_point_nu4(p0);
      break;
    }
    case LawKind::student_t: {
      if (!params.df) throw InvalidArgument("student_t law requires df");
      const double df = *params.df;
      law.df = df;
      law.fifth_moment_finite = df > 5.0;
      if (!law.fifth_moment_finite) {
        throw InvalidArgument(
            "student_t with df=" + std::to_string(df) +
            ": the entries need a finite fifth moment "
            "(requires df > 5)");
      }
      // standardized to unit variance: E x^4 = 3 (df-2)/(df-4)
      law.nu4 = 3.0 * (df - 2.0) / (df - 4.0);
      break;
    }
  }
  return law;
}

struct LawMoments {
  int kappa;
  double nu4;
  bool fifth_ok;
};

inline LawMoments law_moments(const EntryLaw& law) {
  return {law.kappa, law.nu4, law.fifth_moment_finite};
}

// ---------------------------------------------------------------------------
// Seeding and sampling
// ---------------------------------------------------------------------------

/// Engine for one replicate. The stream depends only on (seed, replicate),
/// never on which worker draws it.
inline std::mt19937_64 replicate_engine(std::uint64_t seed, std::uint64_t replicate) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(replicate & 0xffffffffu),
                    static_cast<std::uint32_t>(replicate >> 32), 0x6c737364u};
  return std::mt19937_64(seq);
}

/// Draws one standardized scalar from a real law.
class RealEntrySampler {
 public:
  explicit RealEntrySampler(const EntryLaw& law)
      : law_(law),
        t_(law.kind == LawKind::student_t ? law.df : 10.0),
        t_scale_(law.kind == LawKind::student_t ? std::sqrt((law.df - 2.0) / law.df) : 1.0),
        tp_hi_(law.kind == LawKind::two_point ? (1.0 - law.p0) / std::sqrt(law.p0 * (1.0 - law.p0)) : 0.0),
        tp_lo_(law.kind == LawKind::two_point ? -law.p0 / std::sqrt(law.p0 * (1.0 - law.p0)) : 0.0) {}

  template <class Engine>
  double operator()(Engine& eng) {
    switch (law_.kind) {
      case LawKind::gaussian:
      case LawKind::complex_gaussian:
        return normal_(eng);
      case LawKind::rademacher:
        return (eng() >> 63) ? 1.0 : -1.0;
      case LawKind::two_point:
        return uniform_(eng) < law_.p0 ? tp_hi_ : tp_lo_;
      case LawKind::student_t:
        return t_scale_ * t_(eng);
    }
    return 0.0;
  }

 private:
  EntryLaw law_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
  std::student_t_distribution<double> t_;
  double t_scale_;
  double tp_hi_;
  double tp_lo_;
};

/// p x n data matrix; real laws give a real matrix, complex laws a complex one.
using DataMatrix = std::variant<MatrixXd, MatrixXcd>;

/// Typed sampler. Entries are filled column by column; complex entries draw
/// the real part before the imaginary part.
template <class Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> sample_matrix_as(
    const EntryLaw& law, int p, int n, std::uint64_t seed, std::uint64_t replicate) {
  if (p < 1 || n < 1) throw InvalidArgument("sample_matrix: p and n must be >= 1");
  auto eng = replicate_engine(seed, replicate);
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> X(p, n);
  if (law.is_complex()) {
    if constexpr (std::is_same_v<Scalar, double>) {
      throw InvalidArgument("sample_matrix_as<double>: law " + law.name() + " is complex");
    } else {
      std::normal_distribution<double> normal(0.0, std::sqrt(0.5));
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < p; ++i) {
          const double re = normal(eng);
          const double im = normal(eng);
          X(i, j) = Scalar(re, im);
        }
    }
  } else {
    RealEntrySampler draw(law);
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < p; ++i) X(i, j) = Scalar(draw(eng));
  }
  return X;
}

inline DataMatrix sample_matrix(const EntryLaw& law, int p, int n, std::uint64_t seed,
                                std::uint64_t replicate) {
  if (law.is_complex()) return sample_matrix_as<cplx>(law, p, n, seed, replicate);
  return sample_matrix_as<double>(law, p, n, seed, replicate);
}

// ---------------------------------------------------------------------------
// Spectral measures and population covariance models
// ---------------------------------------------------------------------------

/// Discrete probability measure on [0, inf): sorted atoms with weights summing to 1.
struct SpectralMeasure {
  std::vector<double> atoms;
  std::vector<double> weights;

  /// Uniform weights 1/p on the given eigenvalues; exact duplicates merged.
  static SpectralMeasure from_eigenvalues(std::vector<double> eigs) {
    if (eigs.empty()) throw InvalidArgument("spectral measure needs at least one atom");
    std::sort(eigs.begin(), eigs.end());
    SpectralMeasure m;
    const double w = 1.0 / static_cast<double>(eigs.size());
    for (double e : eigs) {
      if (!m.atoms.empty() && m.atoms.back() == e) {
        m.weights.back() += w;
      } else {
        m.atoms.push_back(e);
        m.weights.push_back(w);
      }
    }
    return m;
  }

  static SpectralMeasure make(std::vector<double> atoms, std::vector<double> weights) {
    SpectralMeasure m{std::move(atoms), std::move(weights)};
    m.validate();
    return m;
  }

  static SpectralMeasure point_mass(double c) { return make({c}, {1.0}); }

  void validate() const {
    if (atoms.empty() || atoms.size() != weights.size())
      throw InvalidArgument("spectral measure: atoms and weights must be non-empty and of equal length");
    double total = 0.0;
    for (std::size_t i = 0; i < atoms.size(); ++i) {
      if (!(atoms[i] >= 0.0) || !std::isfinite(atoms[i]))
        throw InvalidArgument("spectral measure: atoms must be finite and >= 0");
      if (!(weights[i] >= 0.0)) throw InvalidArgument("spectral measure: negative weight");
      if (i > 0 && atoms[i] < atoms[i - 1])
        throw InvalidArgument("spectral measure: atoms must be sorted ascending");
      total += weights[i];
    }
    if (std::abs(total - 1.0) > 1e-12)
      throw InvalidArgument("spectral measure: weights sum to " + std::to_string(total));
  }

  double min_atom() const { return atoms.front(); }
  double max_atom() const { return atoms.back(); }
  bool is_point_mass() const { return atoms.size() == 1; }

  double mean() const {
    double m = 0.0;
    for (std::size_t i = 0; i < atoms.size(); ++i) m += weights[i] * atoms[i];
    return m;
  }
};

struct Identity { int p; };
struct Diagonal { std::vector<double> values; };
struct Toeplitz { double rho; int p; };
struct Explicit { MatrixXcd matrix; };

using PopulationSpec = std::variant<Identity, Diagonal, Toeplitz, Explicit>;

/// Population covariance Sigma with its Hermitian square root and spectrum.
struct CovModel {
  int p = 0;
  MatrixXcd sigma;
  MatrixXcd sigma_sqrt;
  VectorXd eigenvalues;    // ascending
  MatrixXcd eigenvectors;  // columns match eigenvalues
  SpectralMeasure spectral_measure;
  std::string label;
  bool real_valued = true;
  bool identity = false;
  bool diagonal = false;

  /// Spectral measure of Sigma with row and column q (1-based) deleted.
  SpectralMeasure deleted_measure(int q) const;
  /// Sigma with row and column q (1-based) deleted.
  MatrixXcd deleted_sigma(int q) const;
};

namespace detail {

inline MatrixXcd drop_rowcol(const MatrixXcd& M, int q) {
  const Eigen::Index p = M.rows();
  const Eigen::Index k = q - 1;
  MatrixXcd out(p - 1, p - 1);
  for (Eigen::Index i = 0, r = 0; i < p; ++i) {
    if (i == k) continue;
    for (Eigen::Index j = 0, c = 0; j < p; ++j) {
      if (j == k) continue;
      out(r, c++) = M(i, j);
    }
    ++r;
  }
  return out;
}

inline void check_index(int q, Eigen::Index p, const char* who) {
  if (q < 1 || q > p) {
    throw InvalidArgument(std::string(who) + ": index q=" + std::to_string(q) +
                          " outside [1, " + std::to_string(p) + "]");
  }
}

}  // namespace detail

inline SpectralMeasure CovModel::deleted_measure(int q) const {
  detail::check_index(q, p, "deleted_measure");
  if (p == 1) throw InvalidArgument("deleted_measure: cannot delete from a 1x1 matrix");
  if (identity) return SpectralMeasure::point_mass(1.0);
  if (diagonal) {
    std::vector<double> d;
    for (int i = 0; i < p; ++i)
      if (i != q - 1) d.push_back(sigma(i, i).real());
    return SpectralMeasure::from_eigenvalues(std::move(d));
  }
  Eigen::SelfAdjointEigenSolver<MatrixXcd> es(deleted_sigma(q), Eigen::EigenvaluesOnly);
  std::vector<double> e(es.eigenvalues().data(), es.eigenvalues().data() + p - 1);
  for (double& v : e) v = std::max(v, 0.0);
  return SpectralMeasure::from_eigenvalues(std::move(e));
}

inline MatrixXcd CovModel::deleted_sigma(int q) const {
  detail::check_index(q, p, "deleted_sigma");
  return detail::drop_rowcol(sigma, q);
}

/// Builds a validated CovModel. Sigma must be Hermitian (relative 1e-12) and
/// PSD; eigenvalues in [-1e-10 ||Sigma||, 0) are clamped to 0.
inline CovModel make_population(const PopulationSpec& spec) {
  CovModel cov;
  MatrixXcd S;
  std::visit(
      [&](const auto& s) {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, Identity>) {
          if (s.p < 1) throw InvalidArgument("identity population needs p >= 1");
          S = MatrixXcd::Identity(s.p, s.p);
          cov.label = "identity(" + std::to_string(s.p) + ")";
          cov.identity = true;
          cov.diagonal = true;
        } else if constexpr (std::is_same_v<T, Diagonal>) {
          if (s.values.empty()) throw InvalidArgument("diagonal population needs values");
          const int p = static_cast<int>(s.values.size());
          S = MatrixXcd::Zero(p, p);
          for (int i = 0; i < p; ++i) S(i, i) = s.values[i];
          cov.label = "diagonal(" + std::to_string(p) + ")";
          cov.diagonal = true;
          cov.identity = std::all_of(s.values.begin(), s.values.end(),
                                     [](double v) { return v == 1.0; });
        } else if constexpr (std::is_same_v<T, Toeplitz>) {
          if (s.p < 1) throw InvalidArgument("toeplitz population needs p >= 1");
          if (!(std::abs(s.rho) < 1.0)) throw InvalidArgument("toeplitz population needs |rho| < 1");
          S.resize(s.p, s.p);
          for (int i = 0; i < s.p; ++i)
            for (int j = 0; j < s.p; ++j) S(i, j) = std::pow(s.rho, std::abs(i - j));
          std::ostringstream os;
          os << "toeplitz(" << s.rho << "," << s.p << ")";
          cov.label = os.str();
          cov.diagonal = (s.rho == 0.0) || s.p == 1;
          cov.identity = cov.diagonal;
        } else {
          if (s.matrix.rows() < 1 || s.matrix.rows() != s.matrix.cols())
            throw InvalidArgument("explicit population must be a non-empty square matrix");
          S = s.matrix;
          cov.label = "explicit(" + std::to_string(S.rows()) + ")";
        }
      },
      spec);

  cov.p = static_cast<int>(S.rows());
  const double scale = std::max(S.norm(), 1e-300);
  const double asym = (S - S.adjoint()).norm();
  if (asym > 1e-12 * scale) {
    std::ostringstream os;
    os << "population matrix is not Hermitian: ||S - S*|| / ||S|| = " << asym / scale;
    throw InvalidArgument(os.str());
  }
  S = 0.5 * (S + S.adjoint()).eval();
  cov.sigma = S;
  cov.real_valued = S.imag().cwiseAbs().maxCoeff() == 0.0;
  if (!cov.diagonal) {
    bool diag = true;
    for (int i = 0; i < cov.p && diag; ++i)
      for (int j = 0; j < cov.p; ++j)
        if (i != j && S(i, j) != cplx(0.0)) { diag = false; break; }
    cov.diagonal = diag;
  }

  Eigen::SelfAdjointEigenSolver<MatrixXcd> es(S);
  VectorXd ev = es.eigenvalues();
  const double spectral_norm = std::max(std::abs(ev(0)), std::abs(ev(cov.p - 1)));
  if (ev(0) < -1e-10 * spectral_norm) {
    std::ostringstream os;
    os << "population matrix is indefinite: eigenvalue " << ev(0) << " < 0";
    throw InvalidArgument(os.str());
  }
  for (int i = 0; i < cov.p; ++i) ev(i) = std::max(ev(i), 0.0);
  if (cov.identity) {
    ev.setOnes();
    cov.eigenvectors = MatrixXcd::Identity(cov.p, cov.p);
    cov.sigma_sqrt = MatrixXcd::Identity(cov.p, cov.p);
  } else if (cov.diagonal) {
    // exact square root and eigenbasis for diagonal input
    std::vector<int> order(cov.p);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return S(a, a).real() < S(b, b).real(); });
    cov.eigenvectors = MatrixXcd::Zero(cov.p, cov.p);
    cov.sigma_sqrt = MatrixXcd::Zero(cov.p, cov.p);
    for (int k = 0; k < cov.p; ++k) {
      const int i = order[k];
      ev(k) = std::max(S(i, i).real(), 0.0);
      cov.eigenvectors(i, k) = 1.0;
      cov.sigma_sqrt(i, i) = std::sqrt(ev(k));
    }
  } else {
    cov.eigenvectors = es.eigenvectors();
    cov.sigma_sqrt = cov.eigenvectors * ev.cwiseSqrt().asDiagonal() * cov.eigenvectors.adjoint();
    cov.sigma_sqrt = 0.5 * (cov.sigma_sqrt + cov.sigma_sqrt.adjoint()).eval();
  }
  cov.eigenvalues = ev;
  cov.spectral_measure =
      SpectralMeasure::from_eigenvalues(std::vector<double>(ev.data(), ev.data() + cov.p));
  return cov;
}

}  // namespace lssdiff
