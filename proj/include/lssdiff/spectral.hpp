#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <optional>
#include <sstream>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

#include "lssdiff/ensembles.hpp"
#include "lssdiff/error.hpp"
#include "lssdiff/mp_law.hpp"
#include "lssdiff/test_function.hpp"

namespace lssdiff {

template <class Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

namespace detail {

template <class Scalar>
Mat<Scalar> sigma_sqrt_as(const CovModel& cov) {
  if constexpr (std::is_same_v<Scalar, double>) {
    if (!cov.real_valued)
      throw InvalidArgument("real data with a complex population matrix: promote X to complex");
    return cov.sigma_sqrt.real();
  } else {
    return cov.sigma_sqrt;
  }
}

template <class Scalar>
Mat<Scalar> sigma_as(const CovModel& cov) {
  if constexpr (std::is_same_v<Scalar, double>) {
    if (!cov.real_valued)
      throw InvalidArgument("real data with a complex population matrix: promote X to complex");
    return cov.sigma.real();
  } else {
    return cov.sigma;
  }
}

template <class Scalar>
void check_data(const CovModel& cov, const Mat<Scalar>& X, const char* who) {
  if (X.rows() != cov.p) {
    std::ostringstream os;
    os << who << ": data has " << X.rows() << " rows but the population dimension is " << cov.p;
    throw InvalidArgument(os.str());
  }
  if (X.cols() < 1) throw InvalidArgument(std::string(who) + ": data needs n >= 1 columns");
}

template <class Scalar>
double hermitian_defect(const Mat<Scalar>& M) {
  const double scale = std::max(M.norm(), 1e-300);
  return (M - M.adjoint()).norm() / scale;
}

}  // namespace detail

/// (1/n) Sigma^{1/2} X X* Sigma^{1/2}, exactly Hermitian.
template <class Scalar>
Mat<Scalar> sample_covariance(const CovModel& cov, const Mat<Scalar>& X) {
  detail::check_data(cov, X, "sample_covariance");
  const double inv_n = 1.0 / static_cast<double>(X.cols());
  Mat<Scalar> out = Mat<Scalar>::Zero(cov.p, cov.p);
  if (cov.identity) {
    out.template selfadjointView<Eigen::Lower>().rankUpdate(X, inv_n);
  } else {
    const Mat<Scalar> Y = detail::sigma_sqrt_as<Scalar>(cov) * X;
    out.template selfadjointView<Eigen::Lower>().rankUpdate(Y, inv_n);
  }
  out = out.template selfadjointView<Eigen::Lower>();
  return out;
}

/// Companion matrix (1/n) X* Sigma X (n x n).
template <class Scalar>
Mat<Scalar> companion_covariance(const CovModel& cov, const Mat<Scalar>& X) {
  detail::check_data(cov, X, "companion_covariance");
  const double inv_n = 1.0 / static_cast<double>(X.cols());
  Mat<Scalar> Y = cov.identity ? X : Mat<Scalar>(detail::sigma_sqrt_as<Scalar>(cov) * X);
  Mat<Scalar> out = Mat<Scalar>::Zero(X.cols(), X.cols());
  out.template selfadjointView<Eigen::Lower>().rankUpdate(Y.adjoint(), inv_n);
  out = out.template selfadjointView<Eigen::Lower>();
  return out;
}

/// Principal submatrix without row and column q (1-based).
template <class Scalar>
Mat<Scalar> delete_rowcol(const Mat<Scalar>& M, int q) {
  if (M.rows() != M.cols()) throw InvalidArgument("delete_rowcol: matrix must be square");
  detail::check_index(q, M.rows(), "delete_rowcol");
  const Eigen::Index p = M.rows(), k = q - 1;
  Mat<Scalar> out(p - 1, p - 1);
  const Eigen::Index tail = p - 1 - k;
  out.topLeftCorner(k, k) = M.topLeftCorner(k, k);
  out.topRightCorner(k, tail) = M.topRightCorner(k, tail);
  out.bottomLeftCorner(tail, k) = M.bottomLeftCorner(tail, k);
  out.bottomRightCorner(tail, tail) = M.bottomRightCorner(tail, tail);
  return out;
}

/// Ascending eigenvalues of a Hermitian matrix.
template <class Scalar>
std::vector<double> eigenvalues(const Mat<Scalar>& M) {
  if (M.rows() != M.cols()) throw InvalidArgument("eigenvalues: matrix must be square");
  if (M.rows() == 0) return {};
  if (detail::hermitian_defect(M) > 1e-10) throw InvalidArgument("eigenvalues: matrix is not Hermitian");
  Eigen::SelfAdjointEigenSolver<Mat<Scalar>> es(M, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw Error("eigenvalues: Hermitian eigensolver failed");
  const auto& ev = es.eigenvalues();
  return std::vector<double>(ev.data(), ev.data() + ev.size());
}

/// sum_i f(lambda_i) = p int f dF^A.
inline double lss(const std::vector<double>& eigs, const TestFunction& f) {
  double acc = 0.0;
  for (double e : eigs) acc += f(e);
  return acc;
}

/// log det of a Hermitian positive definite matrix from its Cholesky factor.
template <class Scalar>
double log_det_hermitian(const Mat<Scalar>& M) {
  if (M.rows() == 0) return 0.0;
  Eigen::LLT<Mat<Scalar>> llt(M);
  if (llt.info() != Eigen::Success) throw SingularMatrixError("log-determinant: matrix is not positive definite");
  const auto L = llt.matrixLLT().diagonal().real();
  const double max_diag = L.maxCoeff();
  if (!(L.minCoeff() > 1e-7 * max_diag))
    throw SingularMatrixError("log-determinant: matrix is numerically singular");
  return 2.0 * L.array().log().sum();
}

/// Centering applied to the difference statistic.
///   finite_mp  p int f dF^{p/n,H_n} - (p-1) int f dF^{(p-1)/n,H_nq}
///   corollary  printed asymptotic null-case forms (Sigma = I only):
///              1, 1 + 2p/n, log((n-p+1)/n) for f = x, x^2, log
enum class Centering { finite_mp, corollary };

inline double corollary_centering(int p, int n, const TestFunction& f) {
  if (f.is_log()) return std::log(static_cast<double>(n - p + 1) / n);
  const auto& c = f.coefficients();
  auto is_monomial = [&](std::size_t k) {
    for (std::size_t i = 0; i < c.size(); ++i)
      if (c[i] != (i == k ? 1.0 : 0.0)) return false;
    return true;
  };
  if (c.size() == 2 && is_monomial(1)) return 1.0;
  if (c.size() == 3 && is_monomial(2)) return 1.0 + 2.0 * p / n;
  throw InvalidArgument("corollary centering is only defined for x, x^2 and log");
}

inline double centering_for(const CovModel& cov, int n, const TestFunction& f, int q,
                            Centering centering) {
  if (centering == Centering::corollary) {
    if (!cov.identity) throw InvalidArgument("corollary centering requires Sigma = I");
    return corollary_centering(cov.p, n, f);
  }
  std::optional<SpectralMeasure> del;
  if (cov.p > 1) del = cov.deleted_measure(q);
  return centering_difference(cov.p, n, cov.spectral_measure, del, f);
}

/// One realization of the difference statistic X_n(f, q).
struct DiffSample {
  double value = 0.0;
  int q = 1;
  TestFunction f;
  int p = 0;
  int n = 0;
  double centering_used = 0.0;
  double uncentered = 0.0;  // lss(Sigma_hat) - lss(Sigma_hat^{(-q)})
};

/// lss(S, f) - lss(S^{(-q)}, f) on one sample covariance. log uses
/// log-determinants; polynomials use eigenvalues.
template <class Scalar>
double lss_difference(const Mat<Scalar>& shat, const TestFunction& f, int q) {
  detail::check_index(q, shat.rows(), "lss_difference");
  const Mat<Scalar> del = delete_rowcol(shat, q);
  if (f.is_log()) return log_det_hermitian(shat) - log_det_hermitian(del);
  return lss(eigenvalues(shat), f) - lss(eigenvalues(del), f);
}

template <class Scalar>
DiffSample diff_statistic(const CovModel& cov, const Mat<Scalar>& X, const TestFunction& f, int q,
                          Centering centering = Centering::finite_mp) {
  detail::check_data(cov, X, "diff_statistic");
  detail::check_index(q, cov.p, "diff_statistic");
  const int n = static_cast<int>(X.cols());
  if (f.is_log() && cov.p > n) throw DomainError("diff_statistic: log statistic needs p <= n");
  const Mat<Scalar> shat = sample_covariance(cov, X);
  DiffSample d;
  d.q = q;
  d.f = f;
  d.p = cov.p;
  d.n = n;
  d.centering_used = centering_for(cov, n, f, q, centering);
  d.uncentered = lss_difference(shat, f, q);
  d.value = std::sqrt(static_cast<double>(n)) * (d.uncentered - d.centering_used);
  return d;
}

/// (1/p) sum_i 1/(lambda_i - z).
inline cplx stieltjes_esd(const std::vector<double>& eigs, cplx z) {
  if (z.imag() == 0.0) throw InvalidArgument("stieltjes_esd: z must be off the real axis");
  if (eigs.empty()) throw InvalidArgument("stieltjes_esd: empty spectrum");
  cplx acc = 0.0;
  for (double e : eigs) acc += 1.0 / (e - z);
  return acc / static_cast<double>(eigs.size());
}

/// One realization of the Stieltjes difference process M_{n,q}(z).
struct ProcessSample {
  cplx z;
  cplx value;
  int q = 1;
};

/// Theoretical transforms s0 (model (p/n, H_n)) and s0_q (model ((p-1)/n, H_nq))
/// entering the process centering.
struct ProcessCentering {
  cplx s0;
  cplx s0_q;
};

inline ProcessCentering process_centering(const CovModel& cov, int n, int q, cplx z) {
  ProcessCentering c{};
  c.s0 = solve_companion_stieltjes(MPModel{static_cast<double>(cov.p) / n, cov.spectral_measure}, z).s;
  if (cov.p > 1)
    c.s0_q = solve_companion_stieltjes(MPModel{static_cast<double>(cov.p - 1) / n, cov.deleted_measure(q)}, z).s;
  return c;
}

/// sqrt(n) { p (s_full - s0) - (p-1) (s_del - s0_q) } from eigenvalues.
inline cplx process_value(const std::vector<double>& eigs_full, const std::vector<double>& eigs_del,
                          int n, cplx z, const ProcessCentering& c) {
  const double p = static_cast<double>(eigs_full.size());
  cplx v = p * (stieltjes_esd(eigs_full, z) - c.s0);
  if (!eigs_del.empty()) v -= (p - 1.0) * (stieltjes_esd(eigs_del, z) - c.s0_q);
  return std::sqrt(static_cast<double>(n)) * v;
}

template <class Scalar>
ProcessSample stieltjes_diff_process(const CovModel& cov, const Mat<Scalar>& X, int q, cplx z) {
  detail::check_data(cov, X, "stieltjes_diff_process");
  detail::check_index(q, cov.p, "stieltjes_diff_process");
  if (z.imag() == 0.0) throw InvalidArgument("stieltjes_diff_process: z must be off the real axis");
  const int n = static_cast<int>(X.cols());
  const Mat<Scalar> shat = sample_covariance(cov, X);
  const auto full = eigenvalues(shat);
  std::vector<double> del;
  if (cov.p > 1) del = eigenvalues(Mat<Scalar>(delete_rowcol(shat, q)));
  return {z, process_value(full, del, n, z, process_centering(cov, n, q, z)), q};
}

}  // namespace lssdiff
