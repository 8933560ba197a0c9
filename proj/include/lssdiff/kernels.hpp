#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <optional>
#include <sstream>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "lssdiff/ensembles.hpp"
#include "lssdiff/error.hpp"
#include "lssdiff/mp_law.hpp"
#include "lssdiff/quadrature.hpp"
#include "lssdiff/test_function.hpp"

namespace lssdiff {

// ===========================================================================
// Dense reference forms. These build full p x p matrices and serve as the
// ground truth for the O(p) node formulas further down.
// ===========================================================================

/// H(z) = (I + s Sigma)^{-1}, its q-deleted analogue padded with a zero row
/// and column at q, and their difference.
struct ResolventPair {
  MatrixXcd H_full;
  MatrixXcd H_deleted;
  MatrixXcd H_delta;
};

namespace detail {

inline MatrixXcd inverse_checked(const MatrixXcd& A, const char* what) {
  Eigen::PartialPivLU<MatrixXcd> lu(A);
  const double rc = lu.rcond();
  if (!(rc > 1e-14)) {
    std::ostringstream os;
    os << what << " is numerically singular (reciprocal condition estimate " << rc << ")";
    throw SingularMatrixError(os.str());
  }
  return lu.inverse();
}

}  // namespace detail

inline MatrixXcd resolvent_full(const CovModel& cov, cplx s) {
  const MatrixXcd A = MatrixXcd::Identity(cov.p, cov.p) + s * cov.sigma;
  return detail::inverse_checked(A, "I + s Sigma");
}

inline MatrixXcd resolvent_deleted(const CovModel& cov, int q, cplx s) {
  detail::check_index(q, cov.p, "resolvent_deleted");
  MatrixXcd out = MatrixXcd::Zero(cov.p, cov.p);
  if (cov.p == 1) return out;
  const MatrixXcd A = MatrixXcd::Identity(cov.p - 1, cov.p - 1) + s * cov.deleted_sigma(q);
  const MatrixXcd inv = detail::inverse_checked(A, "I + s Sigma^(-q)");
  auto full_index = [q](Eigen::Index i) { return i < q - 1 ? i : i + 1; };
  for (Eigen::Index i = 0; i < cov.p - 1; ++i)
    for (Eigen::Index j = 0; j < cov.p - 1; ++j) out(full_index(i), full_index(j)) = inv(i, j);
  return out;
}

inline ResolventPair resolvents(const CovModel& cov, int q, cplx s) {
  ResolventPair r;
  r.H_full = resolvent_full(cov, s);
  r.H_deleted = resolvent_deleted(cov, q, s);
  r.H_delta = r.H_full - r.H_deleted;
  return r;
}

/// tr[Sigma H^D_{q1}(s1) Sigma H^D_{q2}(s2)] by direct multiplication.
inline cplx trace_product_delta(const CovModel& cov, int q1, int q2, cplx s1, cplx s2) {
  const MatrixXcd A = cov.sigma * resolvents(cov, q1, s1).H_delta;
  const MatrixXcd B = cov.sigma * resolvents(cov, q2, s2).H_delta;
  return (A * B).trace();
}

/// (H(s1) Sigma)_{l1 l2} - s2 (H(s1) Sigma H_{l2}(s2) Sigma)_{l1 l2}.
///
/// H^D_q factors as (e_q - s H_q Sigma e_q) (e_q^T H), so the coefficient in
/// front of the deleted resolvent is the transform at that resolvent's own
/// argument.
inline cplx g_functional(const CovModel& cov, int l1, int l2, cplx s1, cplx s2) {
  detail::check_index(l1, cov.p, "g_functional");
  detail::check_index(l2, cov.p, "g_functional");
  const MatrixXcd H1S = resolvent_full(cov, s1) * cov.sigma;
  const VectorXcd col = resolvent_deleted(cov, l2, s2) * cov.sigma.col(l2 - 1);
  const cplx tail = (H1S.row(l1 - 1) * col)(0);
  return H1S(l1 - 1, l2 - 1) - s2 * tail;
}

/// g_{q1 q2}(s1, s2) g_{q2 q1}(s2, s1), built from single entries.
inline cplx bracket_product(const CovModel& cov, int q1, int q2, cplx s1, cplx s2) {
  return g_functional(cov, q1, q2, s1, s2) * g_functional(cov, q2, q1, s2, s1);
}

/// sum_i (Sigma H^D_{l1}(s1))_ii (Sigma H^D_{l2}(s2))_ii.
inline cplx h_functional(const CovModel& cov, int l1, int l2, cplx s1, cplx s2) {
  const MatrixXcd A = cov.sigma * resolvents(cov, l1, s1).H_delta;
  const MatrixXcd B = cov.sigma * resolvents(cov, l2, s2).H_delta;
  return (A.diagonal().array() * B.diagonal().array()).sum();
}

/// (s1 s2 / n) tr[Sigma H(s1) Sigma H(s2)].
inline cplx a_kernel(const CovModel& cov, int n, cplx s1, cplx s2) {
  const MatrixXcd A = cov.sigma * resolvent_full(cov, s1);
  const MatrixXcd B = cov.sigma * resolvent_full(cov, s2);
  return s1 * s2 / static_cast<double>(n) * (A * B).trace();
}

// ===========================================================================
// Finite-n kernel model with O(p) per-pair evaluation
// ===========================================================================

/// Vectors describing H^D_q(z) = u r^T at one point z.
struct KernelNode {
  cplx z;
  cplx s;          // companion transform at z
  int q = 1;
  VectorXcd r;     // row q of H(z)
  VectorXcd w;     // Sigma u
  VectorXcd d;     // w .* r, the diagonal of Sigma H^D_q(z)
  VectorXcd e;     // lambda / (1 + s lambda) over the atoms of H_n
};

/// Population Sigma_n and sample size n. Companion transforms come from the
/// model (p/n, H_n).
class KernelModel {
 public:
  KernelModel(CovModel cov, int n) : cov_(std::move(cov)), n_(n), cache_(std::make_shared<Cache>()) {
    if (n < 1) throw InvalidArgument("KernelModel: n must be >= 1");
    mp_ = MPModel{static_cast<double>(cov_.p) / n, cov_.spectral_measure};
    mp_.validate();
    const auto& H = cov_.spectral_measure;
    atom_mass_.resize(static_cast<Eigen::Index>(H.atoms.size()));
    for (std::size_t j = 0; j < H.atoms.size(); ++j) atom_mass_(j) = cov_.p * H.weights[j];
  }

  const CovModel& cov() const { return cov_; }
  int n() const { return n_; }
  double y() const { return mp_.y; }
  const MPModel& mp() const { return mp_; }
  /// p times the atom weights of H_n.
  const VectorXd& atom_mass() const { return atom_mass_; }

  cplx s_under(cplx z, std::optional<cplx> warm = std::nullopt) const {
    return solve_companion_stieltjes(mp_, z, warm).s_under;
  }

  KernelNode node(cplx z, int q, std::optional<cplx> warm = std::nullopt) const {
    detail::check_index(q, cov_.p, "KernelModel::node");
    return node_from_s(z, s_under(z, warm), q);
  }

  KernelNode node_from_s(cplx z, cplx s, int q) const {
    const int p = cov_.p;
    KernelNode nd;
    nd.z = z;
    nd.s = s;
    nd.q = q;
    const auto& atoms = cov_.spectral_measure.atoms;
    nd.e.resize(static_cast<Eigen::Index>(atoms.size()));
    for (std::size_t j = 0; j < atoms.size(); ++j) nd.e(j) = atoms[j] / (1.0 + s * atoms[j]);
    if (cov_.diagonal) {
      // H is diagonal and the deleted part does not couple to q
      const double d = cov_.sigma(q - 1, q - 1).real();
      nd.r = VectorXcd::Zero(p);
      nd.w = VectorXcd::Zero(p);
      nd.r(q - 1) = 1.0 / (1.0 + s * d);
      nd.w(q - 1) = d;
      nd.d = nd.w.cwiseProduct(nd.r);
      return nd;
    }
    const VectorXd& lam = cov_.eigenvalues;
    const MatrixXcd& U = cov_.eigenvectors;
    VectorXcd coef(p);
    for (int k = 0; k < p; ++k) coef(k) = U(q - 1, k) / (1.0 + s * lam(k));
    nd.r = U.conjugate() * coef;

    VectorXcd u = VectorXcd::Zero(p);
    u(q - 1) = 1.0;
    if (p > 1) {
      const auto& B = basis(q);
      VectorXcd t(p - 1);
      for (int k = 0; k < p - 1; ++k) t(k) = B.c(k) / (1.0 + s * B.lam(k));
      const VectorXcd x = B.V * t;
      for (int i = 0, j = 0; i < p; ++i) {
        if (i == q - 1) continue;
        u(i) = -s * x(j++);
      }
    }
    nd.w = cov_.sigma * u;
    nd.d = nd.w.cwiseProduct(nd.r);
    return nd;
  }

  /// Nodes along a path, each solve warm-started from the previous one.
  std::vector<KernelNode> nodes(const std::vector<cplx>& zs, int q) const {
    std::vector<KernelNode> out;
    out.reserve(zs.size());
    std::optional<cplx> warm;
    for (cplx z : zs) {
      const auto sv = solve_companion_stieltjes(mp_, z, warm);
      warm = sv.s_under;
      out.push_back(node_from_s(z, sv.s_under, q));
    }
    return out;
  }

 private:
  struct DeletedBasis {
    VectorXd lam;   // eigenvalues of Sigma^(-q)
    MatrixXcd V;    // eigenvectors of Sigma^(-q)
    VectorXcd c;    // V^* (Sigma e_q with entry q removed)
  };
  struct Cache {
    std::mutex mutex;
    std::map<int, std::shared_ptr<const DeletedBasis>> bases;
  };

  const DeletedBasis& basis(int q) const {
    std::lock_guard<std::mutex> lock(cache_->mutex);
    auto it = cache_->bases.find(q);
    if (it != cache_->bases.end()) return *it->second;
    auto B = std::make_shared<DeletedBasis>();
    const MatrixXcd S = cov_.deleted_sigma(q);
    Eigen::SelfAdjointEigenSolver<MatrixXcd> es(S);
    B->lam = es.eigenvalues();
    B->V = es.eigenvectors();
    VectorXcd b(cov_.p - 1);
    for (int i = 0, j = 0; i < cov_.p; ++i)
      if (i != q - 1) b(j++) = cov_.sigma(i, q - 1);
    B->c = B->V.adjoint() * b;
    return *cache_->bases.emplace(q, std::move(B)).first->second;
  }

  CovModel cov_;
  int n_;
  MPModel mp_;
  VectorXd atom_mass_;
  std::shared_ptr<Cache> cache_;
};

/// a(z1, z2) from node data.
inline cplx a_kernel(const KernelModel& m, const KernelNode& n1, const KernelNode& n2) {
  cplx acc = 0.0;
  for (Eigen::Index j = 0; j < n1.e.size(); ++j) acc += m.atom_mass()(j) * n1.e(j) * n2.e(j);
  return n1.s * n2.s / static_cast<double>(m.n()) * acc;
}

/// tr[Sigma H^D_{q1}(z1) Sigma H^D_{q2}(z2)] = (r1 . w2)(r2 . w1).
inline cplx trace_product_delta(const KernelNode& n1, const KernelNode& n2) {
  return (n1.r.transpose() * n2.w)(0) * (n2.r.transpose() * n1.w)(0);
}

inline cplx h_functional(const KernelNode& n1, const KernelNode& n2) {
  return (n1.d.transpose() * n2.d)(0);
}

namespace detail {

inline cplx guarded_denominator(cplx a) {
  const cplx den = 1.0 - a;
  if (std::abs(den) < 1e-6) {
    std::ostringstream os;
    os << "|1 - a(z1,z2)| = " << std::abs(den) << " < 1e-6";
    throw DomainError(os.str());
  }
  return den;
}

}  // namespace detail

inline cplx pre_kernel_sigma(const KernelModel& m, const KernelNode& n1, const KernelNode& n2) {
  return n1.s * n2.s * trace_product_delta(n1, n2) / detail::guarded_denominator(a_kernel(m, n1, n2));
}

inline cplx pre_kernel_tau(const KernelNode& n1, const KernelNode& n2) {
  return n1.s * n2.s * h_functional(n1, n2);
}

inline cplx pre_kernel_sigma(const KernelModel& m, int q1, int q2, cplx z1, cplx z2) {
  return pre_kernel_sigma(m, m.node(z1, q1), m.node(z2, q2));
}

inline cplx pre_kernel_tau(const KernelModel& m, int q1, int q2, cplx z1, cplx z2) {
  return pre_kernel_tau(m.node(z1, q1), m.node(z2, q2));
}

// ===========================================================================
// Mixed partial derivatives
// ===========================================================================

struct FdOptions {
  double relative_step = 1e-4;  // initial step is this times max(1, |z|)
  double tolerance = 1e-6;      // relative change between successive halvings
  double step_floor = 1e-7;
};

struct MixedPartial {
  cplx value;
  double step1 = 0.0;
  double step2 = 0.0;
  double change = 0.0;  // |D(h/2) - D(h)|
};

/// d^2 K / dz1 dz2 by 4-point central differences with real steps, halving
/// the steps until two successive estimates agree, then one Richardson step.
inline MixedPartial mixed_partial(const std::function<cplx(cplx, cplx)>& K, cplx z1, cplx z2,
                                  const FdOptions& opt = {}) {
  double h1 = opt.relative_step * std::max(1.0, std::abs(z1));
  double h2 = opt.relative_step * std::max(1.0, std::abs(z2));
  if (std::abs(z1.imag()) < 10.0 * h1 || std::abs(z2.imag()) < 10.0 * h2)
    throw InvalidArgument("mixed_partial: points must be at least 10 steps off the real axis");
  auto stencil = [&](double a, double b) {
    return (K(z1 + a, z2 + b) - K(z1 + a, z2 - b) - K(z1 - a, z2 + b) + K(z1 - a, z2 - b)) / (4.0 * a * b);
  };
  cplx prev = stencil(h1, h2);
  while (true) {
    const double a = 0.5 * h1, b = 0.5 * h2;
    if (a < opt.step_floor || b < opt.step_floor) break;
    const cplx cur = stencil(a, b);
    const double change = std::abs(cur - prev);
    if (change <= opt.tolerance * std::abs(cur) || change == 0.0) {
      return {(4.0 * cur - prev) / 3.0, a, b, change};
    }
    prev = cur;
    h1 = a;
    h2 = b;
  }
  std::ostringstream os;
  os << "mixed partial at (" << z1 << ", " << z2 << ") did not stabilize above the step floor";
  throw ConvergenceError(os.str(), std::abs(prev));
}

/// Mixed partial of the sigma pre-kernel.
inline MixedPartial sigma2(const KernelModel& m, int q1, int q2, cplx z1, cplx z2, const FdOptions& opt = {}) {
  detail::check_index(q1, m.cov().p, "sigma2");
  detail::check_index(q2, m.cov().p, "sigma2");
  return mixed_partial([&](cplx a, cplx b) { return pre_kernel_sigma(m, q1, q2, a, b); }, z1, z2, opt);
}

/// Mixed partial of the tau pre-kernel s1 s2 h_{q1 q2}.
inline MixedPartial tau2(const KernelModel& m, int q1, int q2, cplx z1, cplx z2, const FdOptions& opt = {}) {
  detail::check_index(q1, m.cov().p, "tau2");
  detail::check_index(q2, m.cov().p, "tau2");
  return mixed_partial([&](cplx a, cplx b) { return pre_kernel_tau(m, q1, q2, a, b); }, z1, z2, opt);
}

// ===========================================================================
// Null case (Sigma = I) closed forms
// ===========================================================================

/// Derivative of the H = delta_1 companion transform by implicit
/// differentiation of z s^2 + (z + 1 - y) s + 1 = 0.
inline cplx null_stieltjes_derivative(double y, cplx z) {
  if (z.imag() == 0.0) throw InvalidArgument("null_stieltjes_derivative: z must be off the real axis");
  const cplx s = null_companion_stieltjes(y, z);
  const cplx den = 2.0 * z * s + z + 1.0 - y;
  if (std::abs(den) < 1e-12) throw DomainError("null_stieltjes_derivative: z is at a branch point");
  return -(s * s + s) / den;
}

inline cplx sigma2_null(double y, cplx z1, cplx z2) {
  const cplx s1 = null_companion_stieltjes(y, z1), s2 = null_companion_stieltjes(y, z2);
  const cplx d1 = null_stieltjes_derivative(y, z1), d2 = null_stieltjes_derivative(y, z2);
  const cplx den = 1.0 + s1 + s2 + (1.0 - y) * s1 * s2;
  return (1.0 + s1 + s2 + (1.0 + y) * s1 * s2) * d1 * d2 / (den * den * den);
}

inline cplx tau2_null(double y, cplx z1, cplx z2) {
  const cplx s1 = null_companion_stieltjes(y, z1), s2 = null_companion_stieltjes(y, z2);
  const cplx d1 = null_stieltjes_derivative(y, z1), d2 = null_stieltjes_derivative(y, z2);
  const cplx a = (1.0 + s1) * (1.0 + s2);
  return d1 * d2 / (a * a);
}

// ===========================================================================
// Process covariance
// ===========================================================================

/// kappa sigma2(z1, conj z2) + (nu4 - kappa - 1) tau2(z1, conj z2).
inline cplx process_cov(const KernelModel& m, int q1, int q2, cplx z1, cplx z2, double kappa, double nu4,
                        const FdOptions& opt = {}) {
  const cplx w = std::conj(z2);
  cplx v = kappa * sigma2(m, q1, q2, z1, w, opt).value;
  const double extra = nu4 - kappa - 1.0;
  if (extra != 0.0) v += extra * tau2(m, q1, q2, z1, w, opt).value;
  return v;
}

struct KernelEval {
  cplx z1, z2;
  int q1 = 1, q2 = 1;
  cplx a;       // a(z1, z2)
  cplx g;       // g_{q1 q2}(z1, z2)
  cplx h;       // h_{q1 q2}(z1, z2)
  cplx sigma2;  // at (z1, z2)
  cplx tau2;    // at (z1, z2)
  cplx cov;     // process covariance, i.e. at (z1, conj z2)
};

inline KernelEval eval_kernels(const KernelModel& m, int q1, int q2, cplx z1, cplx z2, double kappa,
                               double nu4, const FdOptions& opt = {}) {
  KernelEval k;
  k.z1 = z1;
  k.z2 = z2;
  k.q1 = q1;
  k.q2 = q2;
  const KernelNode n1 = m.node(z1, q1), n2 = m.node(z2, q2);
  k.a = a_kernel(m, n1, n2);
  k.g = (n1.r.transpose() * n2.w)(0);
  k.h = h_functional(n1, n2);
  k.sigma2 = sigma2(m, q1, q2, z1, z2, opt).value;
  k.tau2 = tau2(m, q1, q2, z1, z2, opt).value;
  k.cov = process_cov(m, q1, q2, z1, z2, kappa, nu4, opt);
  return k;
}

// ===========================================================================
// Contour covariance of two difference statistics
// ===========================================================================

struct LssCovOptions {
  double tolerance = 1e-6;       // node-doubling change, relative to max(1, |value|)
  double imag_tolerance = 1e-6;  // |Im| relative to max(1, |Re|)
  bool by_parts = false;         // integrate f' f' against the pre-kernels instead
  double relative_step = 1e-4;   // finite-difference step, times max(1, |z|)
};

struct LssCovResult {
  double value = 0.0;
  double sigma_part = 0.0;  // kappa term
  double tau_part = 0.0;    // (nu4 - kappa - 1) term
  double imag_part = 0.0;   // discarded imaginary residue
  double error = 0.0;       // node-doubling change
  int nodes_per_side = 0;   // of the reported (finer) evaluation
};

/// Nested pair for lss_cov: the inner contour from the default margin and the
/// outer one inflated by the same margin. Nodes per side are chosen so that
/// Gauss-Legendre panels are no longer than about 3 margins, which keeps
/// the near-singular diagonal z1 ~ conj(z2) resolved.
inline std::pair<Contour, Contour> lss_cov_contours(const CovModel& cov, int n, bool log_in_play,
                                                    double v0 = 1.0) {
  const Interval iv = support_interval(cov, static_cast<double>(cov.p) / n);
  const double margin = default_margin(iv, log_in_play);
  Contour inner = build_contour(iv, margin, v0, 16, log_in_play);
  Contour outer = inner.inflated(margin);
  const double longest = std::max(outer.x_r - outer.x_l, 2.0 * outer.v0);
  const int panels = std::max(2, static_cast<int>(std::ceil(longest / (3.0 * margin))));
  inner.nodes_per_side = outer.nodes_per_side = 16 * panels;
  return {inner, outer};
}

namespace detail {

inline bool strictly_inside(const Contour& a, const Contour& b) {
  return a.x_l > b.x_l && a.x_r < b.x_r && a.v0 < b.v0;
}

struct NodeBlock {
  Eigen::MatrixXcd R, W, D, E;  // one row per node
  Eigen::VectorXcd s;
};

inline NodeBlock to_block(const KernelModel& m, const std::vector<KernelNode>& nodes) {
  const int N = static_cast<int>(nodes.size());
  const int p = m.cov().p;
  const auto atoms = static_cast<Eigen::Index>(m.atom_mass().size());
  NodeBlock b;
  b.R.resize(N, p);
  b.W.resize(N, p);
  b.D.resize(N, p);
  b.E.resize(N, atoms);
  b.s.resize(N);
  for (int i = 0; i < N; ++i) {
    b.R.row(i) = nodes[i].r.transpose();
    b.W.row(i) = nodes[i].w.transpose();
    b.D.row(i) = nodes[i].d.transpose();
    b.E.row(i) = nodes[i].e.transpose();
    b.s(i) = nodes[i].s;
  }
  return b;
}

inline void compact_columns(std::vector<NodeBlock>& left, std::vector<NodeBlock>& right) {
  const Eigen::Index p = left.front().R.cols();
  std::vector<Eigen::Index> keep;
  for (Eigen::Index j = 0; j < p; ++j) {
    bool used = false;
    for (const auto* side : {&left, &right})
      for (const auto& b : *side)
        if (b.R.col(j).squaredNorm() != 0.0 || b.W.col(j).squaredNorm() != 0.0 || b.D.col(j).squaredNorm() != 0.0)
          used = true;
    if (used) keep.push_back(j);
  }
  if (static_cast<Eigen::Index>(keep.size()) == p) return;
  if (keep.empty()) keep.push_back(0);
  auto shrink = [&](Eigen::MatrixXcd& M) {
    Eigen::MatrixXcd out(M.rows(), static_cast<Eigen::Index>(keep.size()));
    for (std::size_t k = 0; k < keep.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = M.col(keep[k]);
    M = std::move(out);
  };
  for (auto* side : {&left, &right})
    for (auto& b : *side) {
      shrink(b.R);
      shrink(b.W);
      shrink(b.D);
    }
}

/// Pre-kernel matrices K(z1_j, w_k) for rows [row0, row0 + rows) of b1 against all of b2.
inline std::pair<Eigen::MatrixXcd, Eigen::MatrixXcd> pre_kernel_block(const KernelModel& m, const NodeBlock& b1,
                                                                      const NodeBlock& b2, Eigen::Index row0,
                                                                      Eigen::Index rows) {
  const Eigen::MatrixXcd A = b1.R.middleRows(row0, rows) * b2.W.transpose();
  const Eigen::MatrixXcd B = b1.W.middleRows(row0, rows) * b2.R.transpose();
  const Eigen::MatrixXcd Hs = b1.D.middleRows(row0, rows) * b2.D.transpose();
  const Eigen::MatrixXcd Aa = (b1.E.middleRows(row0, rows) * m.atom_mass().asDiagonal()) * b2.E.transpose();
  Eigen::MatrixXcd Ks(rows, A.cols()), Kt(rows, A.cols());
  const double inv_n = 1.0 / static_cast<double>(m.n());
  for (Eigen::Index k = 0; k < A.cols(); ++k)
    for (Eigen::Index j = 0; j < rows; ++j) {
      const cplx ss = b1.s(row0 + j) * b2.s(k);
      Ks(j, k) = ss * A(j, k) * B(j, k) / guarded_denominator(ss * inv_n * Aa(j, k));
      Kt(j, k) = ss * Hs(j, k);
    }
  return {Ks, Kt};
}

struct CovPieces {
  cplx sigma;
  cplx tau;
};

inline CovPieces lss_cov_once(const KernelModel& m, const TestFunction& f1, const TestFunction& f2, int q1,
                              int q2, const Contour& c1, const Contour& c2, const LssCovOptions& opt) {
  const auto p1 = c1.nodes();
  const auto p2 = c2.nodes();
  const auto N1 = static_cast<Eigen::Index>(p1.size());
  const auto N2 = static_cast<Eigen::Index>(p2.size());
  Eigen::VectorXcd alpha(N1), beta(N2);
  std::vector<cplx> z1(p1.size()), w2(p2.size());
  Eigen::VectorXd h1(N1), h2(N2);
  for (Eigen::Index j = 0; j < N1; ++j) {
    z1[j] = p1[j].z;
    h1(j) = opt.relative_step * std::max(1.0, std::abs(z1[j]));
    alpha(j) = (opt.by_parts ? f1.derivative(p1[j].z) : f1(p1[j].z)) * p1[j].dz;
  }
  for (Eigen::Index k = 0; k < N2; ++k) {
    w2[k] = std::conj(p2[k].z);
    h2(k) = opt.relative_step * std::max(1.0, std::abs(w2[k]));
    beta(k) = std::conj((opt.by_parts ? f2.derivative(p2[k].z) : f2(p2[k].z)) * p2[k].dz);
  }

  auto shifted = [&](const std::vector<cplx>& base, const Eigen::VectorXd& step, double factor, int q) {
    std::vector<cplx> zs(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) zs[i] = base[i] + factor * step(static_cast<Eigen::Index>(i));
    return to_block(m, m.nodes(zs, q));
  };

  // Stencil points: by parts needs the unshifted nodes only; otherwise the
  // four corners at steps h and h/2.
  const std::vector<double> factors = opt.by_parts ? std::vector<double>{0.0}
                                                   : std::vector<double>{1.0, -1.0, 0.5, -0.5};
  std::vector<NodeBlock> left, right;
  for (double f : factors) {
    left.push_back(shifted(z1, h1, f, q1));
    right.push_back(shifted(w2, h2, f, q2));
  }

  // Coordinates that vanish in every block (all but q for diagonal Sigma)
  // contribute nothing to the inner products.
  compact_columns(left, right);

  // Rows are processed in chunks so that memory stays O(chunk * N2).
  const Eigen::Index chunk = 256;
  cplx sigma = 0.0, tau = 0.0;
  for (Eigen::Index row0 = 0; row0 < N1; row0 += chunk) {
    const Eigen::Index rows = std::min(chunk, N1 - row0);
    Eigen::MatrixXcd S, T;
    if (opt.by_parts) {
      std::tie(S, T) = pre_kernel_block(m, left[0], right[0], row0, rows);
    } else {
      // D(h) and D(h/2), then one Richardson step
      std::array<Eigen::MatrixXcd, 2> Ds, Dt;
      for (int level = 0; level < 2; ++level) {
        const std::size_t plus = 2 * level, minus = 2 * level + 1;
        const std::array<std::pair<std::size_t, std::size_t>, 4> combos{
            {{plus, plus}, {plus, minus}, {minus, plus}, {minus, minus}}};
        const std::array<double, 4> sign{1.0, -1.0, -1.0, 1.0};
        Eigen::MatrixXcd accS = Eigen::MatrixXcd::Zero(rows, N2), accT = Eigen::MatrixXcd::Zero(rows, N2);
        for (int c = 0; c < 4; ++c) {
          auto [Ks, Kt] = pre_kernel_block(m, left[combos[c].first], right[combos[c].second], row0, rows);
          accS += sign[c] * Ks;
          accT += sign[c] * Kt;
        }
        const double f = factors[plus];
        const Eigen::MatrixXd scale = (4.0 * f * f) * (h1.segment(row0, rows) * h2.transpose());
        Ds[level] = accS.cwiseQuotient(scale.cast<cplx>());
        Dt[level] = accT.cwiseQuotient(scale.cast<cplx>());
      }
      S = (4.0 * Ds[1] - Ds[0]) / 3.0;
      T = (4.0 * Dt[1] - Dt[0]) / 3.0;
    }
    sigma += (alpha.segment(row0, rows).transpose() * S * beta)(0);
    tau += (alpha.segment(row0, rows).transpose() * T * beta)(0);
  }
  const double c = 1.0 / (4.0 * std::numbers::pi * std::numbers::pi);
  return {c * sigma, c * tau};
}

}  // namespace detail

/// Covariance of two difference statistics as the double contour integral
///   kappa/(4 pi^2) oint oint f1(z1) conj(f2(z2)) sigma2(z1, conj z2) d conj(z2) dz1
///   + (nu4 - kappa - 1)/(4 pi^2) times the tau2 analogue,
/// with sigma2, tau2 as mixed partials of the finite-n pre-kernels. The two
/// contours must be strictly nested. The error is the change between
/// nodes_per_side and twice as many nodes.
inline LssCovResult lss_cov(const KernelModel& m, const TestFunction& f1, const TestFunction& f2, int q1, int q2,
                            double kappa, double nu4, const Contour& contour1, const Contour& contour2,
                            const LssCovOptions& opt = {}) {
  const CovModel& cov = m.cov();
  detail::check_index(q1, cov.p, "lss_cov");
  detail::check_index(q2, cov.p, "lss_cov");
  if (!detail::strictly_inside(contour1, contour2) && !detail::strictly_inside(contour2, contour1))
    throw InvalidArgument("lss_cov: contours overlap; one must lie strictly inside the other");
  const Interval iv = support_interval(cov, m.y());
  for (const Contour* c : {&contour1, &contour2}) {
    if (!(c->x_l < iv.lo && c->x_r > iv.hi))
      throw InvalidArgument("lss_cov: contour does not enclose the support interval");
    if ((f1.is_log() || f2.is_log()) && !(c->x_l > 0.0))
      throw DomainError("lss_cov: contour crosses the log branch cut");
  }
  if ((f1.is_log() || f2.is_log()) && !(iv.lo > 0.0))
    throw DomainError("lss_cov: log needs y < 1 and lambda_min(Sigma) > 0");

  const double extra = nu4 - kappa - 1.0;
  auto combine = [&](const detail::CovPieces& pc) { return kappa * pc.sigma + extra * pc.tau; };
  const auto coarse = detail::lss_cov_once(m, f1, f2, q1, q2, contour1, contour2, opt);
  const auto fine = detail::lss_cov_once(m, f1, f2, q1, q2, contour1.with_nodes(2 * contour1.nodes_per_side),
                                         contour2.with_nodes(2 * contour2.nodes_per_side), opt);
  const cplx total = combine(fine);
  LssCovResult res;
  res.value = total.real();
  res.sigma_part = (kappa * fine.sigma).real();
  res.tau_part = (extra * fine.tau).real();
  res.imag_part = total.imag();
  res.error = std::abs(total - combine(coarse));
  res.nodes_per_side = 2 * contour1.nodes_per_side;
  if (res.error > opt.tolerance * std::max(1.0, std::abs(res.value))) {
    std::ostringstream os;
    os << "lss_cov: quadrature not converged (node doubling changed the value by " << res.error << ")";
    throw ConvergenceError(os.str(), res.error);
  }
  if (std::abs(res.imag_part) > opt.imag_tolerance * std::max(1.0, std::abs(res.value))) {
    std::ostringstream os;
    os << "lss_cov: imaginary residue " << res.imag_part << " too large for a real covariance";
    throw ConvergenceError(os.str(), std::abs(res.imag_part));
  }
  return res;
}

// ===========================================================================
// Null case on the unit circle
// ===========================================================================

struct UnitCircleOptions {
  std::vector<double> deltas{0.1, 0.05, 0.025};
  int nodes = 1024;         // trapezoid nodes per circle
  bool same_index = true;   // q1 == q2; distinct indices are uncorrelated
};

struct UnitCircleRow {
  double delta, r1, r2, value;
};

struct UnitCircleResult {
  double value = 0.0;
  std::vector<UnitCircleRow> table;
  std::vector<double> extrapolants;  // Neville diagonal, last entry is value
  double disagreement = 0.0;         // |last - second to last| / |last|
  bool flagged = false;              // disagreement above 1%
};

/// Raw double integral at radii (r1, r2).
inline double null_unitcircle_at(double y, const TestFunction& f1, const TestFunction& f2, double kappa, double nu4,
                                 double r1, double r2, int nodes) {
  const double h = std::sqrt(y);
  const auto c1 = circle_nodes(1.0, nodes);
  const auto c2 = circle_nodes(1.0, nodes);
  std::vector<cplx> F1(c1.size()), F2(c2.size());
  for (std::size_t j = 0; j < c1.size(); ++j) {
    const cplx xi = c1[j].z;
    F1[j] = f1(1.0 + h * r1 * xi + h / (r1 * xi) + h * h) * c1[j].dz;
  }
  for (std::size_t k = 0; k < c2.size(); ++k) {
    // conj(f2(1 + h r2 / conj(xi) ... )) at |xi| = 1 equals this holomorphic form
    const cplx xi = c2[k].z;
    F2[k] = f2(1.0 + h * r2 * xi + h / (r2 * xi) + h * h) * c2[k].dz;
  }
  const double rr = r1 * r2;
  cplx I1 = 0.0;
  for (std::size_t j = 0; j < c1.size(); ++j) {
    const cplx a = rr * c1[j].z;
    cplx inner = 0.0;
    for (std::size_t k = 0; k < c2.size(); ++k) {
      const cplx den = a - c2[k].z;
      inner += F2[k] * (a + c2[k].z) / (den * den * den);
    }
    I1 += F1[j] * inner;
  }
  I1 *= rr / (h * h);
  cplx J1 = 0.0, J2 = 0.0;
  for (std::size_t j = 0; j < c1.size(); ++j) J1 += F1[j] / (c1[j].z * c1[j].z);
  for (std::size_t k = 0; k < c2.size(); ++k) J2 += F2[k];
  const cplx I2 = J1 * J2 / (h * h * rr);
  const double pi2 = std::numbers::pi * std::numbers::pi;
  const cplx v = -kappa / (2.0 * pi2) * I1 - (nu4 - kappa - 1.0) / (2.0 * pi2) * I2;
  return v.real();
}

/// Unit-circle covariance on the ladder r1 = 1 + d, r2 = 1 + 2d, extrapolated
/// to d = 0 by Neville's scheme.
inline UnitCircleResult null_lss_cov_unitcircle(double y, const TestFunction& f1, const TestFunction& f2, double kappa,
                                                double nu4, const UnitCircleOptions& opt = {}) {
  if (!(y > 0.0)) throw InvalidArgument("null_lss_cov_unitcircle: y must be > 0");
  if (opt.deltas.empty()) throw InvalidArgument("null_lss_cov_unitcircle: empty delta sequence");
  if ((f1.is_log() || f2.is_log()) && !(y < 1.0)) throw DomainError("null_lss_cov_unitcircle: log needs y < 1");
  UnitCircleResult res;
  if (!opt.same_index) return res;
  const std::size_t m = opt.deltas.size();
  std::vector<std::vector<double>> T(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double d = opt.deltas[i];
    if (!(d > 0.0)) throw InvalidArgument("null_lss_cov_unitcircle: deltas must be > 0");
    const double r1 = 1.0 + d, r2 = 1.0 + 2.0 * d;
    const double v = null_unitcircle_at(y, f1, f2, kappa, nu4, r1, r2, opt.nodes);
    res.table.push_back({d, r1, r2, v});
    T[i].push_back(v);
    for (std::size_t k = 1; k <= i; ++k) {
      const double dk = opt.deltas[i - k];
      T[i].push_back(T[i][k - 1] + (T[i][k - 1] - T[i - 1][k - 1]) * d / (dk - d));
    }
  }
  for (std::size_t k = 0; k < m; ++k) res.extrapolants.push_back(T[k][k]);
  res.value = res.extrapolants.back();
  if (m >= 2) {
    const double prev = T[m - 1][m - 2];
    res.disagreement = std::abs(res.value - prev) / std::max(std::abs(res.value), 1e-300);
    res.flagged = res.disagreement > 0.01;
  }
  return res;
}

namespace detail {

/// Laurent polynomial in xi stored as coefficients for powers -deg..deg.
struct Laurent {
  int deg = 0;
  std::vector<double> c{0.0};
  double at(int k) const { return (k < -deg || k > deg) ? 0.0 : c[static_cast<std::size_t>(k + deg)]; }
};

/// Coefficients of f(b + h xi + h / xi) for polynomial f.
inline Laurent laurent_compose(const std::vector<double>& coeffs, double b, double h) {
  const int n = static_cast<int>(coeffs.size()) - 1;
  Laurent out;
  out.deg = std::max(n, 0);
  out.c.assign(2 * out.deg + 1, 0.0);
  std::vector<double> power{1.0};  // (b + h xi + h/xi)^k, powers -k..k
  for (int k = 0; k <= n; ++k) {
    for (int i = -k; i <= k; ++i) out.c[i + out.deg] += coeffs[k] * power[i + k];
    std::vector<double> next(2 * (k + 1) + 1, 0.0);
    for (int i = -k; i <= k; ++i) {
      const double v = power[i + k];
      next[i + k + 1] += b * v;
      next[i + 1 + k + 1] += h * v;
      next[i - 1 + k + 1] += h * v;
    }
    power = std::move(next);
  }
  return out;
}

}  // namespace detail

/// Residue-calculus value of the unit-circle formula for polynomial f1, f2:
///   2 kappa sum_{m >= 1} m^2 c_m(F1) c_{-m}(F2) / h^2 + 2 (nu4 - kappa - 1) c_1(F1) c_{-1}(F2) / h^2
/// where F(xi) = f(1 + h^2 + h xi + h/xi).
inline double null_residue_cov_poly(double y, const std::vector<double>& coeffs1, const std::vector<double>& coeffs2,
                                    double kappa, double nu4) {
  if (!(y > 0.0)) throw InvalidArgument("null_residue_cov_poly: y must be > 0");
  if (coeffs1.empty() || coeffs2.empty()) return 0.0;
  const double h = std::sqrt(y);
  const auto F1 = detail::laurent_compose(coeffs1, 1.0 + y, h);
  const auto F2 = detail::laurent_compose(coeffs2, 1.0 + y, h);
  double s = 0.0;
  for (int m = 1; m <= std::min(F1.deg, F2.deg); ++m) s += static_cast<double>(m) * m * F1.at(m) * F2.at(-m);
  return (2.0 * kappa * s + 2.0 * (nu4 - kappa - 1.0) * F1.at(1) * F2.at(-1)) / y;
}

// ===========================================================================
// Printed constants and scalar oracles for Sigma = I
// ===========================================================================

enum class StatisticKind { trace, square, log };

inline StatisticKind statistic_kind(const TestFunction& f) {
  if (f.is_log()) return StatisticKind::log;
  const auto& c = f.coefficients();
  if (c.size() == 2 && c[0] == 0.0 && c[1] == 1.0) return StatisticKind::trace;
  if (c.size() == 3 && c[0] == 0.0 && c[1] == 0.0 && c[2] == 1.0) return StatisticKind::square;
  throw InvalidArgument("no closed-form constant for test function " + f.description());
}

/// Limiting variances exactly as printed for the null case.
inline double corollary_constants(double y, double kappa, double nu4, StatisticKind kind) {
  const double extra = nu4 - kappa - 1.0;
  switch (kind) {
    case StatisticKind::trace:
      return 2.0 * kappa + extra;
    case StatisticKind::square:
      return 8.0 * kappa * (1.0 + 3.0 * y + y * y) + 4.0 * extra * (1.0 + y) * (1.0 + y);
    case StatisticKind::log:
      if (!(y > 0.0 && y < 1.0)) throw DomainError("corollary_constants: log needs 0 < y < 1");
      return kappa / (1.0 - y) + extra;
  }
  return 0.0;
}

/// Limiting variances from direct computations that do not go through the
/// contour machinery:
///   trace   scalar CLT for the diagonal entry, nu4 - 1
///   square  second-order expansion of tr S^2 - tr (S^(-q))^2
///   log     delta method on the Schur complement, kappa/(1-y) + nu4 - kappa - 1
inline double oracle_variance(double y, double kappa, double nu4, StatisticKind kind) {
  const double extra = nu4 - kappa - 1.0;
  switch (kind) {
    case StatisticKind::trace:
      return kappa + extra;
    case StatisticKind::square:
      return 4.0 * kappa * (1.0 + 3.0 * y + y * y) + 4.0 * extra * (1.0 + y) * (1.0 + y);
    case StatisticKind::log:
      if (!(y > 0.0 && y < 1.0)) throw DomainError("oracle_variance: log needs 0 < y < 1");
      return kappa / (1.0 - y) + extra;
  }
  return 0.0;
}

/// Variance of sqrt(n) (S_qq - Sigma_qq) for general Sigma:
/// kappa Sigma_qq^2 + (nu4 - kappa - 1) sum_i |(Sigma^{1/2})_{qi}|^4.
inline double oracle_variance_trace(const CovModel& cov, int q, double kappa, double nu4) {
  detail::check_index(q, cov.p, "oracle_variance_trace");
  const double sqq = cov.sigma(q - 1, q - 1).real();
  double quartic = 0.0;
  for (int i = 0; i < cov.p; ++i) quartic += std::pow(std::abs(cov.sigma_sqrt(q - 1, i)), 4);
  return kappa * sqq * sqq + (nu4 - kappa - 1.0) * quartic;
}

}  // namespace lssdiff
