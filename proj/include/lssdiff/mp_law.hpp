#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <vector>

#include "lssdiff/ensembles.hpp"
#include "lssdiff/error.hpp"
#include "lssdiff/quadrature.hpp"
#include "lssdiff/test_function.hpp"

namespace lssdiff {

/// Generalized Marchenko-Pastur model F^{y,H}.
struct MPModel {
  double y = 1.0;
  SpectralMeasure H;

  void validate() const {
    if (!(y > 0.0) || !std::isfinite(y))
      throw InvalidArgument("MP model needs a finite dimension ratio y > 0");
    H.validate();
  }
};

/// Solved transforms at one point z off the real axis.
///   s        Stieltjes transform of F^{y,H}
///   s_under  transform of the companion law, s_under = -(1-y)/z + y s
///   residual |z + 1/s_under - y int lambda/(1 + lambda s_under) dH|
struct StieltjesValue {
  cplx z;
  cplx s;
  cplx s_under;
  double residual = 0.0;
  int iterations = 0;
};

struct SolverOptions {
  double tolerance = 1e-12;  // on the residual, relative to max(1, |z|)
  int max_iterations = 10000;
};

namespace detail {

struct CompanionDefect {
  cplx value;       // G(m)
  cplx derivative;  // G'(m)
};

inline CompanionDefect companion_defect(const MPModel& model, cplx z, cplx m) {
  cplx a = 0.0, b = 0.0;
  for (std::size_t k = 0; k < model.H.atoms.size(); ++k) {
    const double lam = model.H.atoms[k];
    const cplx r = lam / (1.0 + lam * m);
    a += model.H.weights[k] * r;
    b += model.H.weights[k] * r * r;
  }
  return {z + 1.0 / m - model.y * a, -1.0 / (m * m) + model.y * b};
}

inline cplx fixed_point_map(const MPModel& model, cplx z, cplx m) {
  cplx a = 0.0;
  for (std::size_t k = 0; k < model.H.atoms.size(); ++k) {
    const double lam = model.H.atoms[k];
    a += model.H.weights[k] * lam / (1.0 + lam * m);
  }
  return -1.0 / (z - model.y * a);
}

// Solves for Im z > 0 only.
inline StieltjesValue solve_upper(const MPModel& model, cplx z, cplx m, const SolverOptions& opt) {
  const double scale = std::max(1.0, std::abs(z));
  const double target = opt.tolerance * scale;
  if (!(m.imag() > 0.0) || !std::isfinite(m.real()) || !std::isfinite(m.imag())) m = -1.0 / z;

  int iterations = 0;
  double residual = std::abs(companion_defect(model, z, m).value);

  // Newton with step halving that keeps the iterate on the Herglotz branch.
  auto newton = [&](int budget) {
    bool converged = false;
    int polish = 0;
    for (int it = 0; it < budget && iterations < opt.max_iterations; ++it, ++iterations) {
      const auto d = companion_defect(model, z, m);
      residual = std::abs(d.value);
      if (residual <= target) {
        converged = true;
        // a couple of extra steps take the root to machine precision
        if (++polish > 2) break;
      }
      if (d.derivative == cplx(0.0)) break;
      const cplx step = d.value / d.derivative;
      double t = 1.0;
      cplx next = m - step;
      while (!(next.imag() > 0.0) && t > 1e-12) {
        t *= 0.5;
        next = m - t * step;
      }
      if (!(next.imag() > 0.0)) break;
      const double next_res = std::abs(companion_defect(model, z, next).value);
      if (converged && next_res >= residual) break;
      if (!converged && t == 1.0 && next_res > 2.0 * residual) {
        // damp a diverging full step
        double tt = 0.5;
        cplx cand = m - tt * step;
        while (tt > 1e-6 && std::abs(companion_defect(model, z, cand).value) > residual) {
          tt *= 0.5;
          cand = m - tt * step;
        }
        if (cand.imag() > 0.0) next = cand;
      }
      m = next;
      residual = std::abs(companion_defect(model, z, m).value);
      if (std::abs(step) * t <= 4.0 * std::numeric_limits<double>::epsilon() * std::abs(m) &&
          residual <= target) {
        converged = true;
        break;
      }
    }
    return residual <= target;
  };

  bool ok = newton(60);
  if (!ok) {
    // damped fixed-point iteration (contractive on the upper half plane)
    while (iterations < opt.max_iterations) {
      m = 0.5 * m + 0.5 * fixed_point_map(model, z, m);
      ++iterations;
      residual = std::abs(companion_defect(model, z, m).value);
      if (residual <= 1e-6 * scale) break;
    }
    ok = newton(100);
  }
  if (!ok) {
    std::ostringstream os;
    os << "companion Stieltjes solver did not converge at z=" << z << " (residual "
       << residual << " after " << iterations << " iterations)";
    throw SolverError(os.str(), residual);
  }

  StieltjesValue v;
  v.z = z;
  v.s_under = m;
  v.s = (m + (1.0 - model.y) / z) / model.y;
  v.residual = residual;
  v.iterations = iterations;
  return v;
}

}  // namespace detail

/// Solves z = -1/s + y int lambda/(1 + lambda s) dH(lambda) for the companion
/// transform on the Herglotz branch. `initial_guess` warm-starts Newton; the
/// default start is the large-|z| asymptote -1/z. Lower half-plane points are
/// solved at conj(z) and conjugated, so conjugation symmetry holds exactly.
inline StieltjesValue solve_companion_stieltjes(const MPModel& model, cplx z,
                                                std::optional<cplx> initial_guess = std::nullopt,
                                                const SolverOptions& opt = {}) {
  if (z.imag() == 0.0 || !std::isfinite(z.real()) || !std::isfinite(z.imag()))
    throw InvalidArgument("solve_companion_stieltjes: z must be finite with Im z != 0");
  const bool lower = z.imag() < 0.0;
  const cplx zu = lower ? std::conj(z) : z;
  cplx guess = initial_guess ? (lower ? std::conj(*initial_guess) : *initial_guess) : -1.0 / zu;
  StieltjesValue v = detail::solve_upper(model, zu, guess, opt);
  if (lower) {
    v.z = z;
    v.s = std::conj(v.s);
    v.s_under = std::conj(v.s_under);
  }
  return v;
}

/// Residual of the defining equation for s itself:
/// |s - int 1/(lambda(1 - y - y z s) - z) dH|.
inline double fundamental_residual(const MPModel& model, const StieltjesValue& v) {
  cplx acc = 0.0;
  const cplx t = 1.0 - model.y - model.y * v.z * v.s;
  for (std::size_t k = 0; k < model.H.atoms.size(); ++k)
    acc += model.H.weights[k] / (model.H.atoms[k] * t - v.z);
  return std::abs(v.s - acc);
}

/// Companion transform for H = delta_1: root of z s^2 + (z + 1 - y) s + 1 = 0
/// with Im(s) Im(z) > 0.
inline cplx null_companion_stieltjes(double y, cplx z) {
  const cplx b = z + 1.0 - y;
  const cplx disc = std::sqrt(b * b - 4.0 * z);
  const cplx r1 = (-b + disc) / (2.0 * z);
  const cplx r2 = (-b - disc) / (2.0 * z);
  const double sign = z.imag() > 0.0 ? 1.0 : -1.0;
  return (r1.imag() * sign > r2.imag() * sign) ? r1 : r2;
}

/// Smoothed density Im s(x + i eps)/pi, solved by continuation in Im z.
inline double mp_density(const MPModel& model, double x, double epsilon) {
  if (!(epsilon > 0.0)) throw InvalidArgument("mp_density: epsilon must be > 0");
  double v = std::max(1.0, epsilon);
  cplx guess = -1.0 / cplx(x, v);
  StieltjesValue sv = solve_companion_stieltjes(model, cplx(x, v), guess);
  while (v > epsilon) {
    v = std::max(epsilon, 0.5 * v);
    sv = solve_companion_stieltjes(model, cplx(x, v), sv.s_under);
  }
  return sv.s.imag() / std::numbers::pi;
}

// ---------------------------------------------------------------------------
// Support bounds and contours
// ---------------------------------------------------------------------------

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Bounding interval [lambda_min 1_{(0,1)}(y) (1-sqrt y)^2, lambda_max (1+sqrt y)^2].
inline Interval support_interval(const SpectralMeasure& H, double y) {
  const double r = std::sqrt(y);
  Interval iv;
  iv.lo = (y > 0.0 && y < 1.0) ? H.min_atom() * (1.0 - r) * (1.0 - r) : 0.0;
  iv.hi = H.max_atom() * (1.0 + r) * (1.0 + r);
  return iv;
}

inline Interval support_interval(const CovModel& cov, double y) {
  return support_interval(cov.spectral_measure, y);
}

/// Positively oriented rectangle [x_l, x_r] x [-v0, v0].
struct Contour {
  double x_l = 0.0;
  double x_r = 1.0;
  double v0 = 1.0;
  int nodes_per_side = 512;

  bool encloses(double x) const { return x > x_l && x < x_r; }

  Contour with_nodes(int nodes) const {
    Contour c = *this;
    c.nodes_per_side = nodes;
    return c;
  }

  /// The rectangle grown by `step` on every side.
  Contour inflated(double step) const {
    Contour c = *this;
    c.x_l -= step;
    c.x_r += step;
    c.v0 += step;
    return c;
  }

  /// Nodes in the order bottom, right, top, left.
  std::vector<PathNode> nodes() const {
    const cplx a(x_l, -v0), b(x_r, -v0), c(x_r, v0), d(x_l, v0);
    std::vector<PathNode> out;
    for (auto [from, to] : {std::pair{a, b}, std::pair{b, c}, std::pair{c, d}, std::pair{d, a}}) {
      auto side = segment_nodes(from, to, nodes_per_side);
      out.insert(out.end(), side.begin(), side.end());
    }
    return out;
  }
};

/// Default contour margin: 0.1 of the interval width; with log statistics in
/// play it is capped at lo/3 so that an inflated second contour also stays
/// right of the origin.
inline double default_margin(const Interval& iv, bool log_in_play = false) {
  double m = 0.1 * (iv.hi - iv.lo);
  if (m <= 0.0) m = 0.1 * std::max(1.0, iv.hi);
  if (log_in_play) {
    if (!(iv.lo > 0.0))
      throw DomainError("log statistic needs a support interval bounded away from 0 (y < 1, lambda_min > 0)");
    m = std::min(m, iv.lo / 3.0);
  }
  return m;
}

inline Contour build_contour(const Interval& iv, double margin, double v0 = 1.0,
                             int nodes = 512, bool log_in_play = false) {
  if (!(margin > 0.0)) throw InvalidArgument("build_contour: margin must be > 0");
  if (!(v0 > 0.0)) throw InvalidArgument("build_contour: v0 must be > 0");
  if (nodes < 1) throw InvalidArgument("build_contour: nodes must be >= 1");
  if (iv.hi < iv.lo) throw InvalidArgument("build_contour: empty interval");
  Contour c{iv.lo - margin, iv.hi + margin, v0, nodes};
  if (log_in_play && c.x_l <= 0.0) {
    std::ostringstream os;
    os << "contour left edge x_l=" << c.x_l << " <= 0 crosses the log branch cut";
    throw DomainError(os.str());
  }
  return c;
}

inline Contour default_contour(const Interval& iv, bool log_in_play = false, int nodes = 512) {
  return build_contour(iv, default_margin(iv, log_in_play), 1.0, nodes, log_in_play);
}

// ---------------------------------------------------------------------------
// Integrals against F^{y,H}
// ---------------------------------------------------------------------------

struct IntegralEstimate {
  double value = 0.0;
  double error = 0.0;  // |I(2N) - I(N)|
};

namespace detail {

inline cplx contour_integral_once(const MPModel& model, const TestFunction& f, const Contour& c) {
  cplx acc = 0.0;
  std::optional<cplx> warm;
  for (const auto& node : c.nodes()) {
    const auto sv = solve_companion_stieltjes(model, node.z, warm);
    warm = sv.s_under;
    acc += f(node.z) * sv.s * node.dz;
  }
  // -(1/(2 pi i)) * integral
  return -acc / cplx(0.0, 2.0 * std::numbers::pi);
}

}  // namespace detail

/// int f dF^{y,H} = -(1/(2 pi i)) oint f(z) s(z) dz, plus the atom
/// (1 - 1/y) f(0) when y > 1 and the contour leaves the origin outside.
/// The error estimate compares nodes_per_side with twice as many nodes.
inline IntegralEstimate mp_integral(const MPModel& model, const TestFunction& f,
                                    const Contour& contour, double tolerance = 1e-8) {
  model.validate();
  const double y = model.y;
  const Interval iv = support_interval(model.H, y);
  if (!(contour.x_r > iv.hi)) throw InvalidArgument("mp_integral: contour does not enclose the support on the right");
  double atom = 0.0;
  if (f.is_log()) {
    if (y >= 1.0) throw DomainError("mp_integral: log needs y < 1 (F^{y,H} charges a neighbourhood of 0)");
    if (contour.x_l <= 0.0) throw DomainError("mp_integral: contour crosses the log branch cut");
    if (!(model.H.min_atom() > 0.0)) throw DomainError("mp_integral: log needs lambda_min(H) > 0");
  }
  if (contour.x_l > 0.0) {
    // continuous part lies in [lambda_min (1 - sqrt y)^2, ...] for y != 1
    const double r = std::sqrt(y);
    const double cont_lo = (y == 1.0) ? 0.0 : model.H.min_atom() * (1.0 - r) * (1.0 - r);
    if (!(contour.x_l < cont_lo))
      throw InvalidArgument("mp_integral: contour does not enclose the support on the left");
    if (y > 1.0) {
      const auto f0 = f.value_at_zero();
      if (!f0) throw DomainError("mp_integral: f undefined at the atom at 0");
      atom = (1.0 - 1.0 / y) * *f0;
    }
  }
  const cplx coarse = detail::contour_integral_once(model, f, contour);
  const cplx fine = detail::contour_integral_once(model, f, contour.with_nodes(2 * contour.nodes_per_side));
  IntegralEstimate est;
  est.value = fine.real() + atom;
  est.error = std::abs(fine - coarse);
  if (est.error > tolerance * std::max(1.0, std::abs(est.value))) {
    std::ostringstream os;
    os << "mp_integral: node doubling changed the integral by " << est.error;
    throw ConvergenceError(os.str(), est.error);
  }
  return est;
}

/// k-th moment of F^{y,delta_1} (Narayana polynomial in y).
inline double mp_moment_null(double y, int k) {
  if (k == 0) return 1.0;
  auto binom = [](int a, int b) {
    double r = 1.0;
    for (int i = 1; i <= b; ++i) r = r * (a - b + i) / i;
    return r;
  };
  double acc = 0.0;
  for (int r = 0; r < k; ++r) acc += std::pow(y, r) / (r + 1) * binom(k, r) * binom(k - 1, r);
  return acc;
}

/// int log x dF^{y,delta_1}(x) = (y-1)/y log(1-y) - 1 for y < 1 (and -1 at y = 1).
inline double mp_log_moment_null(double y) {
  if (y > 1.0) throw DomainError("log moment of the MP law needs y <= 1");
  if (y == 1.0) return -1.0;
  return (y - 1.0) / y * std::log1p(-y) - 1.0;
}

/// Closed form of int f dF^{y, delta_c}.
inline double mp_integral_point_mass(double y, double c, const TestFunction& f) {
  if (f.is_log()) {
    if (!(c > 0.0)) throw DomainError("log integral needs a positive population eigenvalue");
    return std::log(c) + mp_log_moment_null(y);
  }
  double acc = 0.0, ck = 1.0;
  for (std::size_t k = 0; k < f.coefficients().size(); ++k, ck *= c)
    acc += f.coefficients()[k] * ck * mp_moment_null(y, static_cast<int>(k));
  return acc;
}

/// p int f dF^{p/n, H_n} - (p-1) int f dF^{(p-1)/n, H_nq}.
/// Uses the closed form when both measures are the same point mass and
/// contour quadrature otherwise. For p = 1 the second term vanishes.
inline double centering_difference(int p, int n, const SpectralMeasure& H_n,
                                   const std::optional<SpectralMeasure>& H_nq,
                                   const TestFunction& f, int nodes_per_side = 256) {
  if (p < 1 || n < 1) throw InvalidArgument("centering_difference: p, n must be >= 1");
  const double y = static_cast<double>(p) / n;
  const double yq = static_cast<double>(p - 1) / n;
  if (p > 1 && !H_nq) throw InvalidArgument("centering_difference: deleted measure missing");
  const bool closed = H_n.is_point_mass() && (p == 1 || (H_nq->is_point_mass() && H_nq->atoms[0] == H_n.atoms[0]));
  if (closed) {
    const double c = H_n.atoms[0];
    double v = p * mp_integral_point_mass(y, c, f);
    if (p > 1) v -= (p - 1) * mp_integral_point_mass(yq, c, f);
    return v;
  }
  // one contour encloses both supports: the deleted spectrum interlaces the
  // full one and (p-1)/n < p/n
  const Interval iv = support_interval(H_n, y);
  const Contour contour = default_contour(iv, f.is_log(), nodes_per_side);
  const MPModel full{y, H_n};
  double v = p * mp_integral(full, f, contour, 1e-10).value;
  if (p > 1) {
    const MPModel del{yq, *H_nq};
    v -= (p - 1) * mp_integral(del, f, contour, 1e-10).value;
  }
  return v;
}

}  // namespace lssdiff
