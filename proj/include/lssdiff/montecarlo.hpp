#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "lssdiff/ensembles.hpp"
#include "lssdiff/error.hpp"
#include "lssdiff/mp_law.hpp"
#include "lssdiff/spectral.hpp"
#include "lssdiff/test_function.hpp"

namespace lssdiff {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  EntryLaw law = make_entry_law(LawKind::gaussian);
  PopulationSpec population = Identity{1};
  int p = 1;
  int n = 1;
  std::vector<int> q_list{1};
  std::vector<TestFunction> functions{TestFunction::parse("x")};
  std::vector<cplx> z_list;      // process sampling points, may be empty
  int replications = 2;
  std::uint64_t seed = 0;
  int workers = 0;               // 0: LSSDIFF_WORKERS, else hardware concurrency
  bool full_statistic = false;   // also record lss(S) - p int f dF^{y_n,H_n}
  Centering centering = Centering::finite_mp;

  double y() const { return static_cast<double>(p) / n; }
};

inline std::string centering_name(Centering c) { return c == Centering::finite_mp ? "finite_mp" : "corollary"; }

inline Centering parse_centering(const std::string& s) {
  if (s == "finite_mp") return Centering::finite_mp;
  if (s == "corollary") return Centering::corollary;
  throw InvalidArgument("unknown centering '" + s + "' (expected finite_mp or corollary)");
}

/// Checks the configuration and returns the population model.
inline CovModel validate_config(const ExperimentConfig& cfg) {
  if (cfg.p < 1 || cfg.n < 1) throw InvalidArgument("config: p and n must be >= 1");
  if (cfg.replications < 2) throw InvalidArgument("config: replications must be >= 2");
  if (cfg.workers < 0) throw InvalidArgument("config: workers must be >= 0");
  if (!cfg.law.fifth_moment_finite)
    throw InvalidArgument("config: entry law " + cfg.law.name() + " lacks a finite fifth moment");
  CovModel cov = make_population(cfg.population);
  if (cov.p != cfg.p) {
    std::ostringstream os;
    os << "config: population has dimension " << cov.p << " but p = " << cfg.p;
    throw InvalidArgument(os.str());
  }
  if (cfg.q_list.empty()) throw InvalidArgument("config: q_list must not be empty");
  for (int q : cfg.q_list) detail::check_index(q, cfg.p, "config q_list");
  if (cfg.functions.empty()) throw InvalidArgument("config: functions must not be empty");
  for (const auto& f : cfg.functions) {
    if (!f.is_log()) continue;
    if (cfg.p > cfg.n) throw DomainError("config: log statistic needs p <= n");
    if (cfg.full_statistic && cfg.p >= cfg.n) throw DomainError("config: full log statistic needs p < n");
    if (!(cov.eigenvalues.minCoeff() > 0.0)) throw DomainError("config: log statistic needs Sigma > 0");
  }
  for (cplx z : cfg.z_list)
    if (z.imag() == 0.0 || !std::isfinite(z.real()) || !std::isfinite(z.imag()))
      throw InvalidArgument("config: process points must be finite and off the real axis");
  if (cfg.centering == Centering::corollary && !cov.identity)
    throw InvalidArgument("config: corollary centering requires Sigma = I");
  return cov;
}

/// Worker count: explicit request, then LSSDIFF_WORKERS, then the hardware.
inline int resolve_workers(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("LSSDIFF_WORKERS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<int>(v);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Stable text form of everything that influences the replicate values.
inline std::string canonical_string(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  os << "law=" << cfg.law.name() << ";p0=" << cfg.law.p0 << ";df=" << cfg.law.df << ";p=" << cfg.p
     << ";n=" << cfg.n << ";R=" << cfg.replications << ";seed=" << cfg.seed
     << ";full=" << cfg.full_statistic << ";centering=" << centering_name(cfg.centering) << ";q=";
  for (int q : cfg.q_list) os << q << ',';
  os << ";f=";
  for (const auto& f : cfg.functions) os << f.description() << ',';
  os << ";z=";
  for (cplx z : cfg.z_list) os << z.real() << '|' << z.imag() << ',';
  const CovModel cov = make_population(cfg.population);
  os << ";sigma=";
  for (Eigen::Index j = 0; j < cov.sigma.cols(); ++j)
    for (Eigen::Index i = 0; i < cov.sigma.rows(); ++i) os << cov.sigma(i, j).real() << '|' << cov.sigma(i, j).imag() << ',';
  return os.str();
}

/// 64-bit FNV-1a, printed as 16 hex digits.
inline std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = digits[h & 0xf];
  return out;
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

/// Everything measured on one replicate. Values are indexed as
/// diff[qi * F + fi], full[fi] and process[qi * Z + zi].
struct ReplicateOutcome {
  bool failed = false;
  std::string failure;
  std::vector<double> diff;
  std::vector<double> full;
  std::vector<cplx> process;
};

struct ExperimentMetadata {
  std::string config_hash;
  std::uint64_t seed = 0;
  int workers = 1;
  double wall_seconds = 0.0;
};

struct ExperimentResult {
  ExperimentConfig config;
  std::vector<ReplicateOutcome> replicates;  // exactly R entries
  std::vector<std::vector<double>> centerings;  // [qi][fi]
  std::vector<double> full_centerings;          // [fi]
  ExperimentMetadata meta;

  int failed_count() const {
    return static_cast<int>(std::count_if(replicates.begin(), replicates.end(), [](const auto& r) { return r.failed; }));
  }

  std::size_t q_position(int q) const {
    const auto it = std::find(config.q_list.begin(), config.q_list.end(), q);
    if (it == config.q_list.end()) throw InvalidArgument("q = " + std::to_string(q) + " was not simulated");
    return static_cast<std::size_t>(it - config.q_list.begin());
  }

  std::size_t z_position(cplx z) const {
    for (std::size_t i = 0; i < config.z_list.size(); ++i)
      if (std::abs(config.z_list[i] - z) <= 1e-12 * std::max(1.0, std::abs(z))) return i;
    std::ostringstream os;
    os << "process point " << z << " was not sampled";
    throw InvalidArgument(os.str());
  }

  /// Values of X_n(f, q) over the successful replicates, in replicate order.
  std::vector<double> diff_series(int q, std::size_t f_index) const {
    if (f_index >= config.functions.size()) throw InvalidArgument("function index out of range");
    const std::size_t k = q_position(q) * config.functions.size() + f_index;
    std::vector<double> out;
    for (const auto& r : replicates)
      if (!r.failed) out.push_back(r.diff[k]);
    return out;
  }

  std::vector<double> full_series(std::size_t f_index) const {
    if (!config.full_statistic) throw InvalidArgument("the full statistic was not recorded");
    if (f_index >= config.functions.size()) throw InvalidArgument("function index out of range");
    std::vector<double> out;
    for (const auto& r : replicates)
      if (!r.failed) out.push_back(r.full[f_index]);
    return out;
  }

  std::vector<cplx> process_series(int q, cplx z) const {
    const std::size_t k = q_position(q) * config.z_list.size() + z_position(z);
    std::vector<cplx> out;
    for (const auto& r : replicates)
      if (!r.failed) out.push_back(r.process[k]);
    return out;
  }
};

namespace detail {

/// f = c0 + c1 x + c2 x^2 can be evaluated from matrix entries alone.
inline bool is_quadratic(const TestFunction& f) { return !f.is_log() && f.degree() <= 2; }

inline double quadratic_coefficient(const TestFunction& f, std::size_t k) {
  const auto& c = f.coefficients();
  return k < c.size() ? c[k] : 0.0;
}

template <class Scalar>
void run_one_replicate(const ExperimentConfig& cfg, const CovModel& cov, const ExperimentResult& res,
                       const std::vector<ProcessCentering>& pc, std::uint64_t r, ReplicateOutcome& out) {
  const Mat<Scalar> X = sample_matrix_as<Scalar>(cfg.law, cfg.p, cfg.n, cfg.seed, r);
  const Mat<Scalar> S = sample_covariance(cov, X);
  const double root_n = std::sqrt(static_cast<double>(cfg.n));
  const std::size_t F = cfg.functions.size(), Z = cfg.z_list.size();

  bool need_eigs = !cfg.z_list.empty();
  bool need_log = false;
  for (const auto& f : cfg.functions) {
    if (f.is_log()) need_log = true;
    else if (!is_quadratic(f)) need_eigs = true;
  }

  std::optional<Mat<Scalar>> precision;
  double log_det = 0.0;
  if (need_log) {
    Eigen::LLT<Mat<Scalar>> llt(S);
    if (llt.info() != Eigen::Success) throw SingularMatrixError("sample covariance is not positive definite");
    const auto L = llt.matrixLLT().diagonal().real();
    if (!(L.minCoeff() > 1e-7 * L.maxCoeff())) throw SingularMatrixError("sample covariance is numerically singular");
    log_det = 2.0 * L.array().log().sum();
    precision = llt.solve(Mat<Scalar>::Identity(cfg.p, cfg.p));
  }
  std::vector<double> eig_full;
  if (need_eigs) eig_full = eigenvalues(S);
  const double frob2 = S.squaredNorm();

  out.diff.assign(cfg.q_list.size() * F, 0.0);
  out.process.assign(cfg.q_list.size() * Z, cplx(0.0));
  for (std::size_t qi = 0; qi < cfg.q_list.size(); ++qi) {
    const int q = cfg.q_list[qi];
    std::vector<double> eig_del;
    bool have_del = false;
    auto deleted_eigs = [&]() -> const std::vector<double>& {
      if (!have_del) {
        if (cfg.p > 1) eig_del = eigenvalues(Mat<Scalar>(delete_rowcol(S, q)));
        have_del = true;
      }
      return eig_del;
    };
    const double sqq = std::real(S(q - 1, q - 1));
    for (std::size_t fi = 0; fi < F; ++fi) {
      const auto& f = cfg.functions[fi];
      double raw;
      if (f.is_log()) {
        // log det S - log det S^(-q) = -log (S^{-1})_qq
        raw = -std::log(std::real((*precision)(q - 1, q - 1)));
      } else if (is_quadratic(f)) {
        const double row2 = S.row(q - 1).squaredNorm();
        raw = quadratic_coefficient(f, 0) + quadratic_coefficient(f, 1) * sqq +
              quadratic_coefficient(f, 2) * (2.0 * row2 - sqq * sqq);
      } else {
        raw = lss(eig_full, f) - lss(deleted_eigs(), f);
      }
      out.diff[qi * F + fi] = root_n * (raw - res.centerings[qi][fi]);
    }
    for (std::size_t zi = 0; zi < Z; ++zi)
      out.process[qi * Z + zi] = process_value(eig_full, deleted_eigs(), cfg.n, cfg.z_list[zi], pc[qi * Z + zi]);
  }

  if (cfg.full_statistic) {
    out.full.assign(F, 0.0);
    for (std::size_t fi = 0; fi < F; ++fi) {
      const auto& f = cfg.functions[fi];
      double raw;
      if (f.is_log()) {
        raw = log_det;
      } else if (is_quadratic(f)) {
        raw = quadratic_coefficient(f, 0) * cfg.p + quadratic_coefficient(f, 1) * std::real(S.trace()) +
              quadratic_coefficient(f, 2) * frob2;
      } else {
        raw = lss(eig_full, f);
      }
      out.full[fi] = raw - res.full_centerings[fi];
    }
  }
}

}  // namespace detail

/// Runs R independent replicates. Replicate r draws from replicate_engine(seed, r)
/// and its outcome is stored at index r, so the result does not depend on the
/// worker count. Replicates whose sample covariance is singular under log are
/// marked failed; more than 1% failures is an error.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  const CovModel cov = validate_config(cfg);
  ExperimentResult res;
  res.config = cfg;
  res.meta.seed = cfg.seed;
  res.meta.config_hash = fnv1a_hex(canonical_string(cfg));

  const std::size_t F = cfg.functions.size(), Z = cfg.z_list.size();
  res.centerings.assign(cfg.q_list.size(), std::vector<double>(F, 0.0));
  for (std::size_t qi = 0; qi < cfg.q_list.size(); ++qi)
    for (std::size_t fi = 0; fi < F; ++fi)
      res.centerings[qi][fi] = centering_for(cov, cfg.n, cfg.functions[fi], cfg.q_list[qi], cfg.centering);
  if (cfg.full_statistic) {
    const MPModel model{cfg.y(), cov.spectral_measure};
    const Interval iv = support_interval(cov, cfg.y());
    res.full_centerings.resize(F);
    for (std::size_t fi = 0; fi < F; ++fi) {
      const auto& f = cfg.functions[fi];
      const Contour c = default_contour(iv, f.is_log());
      res.full_centerings[fi] = cfg.p * mp_integral(model, f, c, 1e-10).value;
    }
  }
  std::vector<ProcessCentering> pc(cfg.q_list.size() * Z);
  for (std::size_t qi = 0; qi < cfg.q_list.size(); ++qi)
    for (std::size_t zi = 0; zi < Z; ++zi) pc[qi * Z + zi] = process_centering(cov, cfg.n, cfg.q_list[qi], cfg.z_list[zi]);

  const int R = cfg.replications;
  res.replicates.assign(static_cast<std::size_t>(R), ReplicateOutcome{});
  const int workers = std::min(resolve_workers(cfg.workers), R);
  res.meta.workers = workers;

  std::atomic<int> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto work = [&]() {
    while (true) {
      const int r = next.fetch_add(1);
      if (r >= R) return;
      {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (first_error) return;
      }
      auto& slot = res.replicates[static_cast<std::size_t>(r)];
      try {
        if (cfg.law.is_complex())
          detail::run_one_replicate<cplx>(cfg, cov, res, pc, static_cast<std::uint64_t>(r), slot);
        else if (cov.real_valued)
          detail::run_one_replicate<double>(cfg, cov, res, pc, static_cast<std::uint64_t>(r), slot);
        else
          throw InvalidArgument("real entry law with a complex population matrix; use a complex law");
      } catch (const SingularMatrixError& e) {
        slot = ReplicateOutcome{};
        slot.failed = true;
        slot.failure = e.what();
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  const int failed = res.failed_count();
  if (100 * failed > R) {
    std::ostringstream os;
    os << failed << " of " << R << " replicates had a singular sample covariance (limit is 1%)";
    throw SingularMatrixError(os.str());
  }
  res.meta.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

// ---------------------------------------------------------------------------
// Summaries and diagnostics
// ---------------------------------------------------------------------------

struct SummaryStats {
  std::size_t count = 0;
  double mean = 0.0;
  double variance = 0.0;  // n - 1 denominator
  double sd = 0.0;
  double se_mean = 0.0;
  double se_variance = 0.0;
  double skewness = 0.0;         // m3 / m2^{3/2}
  double excess_kurtosis = 0.0;  // m4 / m2^2 - 3
  double se_skewness = 0.0;      // sqrt(6 / n)
  double se_kurtosis = 0.0;      // sqrt(24 / n)
  double min = 0.0;
  double max = 0.0;
  bool degenerate = false;       // all samples equal
};

inline SummaryStats summarize(const std::vector<double>& x) {
  if (x.size() < 2) throw InvalidArgument("summarize: need at least 2 samples");
  SummaryStats s;
  s.count = x.size();
  const double n = static_cast<double>(x.size());
  s.mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
  s.min = *lo;
  s.max = *hi;
  double m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (double v : x) {
    const double d = v - s.mean;
    const double d2 = d * d;
    m2 += d2;
    m3 += d2 * d;
    m4 += d2 * d2;
  }
  s.variance = m2 / (n - 1.0);
  s.sd = std::sqrt(s.variance);
  s.se_mean = std::sqrt(s.variance / n);
  m2 /= n;
  m3 /= n;
  m4 /= n;
  s.se_skewness = std::sqrt(6.0 / n);
  s.se_kurtosis = std::sqrt(24.0 / n);
  s.degenerate = (s.min == s.max);
  if (!s.degenerate && m2 > 0.0) {
    s.skewness = m3 / std::pow(m2, 1.5);
    s.excess_kurtosis = m4 / (m2 * m2) - 3.0;
    s.se_variance = std::sqrt(std::max(0.0, m4 - m2 * m2) / n);
  }
  return s;
}

/// Mean vector and unbiased covariance matrix of several paired series.
struct CovarianceSummary {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
};

inline CovarianceSummary summarize_joint(const std::vector<std::vector<double>>& series) {
  if (series.empty()) throw InvalidArgument("summarize_joint: no series");
  const std::size_t n = series.front().size();
  if (n < 2) throw InvalidArgument("summarize_joint: need at least 2 samples");
  for (const auto& s : series)
    if (s.size() != n) throw InvalidArgument("summarize_joint: series lengths differ");
  const auto k = static_cast<Eigen::Index>(series.size());
  Eigen::MatrixXd M(static_cast<Eigen::Index>(n), k);
  for (Eigen::Index j = 0; j < k; ++j)
    for (std::size_t i = 0; i < n; ++i) M(static_cast<Eigen::Index>(i), j) = series[static_cast<std::size_t>(j)][i];
  CovarianceSummary out;
  out.mean = M.colwise().mean().transpose();
  const Eigen::MatrixXd C = M.rowwise() - out.mean.transpose();
  out.covariance = C.transpose() * C / static_cast<double>(n - 1);
  return out;
}

struct NormalityReport {
  std::size_t count = 0;
  bool degenerate = false;  // diagnostics suppressed
  double ks = 0.0;          // sup |F_emp - Phi((x - mean)/sd)|
  double ks_critical = 0.0; // 1.63 / sqrt(R), 1% level
  double skewness = 0.0;
  double skew_band = 0.0;   // 5 sqrt(6/R)
  double excess_kurtosis = 0.0;
  double kurt_band = 0.0;   // 5 sqrt(24/R)
  bool ks_pass = false;
  bool skew_pass = false;
  bool kurt_pass = false;
  bool pass() const { return !degenerate && ks_pass && skew_pass && kurt_pass; }
};

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

inline NormalityReport normality_diagnostics(const std::vector<double>& x) {
  if (x.size() < 500) throw InvalidArgument("normality_diagnostics: need at least 500 samples");
  const SummaryStats s = summarize(x);
  NormalityReport r;
  r.count = x.size();
  const double n = static_cast<double>(x.size());
  r.ks_critical = 1.63 / std::sqrt(n);
  r.skew_band = 5.0 * std::sqrt(6.0 / n);
  r.kurt_band = 5.0 * std::sqrt(24.0 / n);
  if (s.degenerate) {
    r.degenerate = true;
    return r;
  }
  std::vector<double> sorted(x);
  std::sort(sorted.begin(), sorted.end());
  double d = 0.0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const double F = normal_cdf((sorted[i] - s.mean) / s.sd);
    d = std::max({d, static_cast<double>(i + 1) / n - F, F - static_cast<double>(i) / n});
  }
  r.ks = d;
  r.skewness = s.skewness;
  r.excess_kurtosis = s.excess_kurtosis;
  r.ks_pass = r.ks < r.ks_critical;
  r.skew_pass = std::abs(r.skewness) < r.skew_band;
  r.kurt_pass = std::abs(r.excess_kurtosis) < r.kurt_band;
  return r;
}

struct IndependenceReport {
  std::size_t count = 0;
  double correlation = 0.0;
  double ci_low = 0.0;   // Fisher-z 99% interval
  double ci_high = 0.0;
  double bound = 0.0;    // 3 / sqrt(R)
  bool within_bound() const { return std::abs(correlation) < bound; }
};

inline IndependenceReport independence_check(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw InvalidArgument("independence_check: series lengths differ");
  if (a.size() < 4) throw InvalidArgument("independence_check: need at least 4 paired samples");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double saa = 0.0, sbb = 0.0, sab = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    saa += da * da;
    sbb += db * db;
    sab += da * db;
  }
  if (saa == 0.0 || sbb == 0.0) throw DomainError("independence_check: a series is constant");
  IndependenceReport r;
  r.count = a.size();
  r.correlation = std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
  r.bound = 3.0 / std::sqrt(n);
  const double z99 = 2.5758293035489004;
  if (std::abs(r.correlation) >= 1.0) {
    r.ci_low = r.ci_high = r.correlation;
  } else {
    const double z = std::atanh(r.correlation), half = z99 / std::sqrt(n - 3.0);
    r.ci_low = std::tanh(z - half);
    r.ci_high = std::tanh(z + half);
  }
  return r;
}

struct ProcessCovEstimate {
  cplx value;
  double jackknife_se = 0.0;
  std::size_t count = 0;
};

/// Sample covariance of M(z1) and conj M(z2), centered by the sample means.
inline ProcessCovEstimate process_cov_empirical(const std::vector<cplx>& a, const std::vector<cplx>& b) {
  if (a.size() != b.size()) throw InvalidArgument("process_cov_empirical: series lengths differ");
  if (a.size() < 3) throw InvalidArgument("process_cov_empirical: need at least 3 samples");
  const std::size_t N = a.size();
  const double n = static_cast<double>(N);
  cplx ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  // work with centered data so the leave-one-out updates do not cancel
  std::vector<cplx> da(N), db(N);
  cplx sa = 0.0, sb = 0.0, sab = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    da[i] = a[i] - ma;
    db[i] = b[i] - mb;
    sa += da[i];
    sb += db[i];
    sab += da[i] * std::conj(db[i]);
  }
  ProcessCovEstimate est;
  est.count = N;
  est.value = (sab - sa * std::conj(sb) / n) / (n - 1.0);
  const double m = n - 1.0;
  std::vector<cplx> loo(N);
  cplx loo_mean = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    const cplx a_sum = sa - da[i], b_sum = sb - db[i];
    const cplx ab = sab - da[i] * std::conj(db[i]);
    loo[i] = (ab - a_sum * std::conj(b_sum) / m) / (m - 1.0);
    loo_mean += loo[i];
  }
  loo_mean /= n;
  double acc = 0.0;
  for (const cplx& v : loo) acc += std::norm(v - loo_mean);
  est.jackknife_se = std::sqrt((n - 1.0) / n * acc);
  return est;
}

inline ProcessCovEstimate process_cov_empirical(const ExperimentResult& res, cplx z1, cplx z2, int q1, int q2) {
  return process_cov_empirical(res.process_series(q1, z1), res.process_series(q2, z2));
}

// ---------------------------------------------------------------------------
// Comparison with theory
// ---------------------------------------------------------------------------

/// Theoretical variances for one statistic. Any may be missing.
struct TheoryValues {
  std::optional<double> paper;    // printed constant
  std::optional<double> oracle;   // independent direct computation
  std::optional<double> kernel;   // contour covariance from the kernels, informational
};

struct Tolerances {
  double variance_relative = 0.10;
  double mean_se_multiple = 5.0;
};

struct ComparisonEntry {
  std::string label;  // "paper", "oracle", "kernel", "mean"
  double theory = 0.0;
  double ratio = 0.0;  // empirical / theory (for "mean": |mean| / SE)
  bool oracle_backed = false;
  bool pass = false;
  std::string note;
};

struct ComparisonReport {
  std::string statistic;
  double empirical_variance = 0.0;
  double se_variance = 0.0;
  double empirical_mean = 0.0;
  double se_mean = 0.0;
  std::vector<ComparisonEntry> entries;
  /// True when every oracle-backed entry passes.
  bool pass() const {
    return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return !e.oracle_backed || e.pass; });
  }
};

inline ComparisonReport compare_theory(const std::string& statistic, const SummaryStats& s, const TheoryValues& t,
                                       const Tolerances& tol = {}) {
  ComparisonReport rep;
  rep.statistic = statistic;
  rep.empirical_variance = s.variance;
  rep.se_variance = s.se_variance;
  rep.empirical_mean = s.mean;
  rep.se_mean = s.se_mean;
  auto variance_entry = [&](const std::string& label, double theory, bool backed) {
    ComparisonEntry e;
    e.label = label;
    e.theory = theory;
    e.oracle_backed = backed;
    e.ratio = theory != 0.0 ? s.variance / theory : (s.variance == 0.0 ? 1.0 : INFINITY);
    e.pass = theory != 0.0 ? std::abs(e.ratio - 1.0) <= tol.variance_relative : s.variance == 0.0;
    if (!e.pass) {
      std::ostringstream os;
      os.precision(3);
      os << (label == "paper" ? "paper-constant mismatch" : label == "kernel" ? "kernel value differs" : "outside tolerance")
         << ", ratio " << e.ratio;
      e.note = os.str();
    }
    rep.entries.push_back(e);
  };
  if (t.paper) variance_entry("paper", *t.paper, false);
  if (t.oracle) variance_entry("oracle", *t.oracle, true);
  if (t.kernel) variance_entry("kernel", *t.kernel, false);
  if (!s.degenerate) {
    ComparisonEntry e;
    e.label = "mean";
    e.theory = 0.0;
    e.ratio = std::abs(s.mean) / s.se_mean;
    e.oracle_backed = true;
    e.pass = e.ratio <= tol.mean_se_multiple;
    if (!e.pass) e.note = "mean further than the allowed multiple of its standard error from 0";
    rep.entries.push_back(e);
  }
  return rep;
}

}  // namespace lssdiff
