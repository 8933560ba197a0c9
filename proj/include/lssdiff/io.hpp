#pragma once

// JSON and CSV persistence for experiments and theory evaluations. Depends on
// nlohmann/json (json.hpp on the include path).

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lssdiff/ensembles.hpp"
#include "lssdiff/error.hpp"
#include "lssdiff/kernels.hpp"
#include "lssdiff/montecarlo.hpp"

namespace lssdiff {

using nlohmann::json;

inline constexpr const char* kConfigSchema = "lssdiff.config/1";
inline constexpr const char* kResultSchema = "lssdiff.result/1";
inline constexpr const char* kTheorySchema = "lssdiff.theory/1";
inline constexpr const char* kCompareSchema = "lssdiff.compare/1";
inline constexpr const char* kManifestSchema = "lssdiff.manifest/1";
inline constexpr const char* kReplicatesCsvSchema = "lssdiff.replicates/1";
inline constexpr const char* kProcessCsvSchema = "lssdiff.process/1";
inline constexpr const char* kToolVersion = "1.0.0";

/// Optional theory section of a config.
struct TheoryRequest {
  std::vector<std::pair<cplx, cplx>> z_pairs;
  bool lss_cov = true;
  bool by_parts = false;
  double tolerance = 1e-6;
  double v0 = 1.0;
  bool unit_circle = true;
  UnitCircleOptions unit_circle_options;
  // explicit contours for lss_cov; default is the nested pair from lss_cov_contours
  std::optional<std::pair<Contour, Contour>> contours;
};

/// A parsed config file: the experiment plus the theory request.
struct ConfigFile {
  ExperimentConfig experiment;
  TheoryRequest theory;
  json source;  // the document as read
};

namespace detail {

template <class T>
T required(const json& j, const char* key) {
  if (!j.contains(key)) throw InvalidArgument(std::string("config: missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("config: field '") + key + "' has the wrong type: " + e.what());
  }
}

template <class T>
T optional_field(const json& j, const char* key, T fallback) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("config: field '") + key + "' has the wrong type: " + e.what());
  }
}

inline cplx parse_complex(const json& j) {
  if (j.is_array() && j.size() == 2 && j[0].is_number() && j[1].is_number())
    return {j[0].get<double>(), j[1].get<double>()};
  if (j.is_object() && j.contains("re") && j.contains("im")) return {j.at("re").get<double>(), j.at("im").get<double>()};
  throw InvalidArgument("config: complex numbers are written [re, im]");
}

inline json complex_json(cplx z) { return json::array({z.real(), z.imag()}); }

// Parameters may sit in a nested "params" object or directly beside "kind".
inline const json& params_of(const json& j) { return j.contains("params") ? j.at("params") : j; }

inline EntryLaw parse_law(const json& j) {
  if (j.is_string()) return make_entry_law(parse_law_kind(j.get<std::string>()));
  if (!j.is_object()) throw InvalidArgument("config: entry_law must be a string or an object");
  const json& pj = params_of(j);
  if (!pj.is_object()) throw InvalidArgument("config: entry_law.params must be an object");
  LawParams params;
  const std::string field = optional_field<std::string>(pj, "field", optional_field<std::string>(j, "field", "real"));
  if (field == "complex") params.field = Field::complex;
  else if (field != "real") throw InvalidArgument("config: entry_law field must be 'real' or 'complex'");
  if (pj.contains("p0")) params.p0 = required<double>(pj, "p0");
  if (pj.contains("df")) params.df = required<double>(pj, "df");
  return make_entry_law(parse_law_kind(required<std::string>(j, "kind")), params);
}

inline json law_json(const EntryLaw& law) {
  json params{{"field", law.is_complex() ? "complex" : "real"}};
  if (law.kind == LawKind::two_point) params["p0"] = law.p0;
  if (law.kind == LawKind::student_t) params["df"] = law.df;
  return {{"kind", to_string(law.kind)}, {"params", params}};
}

inline PopulationSpec parse_population(const json& j, int p) {
  const std::string kind = j.is_string() ? j.get<std::string>() : required<std::string>(j, "kind");
  if (kind == "identity") return Identity{p};
  if (!j.is_object()) throw InvalidArgument("config: population '" + kind + "' needs parameters");
  const json& pj = params_of(j);
  if (kind == "diagonal") return Diagonal{required<std::vector<double>>(pj, "values")};
  if (kind == "toeplitz") return Toeplitz{required<double>(pj, "rho"), p};
  if (kind == "explicit") {
    const auto re = required<std::vector<std::vector<double>>>(pj, "real");
    std::vector<std::vector<double>> im;
    if (pj.contains("imag")) im = required<std::vector<std::vector<double>>>(pj, "imag");
    const auto rows = static_cast<Eigen::Index>(re.size());
    MatrixXcd M(rows, rows);
    for (Eigen::Index i = 0; i < rows; ++i) {
      if (static_cast<Eigen::Index>(re[i].size()) != rows) throw InvalidArgument("config: explicit matrix is not square");
      if (!im.empty() && (im.size() != re.size() || im[i].size() != re[i].size()))
        throw InvalidArgument("config: explicit imag part has the wrong shape");
      for (Eigen::Index k = 0; k < rows; ++k) M(i, k) = cplx(re[i][k], im.empty() ? 0.0 : im[i][k]);
    }
    return Explicit{M};
  }
  throw InvalidArgument("config: unknown population kind '" + kind + "'");
}

inline json population_json(const PopulationSpec& spec) {
  return std::visit(
      [](const auto& s) -> json {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, Identity>) {
          return {{"kind", "identity"}};
        } else if constexpr (std::is_same_v<T, Diagonal>) {
          return {{"kind", "diagonal"}, {"params", {{"values", s.values}}}};
        } else if constexpr (std::is_same_v<T, Toeplitz>) {
          return {{"kind", "toeplitz"}, {"params", {{"rho", s.rho}}}};
        } else {
          json re = json::array(), im = json::array();
          for (Eigen::Index i = 0; i < s.matrix.rows(); ++i) {
            json rr = json::array(), ii = json::array();
            for (Eigen::Index k = 0; k < s.matrix.cols(); ++k) {
              rr.push_back(s.matrix(i, k).real());
              ii.push_back(s.matrix(i, k).imag());
            }
            re.push_back(rr);
            im.push_back(ii);
          }
          return {{"kind", "explicit"}, {"params", {{"real", re}, {"imag", im}}}};
        }
      },
      spec);
}

inline Contour parse_contour(const json& j) {
  Contour c{required<double>(j, "x_left"), required<double>(j, "x_right"), required<double>(j, "v0"),
            optional_field<int>(j, "nodes_per_side", 64)};
  if (!(c.x_l < c.x_r) || !(c.v0 > 0.0) || c.nodes_per_side < 1)
    throw InvalidArgument("config: contour needs x_left < x_right, v0 > 0 and nodes_per_side >= 1");
  return c;
}

inline json contour_json(const Contour& c) {
  return {{"x_left", c.x_l}, {"x_right", c.x_r}, {"v0", c.v0}, {"nodes_per_side", c.nodes_per_side}};
}

inline TheoryRequest parse_theory(const json& j) {
  TheoryRequest t;
  if (j.is_null()) return t;
  if (!j.is_object()) throw InvalidArgument("config: theory must be an object");
  if (j.contains("z_pairs"))
    for (const auto& pr : j.at("z_pairs")) {
      if (!pr.is_array() || pr.size() != 2) throw InvalidArgument("config: theory.z_pairs entries are [z1, z2]");
      t.z_pairs.emplace_back(parse_complex(pr[0]), parse_complex(pr[1]));
    }
  t.lss_cov = optional_field<bool>(j, "lss_cov", t.lss_cov);
  t.by_parts = optional_field<bool>(j, "by_parts", t.by_parts);
  t.tolerance = optional_field<double>(j, "tolerance", t.tolerance);
  t.v0 = optional_field<double>(j, "v0", t.v0);
  t.unit_circle = optional_field<bool>(j, "unit_circle", t.unit_circle);
  t.unit_circle_options.deltas = optional_field<std::vector<double>>(j, "deltas", t.unit_circle_options.deltas);
  t.unit_circle_options.nodes = optional_field<int>(j, "unit_circle_nodes", t.unit_circle_options.nodes);
  if (j.contains("contours")) {
    const auto& c = j.at("contours");
    if (!c.is_array() || c.size() != 2) throw InvalidArgument("config: theory.contours must list two contours");
    t.contours = std::make_pair(parse_contour(c[0]), parse_contour(c[1]));
  }
  return t;
}

inline json theory_request_json(const TheoryRequest& t) {
  json pairs = json::array();
  for (const auto& [a, b] : t.z_pairs) pairs.push_back(json::array({complex_json(a), complex_json(b)}));
  json j{{"z_pairs", pairs},
         {"lss_cov", t.lss_cov},
         {"by_parts", t.by_parts},
         {"tolerance", t.tolerance},
         {"v0", t.v0},
         {"unit_circle", t.unit_circle},
         {"deltas", t.unit_circle_options.deltas},
         {"unit_circle_nodes", t.unit_circle_options.nodes}};
  if (t.contours) j["contours"] = json::array({contour_json(t.contours->first), contour_json(t.contours->second)});
  return j;
}

}  // namespace detail

inline ConfigFile config_from_json(const json& j) {
  if (!j.is_object()) throw InvalidArgument("config: top level must be an object");
  const std::string schema = detail::optional_field<std::string>(j, "schema", kConfigSchema);
  if (schema != kConfigSchema)
    throw InvalidArgument("config: unsupported schema '" + schema + "' (expected " + kConfigSchema + ")");
  ConfigFile out;
  out.source = j;
  ExperimentConfig& c = out.experiment;
  c.p = detail::required<int>(j, "p");
  c.n = detail::required<int>(j, "n");
  if (!j.contains("entry_law")) throw InvalidArgument("config: missing field 'entry_law'");
  c.law = detail::parse_law(j.at("entry_law"));
  c.population = detail::parse_population(j.contains("population") ? j.at("population") : json("identity"), c.p);
  c.q_list = detail::optional_field<std::vector<int>>(j, "q_list", {1});
  c.functions.clear();
  for (const auto& s : detail::required<std::vector<std::string>>(j, "functions")) c.functions.push_back(TestFunction::parse(s));
  c.z_list.clear();
  if (j.contains("z_list"))
    for (const auto& z : j.at("z_list")) c.z_list.push_back(detail::parse_complex(z));
  c.replications = detail::required<int>(j, "replications");
  c.seed = detail::required<std::uint64_t>(j, "seed");
  c.workers = detail::optional_field<int>(j, "workers", 0);
  c.full_statistic = detail::optional_field<bool>(j, "full_statistic", false);
  c.centering = parse_centering(detail::optional_field<std::string>(j, "centering", "finite_mp"));
  out.theory = detail::parse_theory(j.contains("theory") ? j.at("theory") : json());
  return out;
}

inline ConfigFile load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open config file '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw InvalidArgument("config '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

/// Normalized echo of a config; parsing it gives back the same experiment.
inline json config_to_json(const ExperimentConfig& c, const std::optional<TheoryRequest>& theory = std::nullopt) {
  json fs = json::array();
  for (const auto& f : c.functions) fs.push_back(f.description());
  json zs = json::array();
  for (cplx z : c.z_list) zs.push_back(detail::complex_json(z));
  json j{{"schema", kConfigSchema},
         {"entry_law", detail::law_json(c.law)},
         {"population", detail::population_json(c.population)},
         {"p", c.p},
         {"n", c.n},
         {"q_list", c.q_list},
         {"functions", fs},
         {"z_list", zs},
         {"replications", c.replications},
         {"seed", c.seed},
         {"workers", c.workers},
         {"full_statistic", c.full_statistic},
         {"centering", centering_name(c.centering)}};
  if (theory) j["theory"] = detail::theory_request_json(*theory);
  return j;
}

// ---------------------------------------------------------------------------
// Experiment output
// ---------------------------------------------------------------------------

inline std::string statistic_id(int q, const TestFunction& f) { return "diff:q=" + std::to_string(q) + ":f=" + f.description(); }
inline std::string full_statistic_id(const TestFunction& f) { return "full:f=" + f.description(); }

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

inline json summary_json(const SummaryStats& s) {
  return {{"count", s.count},         {"mean", s.mean},
          {"variance", s.variance},   {"sd", s.sd},
          {"se_mean", s.se_mean},     {"se_variance", s.se_variance},
          {"skewness", s.skewness},   {"excess_kurtosis", s.excess_kurtosis},
          {"se_skewness", s.se_skewness}, {"se_kurtosis", s.se_kurtosis},
          {"min", s.min},             {"max", s.max},
          {"degenerate", s.degenerate}};
}

inline json normality_json(const NormalityReport& r) {
  return {{"degenerate", r.degenerate},
          {"ks", r.ks},
          {"ks_critical", r.ks_critical},
          {"skewness", r.skewness},
          {"skew_band", r.skew_band},
          {"excess_kurtosis", r.excess_kurtosis},
          {"kurt_band", r.kurt_band},
          {"pass", r.pass()}};
}

inline json independence_json(const IndependenceReport& r) {
  return {{"correlation", r.correlation}, {"ci99", json::array({r.ci_low, r.ci_high})}, {"bound", r.bound},
          {"within_bound", r.within_bound()}};
}

}  // namespace detail

/// replicate,kind,q,f,value with values at %.17g. Failed replicates are omitted.
inline std::string replicates_csv(const ExperimentResult& res) {
  std::ostringstream os;
  os << "# schema=" << kReplicatesCsvSchema << "\n";
  os << "replicate,kind,q,f,value\n";
  const auto& c = res.config;
  const std::size_t F = c.functions.size();
  for (std::size_t r = 0; r < res.replicates.size(); ++r) {
    const auto& rep = res.replicates[r];
    if (rep.failed) continue;
    for (std::size_t qi = 0; qi < c.q_list.size(); ++qi)
      for (std::size_t fi = 0; fi < F; ++fi)
        os << r << ",diff," << c.q_list[qi] << ',' << detail::csv_field(c.functions[fi].description()) << ','
           << format_double(rep.diff[qi * F + fi]) << '\n';
    if (c.full_statistic)
      for (std::size_t fi = 0; fi < F; ++fi)
        os << r << ",full,," << detail::csv_field(c.functions[fi].description()) << ','
           << format_double(rep.full[fi]) << '\n';
  }
  return os.str();
}

/// replicate,q,z_re,z_im,value_re,value_im.
inline std::string process_csv(const ExperimentResult& res) {
  std::ostringstream os;
  os << "# schema=" << kProcessCsvSchema << "\n";
  os << "replicate,q,z_re,z_im,value_re,value_im\n";
  const auto& c = res.config;
  const std::size_t Z = c.z_list.size();
  for (std::size_t r = 0; r < res.replicates.size(); ++r) {
    const auto& rep = res.replicates[r];
    if (rep.failed) continue;
    for (std::size_t qi = 0; qi < c.q_list.size(); ++qi)
      for (std::size_t zi = 0; zi < Z; ++zi) {
        const cplx v = rep.process[qi * Z + zi];
        os << r << ',' << c.q_list[qi] << ',' << format_double(c.z_list[zi].real()) << ','
           << format_double(c.z_list[zi].imag()) << ',' << format_double(v.real()) << ','
           << format_double(v.imag()) << '\n';
      }
  }
  return os.str();
}

/// Metadata, per-statistic summaries and diagnostics.
inline json result_to_json(const ExperimentResult& res) {
  const auto& c = res.config;
  json stats = json::array();
  auto add_series = [&](const std::string& id, const std::string& kind, int q, const TestFunction& f,
                        const std::vector<double>& x, double centering) {
    json s{{"id", id}, {"kind", kind}, {"f", f.description()}, {"centering", centering}};
    if (kind == "diff") s["q"] = q;
    const SummaryStats sum = summarize(x);
    s["summary"] = detail::summary_json(sum);
    if (x.size() >= 500) s["normality"] = detail::normality_json(normality_diagnostics(x));
    stats.push_back(s);
  };
  for (std::size_t qi = 0; qi < c.q_list.size(); ++qi)
    for (std::size_t fi = 0; fi < c.functions.size(); ++fi)
      add_series(statistic_id(c.q_list[qi], c.functions[fi]), "diff", c.q_list[qi], c.functions[fi],
                 res.diff_series(c.q_list[qi], fi), res.centerings[qi][fi]);
  if (c.full_statistic)
    for (std::size_t fi = 0; fi < c.functions.size(); ++fi)
      add_series(full_statistic_id(c.functions[fi]), "full", 0, c.functions[fi], res.full_series(fi),
                 res.full_centerings[fi]);

  // correlations between distinct indices and against the full statistic
  json indep = json::array();
  for (std::size_t fi = 0; fi < c.functions.size(); ++fi) {
    for (std::size_t a = 0; a < c.q_list.size(); ++a)
      for (std::size_t b = a + 1; b < c.q_list.size(); ++b) {
        const auto x = res.diff_series(c.q_list[a], fi), y = res.diff_series(c.q_list[b], fi);
        if (summarize(x).degenerate || summarize(y).degenerate) continue;
        json e = detail::independence_json(independence_check(x, y));
        e["a"] = statistic_id(c.q_list[a], c.functions[fi]);
        e["b"] = statistic_id(c.q_list[b], c.functions[fi]);
        indep.push_back(e);
      }
    if (c.full_statistic)
      for (std::size_t fj = 0; fj < c.functions.size(); ++fj) {
        const auto x = res.diff_series(c.q_list.front(), fi), y = res.full_series(fj);
        if (summarize(x).degenerate || summarize(y).degenerate) continue;
        json e = detail::independence_json(independence_check(x, y));
        e["a"] = statistic_id(c.q_list.front(), c.functions[fi]);
        e["b"] = full_statistic_id(c.functions[fj]);
        indep.push_back(e);
      }
  }

  json failures = json::array();
  for (std::size_t r = 0; r < res.replicates.size(); ++r)
    if (res.replicates[r].failed) failures.push_back({{"replicate", r}, {"reason", res.replicates[r].failure}});

  const CovModel cov = make_population(c.population);
  const auto mom = law_moments(c.law);
  return {{"schema", kResultSchema},
          {"config_hash", res.meta.config_hash},
          {"seed", res.meta.seed},
          {"workers", res.meta.workers},
          {"wall_seconds", res.meta.wall_seconds},
          {"model",
           {{"p", c.p},
            {"n", c.n},
            {"y", c.y()},
            {"population", cov.label},
            {"law", c.law.name()},
            {"kappa", mom.kappa},
            {"nu4", mom.nu4},
            {"centering", centering_name(c.centering)}}},
          {"replications", c.replications},
          {"failed", res.failed_count()},
          {"failures", failures},
          {"statistics", stats},
          {"independence", indep},
          {"config", config_to_json(c)}};
}

// ---------------------------------------------------------------------------
// Theory output
// ---------------------------------------------------------------------------

/// Limiting covariances and kernel grids for the statistics of a config.
inline json compute_theory(const ExperimentConfig& c, const TheoryRequest& t) {
  const CovModel cov = validate_config(c);
  const KernelModel model(cov, c.n);
  const double y = c.y();
  const auto mom = law_moments(c.law);
  const double kappa = mom.kappa, nu4 = mom.nu4;

  json stats = json::array();
  for (int q : c.q_list)
    for (const auto& f : c.functions) {
      json s{{"id", statistic_id(q, f)}, {"q", q}, {"f", f.description()}};
      std::optional<StatisticKind> kind;
      try {
        kind = statistic_kind(f);
      } catch (const InvalidArgument&) {
      }
      json centering{{"finite_mp", centering_for(cov, c.n, f, q, Centering::finite_mp)}};
      if (cov.identity && kind) centering["corollary"] = corollary_centering(c.p, c.n, f);
      s["centering"] = centering;
      if (cov.identity && kind && !(f.is_log() && !(y < 1.0))) {
        s["paper"] = corollary_constants(y, kappa, nu4, *kind);
        s["oracle"] = oracle_variance(y, kappa, nu4, *kind);
      } else if (kind == StatisticKind::trace) {
        s["oracle"] = oracle_variance_trace(cov, q, kappa, nu4);
      }
      if (cov.identity && !f.is_log())
        s["residue_oracle"] = null_residue_cov_poly(y, f.coefficients(), f.coefficients(), kappa, nu4);
      if (t.lss_cov) {
        const auto contours = t.contours ? *t.contours : lss_cov_contours(cov, c.n, f.is_log(), t.v0);
        LssCovOptions opt;
        opt.tolerance = t.tolerance;
        opt.by_parts = t.by_parts;
        const auto r = lss_cov(model, f, f, q, q, kappa, nu4, contours.first, contours.second, opt);
        s["kernel"] = {{"value", r.value},
                       {"sigma_part", r.sigma_part},
                       {"tau_part", r.tau_part},
                       {"imag_part", r.imag_part},
                       {"error", r.error},
                       {"nodes_per_side", r.nodes_per_side},
                       {"by_parts", t.by_parts},
                       {"note", cov.diagonal || nu4 == kappa + 1.0
                                    ? ""
                                    : "fourth-moment term is exact only for diagonal populations"},
                       {"contours", json::array({detail::contour_json(contours.first), detail::contour_json(contours.second)})}};
      }
      if (t.unit_circle && cov.identity && !(f.is_log() && !(y < 1.0))) {
        const auto u = null_lss_cov_unitcircle(y, f, f, kappa, nu4, t.unit_circle_options);
        json table = json::array();
        for (const auto& row : u.table)
          table.push_back({{"delta", row.delta}, {"r1", row.r1}, {"r2", row.r2}, {"value", row.value}});
        s["unit_circle"] = {{"value", u.value},
                            {"table", table},
                            {"extrapolants", u.extrapolants},
                            {"disagreement", u.disagreement},
                            {"flagged", u.flagged},
                            {"nodes", t.unit_circle_options.nodes}};
      }
      stats.push_back(s);
    }

  json grid = json::array();
  for (const auto& [z1, z2] : t.z_pairs)
    for (std::size_t a = 0; a < c.q_list.size(); ++a)
      for (std::size_t b = a; b < c.q_list.size(); ++b) {
        const int q1 = c.q_list[a], q2 = c.q_list[b];
        const auto k = eval_kernels(model, q1, q2, z1, z2, kappa, nu4);
        const auto sp = sigma2(model, q1, q2, z1, std::conj(z2));
        json e{{"z1", detail::complex_json(z1)}, {"z2", detail::complex_json(z2)}, {"q1", q1}, {"q2", q2},
               {"a", detail::complex_json(k.a)},   {"g", detail::complex_json(k.g)},
               {"h", detail::complex_json(k.h)},   {"sigma2", detail::complex_json(k.sigma2)},
               {"tau2", detail::complex_json(k.tau2)}, {"cov", detail::complex_json(k.cov)},
               {"fd_step", {sp.step1, sp.step2}},  {"fd_change", sp.change}};
        if (cov.identity && q1 == q2) {
          const cplx w = std::conj(z2);
          e["cov_closed_form"] =
              detail::complex_json(kappa * sigma2_null(y, z1, w) + (nu4 - kappa - 1.0) * tau2_null(y, z1, w));
        }
        grid.push_back(e);
      }

  const Interval iv = support_interval(cov, y);
  return {{"schema", kTheorySchema},
          {"model",
           {{"p", c.p},
            {"n", c.n},
            {"y", y},
            {"population", cov.label},
            {"law", c.law.name()},
            {"kappa", kappa},
            {"nu4", nu4},
            {"support", {iv.lo, iv.hi}}}},
          {"statistics", stats},
          {"kernel_grid", grid},
          {"request", detail::theory_request_json(t)},
          {"config", config_to_json(c)}};
}

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

inline json comparison_json(const ComparisonReport& r) {
  json entries = json::array();
  for (const auto& e : r.entries)
    entries.push_back({{"label", e.label},
                       {"theory", e.theory},
                       {"ratio", e.ratio},
                       {"oracle_backed", e.oracle_backed},
                       {"pass", e.pass},
                       {"note", e.note}});
  return {{"statistic", r.statistic},
          {"empirical_variance", r.empirical_variance},
          {"se_variance", r.se_variance},
          {"empirical_mean", r.empirical_mean},
          {"se_mean", r.se_mean},
          {"entries", entries},
          {"pass", r.pass()}};
}

namespace detail {

inline SummaryStats summary_from_json(const json& j) {
  SummaryStats s;
  s.count = j.at("count").get<std::size_t>();
  s.mean = j.at("mean").get<double>();
  s.variance = j.at("variance").get<double>();
  s.sd = j.at("sd").get<double>();
  s.se_mean = j.at("se_mean").get<double>();
  s.se_variance = j.at("se_variance").get<double>();
  s.skewness = j.at("skewness").get<double>();
  s.excess_kurtosis = j.at("excess_kurtosis").get<double>();
  s.se_skewness = j.at("se_skewness").get<double>();
  s.se_kurtosis = j.at("se_kurtosis").get<double>();
  s.min = j.at("min").get<double>();
  s.max = j.at("max").get<double>();
  s.degenerate = j.at("degenerate").get<bool>();
  return s;
}

}  // namespace detail

/// Matches statistics of a result document against a theory document by id.
inline std::vector<ComparisonReport> compare_documents(const json& result, const json& theory, const Tolerances& tol) {
  if (result.value("schema", "") != kResultSchema) throw InvalidArgument("compare: first input is not a result document");
  if (theory.value("schema", "") != kTheorySchema) throw InvalidArgument("compare: second input is not a theory document");
  const auto& rs = result.at("statistics");
  const auto& ts = theory.at("statistics");
  if (rs.empty() || ts.empty()) throw InvalidArgument("compare: no statistics to compare");
  std::vector<ComparisonReport> out;
  for (const auto& t : ts) {
    const std::string id = t.at("id").get<std::string>();
    const json* match = nullptr;
    for (const auto& r : rs)
      if (r.at("id").get<std::string>() == id) match = &r;
    if (!match) throw InvalidArgument("compare: statistic '" + id + "' is missing from the simulation result");
    TheoryValues tv;
    if (t.contains("paper")) tv.paper = t.at("paper").get<double>();
    if (t.contains("oracle")) tv.oracle = t.at("oracle").get<double>();
    if (t.contains("kernel")) tv.kernel = t.at("kernel").at("value").get<double>();
    out.push_back(compare_theory(id, detail::summary_from_json(match->at("summary")), tv, tol));
  }
  return out;
}

/// Fixed-width table for terminals.
inline std::string comparison_table(const std::vector<ComparisonReport>& reports) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-28s %-7s %12s %12s %9s %-5s %s\n", "statistic", "vs", "empirical", "theory",
                "ratio", "pass", "note");
  os << line;
  for (const auto& r : reports)
    for (const auto& e : r.entries) {
      const double emp = e.label == "mean" ? r.empirical_mean : r.empirical_variance;
      std::snprintf(line, sizeof line, "%-28s %-7s %12.5g %12.5g %9.4f %-5s %s\n", r.statistic.c_str(),
                    e.label.c_str(), emp, e.theory, e.ratio, e.oracle_backed ? (e.pass ? "yes" : "NO") : "-",
                    e.note.c_str());
      os << line;
    }
  return os.str();
}

/// Population spectral measure from text: "delta:c" or "discrete:a1:w1,a2:w2,...".
inline SpectralMeasure parse_measure_spec(const std::string& text) {
  auto number = [&](const std::string& item) {
    try {
      std::size_t used = 0;
      const double v = std::stod(item, &used);
      if (used == item.size()) return v;
    } catch (const std::exception&) {
    }
    throw InvalidArgument("bad number '" + item + "' in measure spec '" + text + "'");
  };
  if (text.rfind("delta:", 0) == 0) {
    const double c = number(text.substr(6));
    if (!(c > 0.0)) throw InvalidArgument("measure spec: point mass location must be > 0");
    return SpectralMeasure::point_mass(c);
  }
  if (text.rfind("discrete:", 0) == 0) {
    std::vector<std::pair<double, double>> pts;
    std::stringstream ss(text.substr(9));
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto colon = item.find(':');
      if (colon == std::string::npos) throw InvalidArgument("measure spec: entries are atom:weight, got '" + item + "'");
      pts.emplace_back(number(item.substr(0, colon)), number(item.substr(colon + 1)));
    }
    if (pts.empty()) throw InvalidArgument("measure spec: no atoms in '" + text + "'");
    std::sort(pts.begin(), pts.end());
    std::vector<double> atoms, weights;
    for (const auto& [a, w] : pts) {
      if (!atoms.empty() && atoms.back() == a) {
        weights.back() += w;
        continue;
      }
      atoms.push_back(a);
      weights.push_back(w);
    }
    if (!(atoms.back() > 0.0)) throw InvalidArgument("measure spec: at least one atom must be > 0");
    return SpectralMeasure::make(atoms, weights);
  }
  throw InvalidArgument("measure spec must be 'delta:c' or 'discrete:a:w,...', got '" + text + "'");
}

/// UTC time as 2026-01-31T12:00:00Z.
inline std::string utc_timestamp(std::chrono::system_clock::time_point t) {
  const std::time_t tt = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Record of one CLI run. Every listed output exists once the run succeeds.
struct RunManifest {
  std::string command;
  json config;
  std::uint64_t seed = 0;
  std::chrono::system_clock::time_point started, finished;
  std::vector<std::string> outputs;
};

inline json manifest_json(const RunManifest& m) {
  return {{"schema", kManifestSchema},
          {"tool", "lssdiff"},
          {"version", kToolVersion},
          {"command", m.command},
          {"seed", m.seed},
          {"started", utc_timestamp(m.started)},
          {"finished", utc_timestamp(m.finished)},
          {"outputs", m.outputs},
          {"config", m.config}};
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot write '" + path + "'");
  out << text;
  if (!out) throw InvalidArgument("write to '" + path + "' failed");
}

inline json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open '" + path + "'");
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::parse_error& e) {
    throw InvalidArgument("'" + path + "' is not valid JSON: " + e.what());
  }
}

}  // namespace lssdiff
