// Command-line driver: simulate, theory, compare, mp-density.
//
// Exit codes: 0 success, 1 a validation or comparison failed, 2 usage error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "lssdiff.hpp"

namespace fs = std::filesystem;
using namespace lssdiff;

namespace {

constexpr int kFailure = 1;
constexpr int kUsage = 2;

std::string join(const fs::path& dir, const std::string& name) { return (dir / name).string(); }

void prepare_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw InvalidArgument("cannot create output directory '" + dir + "'");
}

int cmd_simulate(const std::string& config_path, const std::string& out_dir, int workers, bool quiet) {
  RunManifest manifest;
  manifest.command = "simulate";
  manifest.started = std::chrono::system_clock::now();
  ConfigFile cf = load_config(config_path);
  if (workers > 0) cf.experiment.workers = workers;
  const ExperimentResult res = run_experiment(cf.experiment);

  prepare_dir(out_dir);
  const fs::path dir(out_dir);
  write_text(join(dir, "replicates.csv"), replicates_csv(res));
  manifest.outputs.push_back("replicates.csv");
  if (!cf.experiment.z_list.empty()) {
    write_text(join(dir, "process.csv"), process_csv(res));
    manifest.outputs.push_back("process.csv");
  }
  const json result = result_to_json(res);
  write_text(join(dir, "result.json"), result.dump(2) + "\n");
  manifest.outputs.push_back("result.json");

  manifest.config = config_to_json(cf.experiment, cf.theory);
  manifest.seed = cf.experiment.seed;
  manifest.finished = std::chrono::system_clock::now();
  manifest.outputs.push_back("manifest.json");
  write_text(join(dir, "manifest.json"), manifest_json(manifest).dump(2) + "\n");

  if (!quiet) {
    std::printf("%d replicates (%d failed), %d workers, %.2f s, config %s\n", cf.experiment.replications,
                res.failed_count(), res.meta.workers, res.meta.wall_seconds, res.meta.config_hash.c_str());
    std::printf("%-28s %12s %10s %12s %10s\n", "statistic", "mean", "se", "variance", "se");
    for (const auto& s : result.at("statistics")) {
      const auto& m = s.at("summary");
      std::printf("%-28s %12.5g %10.3g %12.5g %10.3g%s\n", s.at("id").get<std::string>().c_str(),
                  m.at("mean").get<double>(), m.at("se_mean").get<double>(), m.at("variance").get<double>(),
                  m.at("se_variance").get<double>(), m.at("degenerate").get<bool>() ? "  (degenerate)" : "");
    }
  }
  return 0;
}

void print_tagged(const char* tag, double value, const std::string& extra = "") {
  std::printf("  %-16s %.10g%s\n", tag, value, extra.c_str());
}

int cmd_theory(const std::string& config_path, const std::string& out_dir, bool quiet) {
  RunManifest manifest;
  manifest.command = "theory";
  manifest.started = std::chrono::system_clock::now();
  const ConfigFile cf = load_config(config_path);
  const json theory = compute_theory(cf.experiment, cf.theory);

  prepare_dir(out_dir);
  const fs::path dir(out_dir);
  write_text(join(dir, "theory.json"), theory.dump(2) + "\n");
  manifest.outputs.push_back("theory.json");
  manifest.config = config_to_json(cf.experiment, cf.theory);
  manifest.seed = cf.experiment.seed;
  manifest.finished = std::chrono::system_clock::now();
  manifest.outputs.push_back("manifest.json");
  write_text(join(dir, "manifest.json"), manifest_json(manifest).dump(2) + "\n");

  if (quiet) return 0;
  const auto& model = theory.at("model");
  std::printf("y = %.6g, kappa = %g, nu4 = %.6g, population %s\n", model.at("y").get<double>(),
              model.at("kappa").get<double>(), model.at("nu4").get<double>(),
              model.at("population").get<std::string>().c_str());
  for (const auto& s : theory.at("statistics")) {
    std::printf("%s\n", s.at("id").get<std::string>().c_str());
    if (s.contains("paper")) print_tagged("[paper]", s.at("paper").get<double>());
    if (s.contains("oracle")) print_tagged("[oracle]", s.at("oracle").get<double>());
    if (s.contains("residue_oracle")) print_tagged("[residue-oracle]", s.at("residue_oracle").get<double>());
    if (s.contains("kernel")) {
      const auto& k = s.at("kernel");
      char extra[96];
      std::snprintf(extra, sizeof extra, "  (error %.2e, %d nodes per side)", k.at("error").get<double>(),
                    k.at("nodes_per_side").get<int>());
      print_tagged("[kernel]", k.at("value").get<double>(), extra);
    }
    if (s.contains("unit_circle")) {
      const auto& u = s.at("unit_circle");
      char extra[96];
      std::snprintf(extra, sizeof extra, "  (extrapolant spread %.2e%s)", u.at("disagreement").get<double>(),
                    u.at("flagged").get<bool>() ? ", flagged" : "");
      print_tagged("[unit-circle]", u.at("value").get<double>(), extra);
    }
  }
  for (const auto& e : theory.at("kernel_grid")) {
    const auto& c = e.at("cov");
    std::printf("process cov q=(%d,%d) z1=(%g,%g) z2=(%g,%g): %.8g %+.8gi\n", e.at("q1").get<int>(),
                e.at("q2").get<int>(), e.at("z1")[0].get<double>(), e.at("z1")[1].get<double>(),
                e.at("z2")[0].get<double>(), e.at("z2")[1].get<double>(), c[0].get<double>(), c[1].get<double>());
  }
  return 0;
}

int cmd_compare(const std::string& result_path, const std::string& theory_path, double tolerance, double mean_se,
                const std::string& out_path) {
  const json result = read_json(result_path);
  const json theory = read_json(theory_path);
  const auto reports = compare_documents(result, theory, Tolerances{tolerance, mean_se});
  std::fputs(comparison_table(reports).c_str(), stdout);
  bool pass = true;
  json doc{{"schema", kCompareSchema},
           {"tolerance", {{"variance_relative", tolerance}, {"mean_se_multiple", mean_se}}},
           {"reports", json::array()}};
  for (const auto& r : reports) {
    pass = pass && r.pass();
    doc["reports"].push_back(comparison_json(r));
  }
  doc["pass"] = pass;
  if (!out_path.empty()) write_text(out_path, doc.dump(2) + "\n");
  std::printf("%s\n", pass ? "all oracle-backed checks passed" : "some oracle-backed checks FAILED");
  return pass ? 0 : kFailure;
}

int cmd_mp_density(double y, const std::string& h_spec, std::optional<double> from, std::optional<double> to,
                   int points, double epsilon, const std::string& out_path) {
  if (!(y > 0.0)) throw InvalidArgument("y must be > 0");
  if (points < 2) throw InvalidArgument("need at least 2 grid points");
  const MPModel model{y, parse_measure_spec(h_spec)};
  model.validate();
  const Interval iv = support_interval(model.H, y);
  const double pad = 0.2 * (iv.hi - iv.lo);
  const double lo = from.value_or(std::max(0.0, iv.lo - pad)), hi = to.value_or(iv.hi + pad);
  if (!(lo < hi)) throw InvalidArgument("grid needs from < to");

  std::ostringstream os;
  os << "# schema=lssdiff.mp_density/1\n";
  os << "# y=" << format_double(y) << " H=" << h_spec << " epsilon=" << format_double(epsilon) << "\n";
  os << "# support bounds [" << format_double(iv.lo) << ", " << format_double(iv.hi) << "]\n";
  if (y > 1.0) os << "# point mass " << format_double(1.0 - 1.0 / y) << " at 0 (1 - 1/y), not included below\n";
  os << "x,density\n";
  for (int i = 0; i < points; ++i) {
    const double x = lo + (hi - lo) * i / (points - 1);
    os << format_double(x) << ',' << format_double(mp_density(model, x, epsilon)) << '\n';
  }
  if (out_path.empty() || out_path == "-") std::fputs(os.str().c_str(), stdout);
  else write_text(out_path, os.str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Simulation and theory for differences of linear spectral statistics of sample covariance matrices"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress the console summary");
  app.set_version_flag("--version", std::string("lssdiff ") + kToolVersion);

  std::string config, out_dir;
  int workers = 0;
  auto* sim = app.add_subcommand("simulate", "Run the Monte Carlo experiment described by a config file");
  sim->add_option("-c,--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  sim->add_option("-o,--out", out_dir, "Output directory")->required();
  sim->add_option("-w,--workers", workers, "Worker threads (default: config, then LSSDIFF_WORKERS)")
      ->check(CLI::NonNegativeNumber);

  auto* th = app.add_subcommand("theory", "Evaluate limiting covariances and kernels for a config");
  th->add_option("-c,--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  th->add_option("-o,--out", out_dir, "Output directory")->required();

  std::string result_path, theory_path, compare_out;
  double tolerance = 0.10, mean_se = 5.0;
  auto* cmp = app.add_subcommand("compare", "Compare a simulation result against a theory document");
  cmp->add_option("-r,--result", result_path, "result.json from simulate")->required();
  cmp->add_option("-t,--theory", theory_path, "theory.json from theory")->required();
  cmp->add_option("--tolerance", tolerance, "Relative tolerance on variances")->check(CLI::PositiveNumber);
  cmp->add_option("--mean-se", mean_se, "Allowed |mean| in standard errors")->check(CLI::PositiveNumber);
  cmp->add_option("-o,--out", compare_out, "Write the report as JSON");

  double y = 0.0, epsilon = 1e-4;
  std::string h_spec = "delta:1", density_out;
  std::optional<double> from, to;
  int points = 401;
  auto* mpd = app.add_subcommand("mp-density", "Tabulate the limiting spectral density");
  mpd->add_option("-y,--ratio", y, "Dimension ratio p/n")->required();
  mpd->add_option("-H,--population", h_spec, "delta:c or discrete:a1:w1,a2:w2,...");
  mpd->add_option("--from", from, "Grid start (default: below the support)");
  mpd->add_option("--to", to, "Grid end (default: above the support)");
  mpd->add_option("--points", points, "Grid size");
  mpd->add_option("--epsilon", epsilon, "Imaginary offset of the evaluation line")->check(CLI::PositiveNumber);
  mpd->add_option("-o,--out", density_out, "CSV path, '-' for stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kUsage;
  }

  try {
    if (*sim) return cmd_simulate(config, out_dir, workers, quiet);
    if (*th) return cmd_theory(config, out_dir, quiet);
    if (*cmp) return cmd_compare(result_path, theory_path, tolerance, mean_se, compare_out);
    if (*mpd) return cmd_mp_density(y, h_spec, from, to, points, epsilon, density_out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
  return kFailure;
}
