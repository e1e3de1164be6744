// Command line front end: one subcommand per experiment, shared flags for
// the lattice and run parameters, JSON config files with flags taking
// precedence. Summary lines print as key=value on stdout; diagnostics go to
// stderr. Exit codes: 0 success, 2 usage or config error, 3 instruction
// budget exceeded, 4 I/O error.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "arw/harness.hpp"

namespace {

using arw::ExperimentConfig;

/// Values the user actually passed; everything else keeps config-file or
/// built-in defaults.
struct Overrides {
  std::optional<int> dim, threads, rmax, probes;
  std::optional<std::int64_t> side;
  std::optional<double> lambda, tmax, tstep, density, radius, eps, zeta_ref, f_scale;
  std::optional<std::string> mode, scheduler, chain, f_form, out;
  std::optional<std::uint64_t> seed, replicas, budget, n, k, steps;
  std::optional<std::vector<std::int64_t>> boxes;
  std::string config_path;
};

template <class T>
void opt(CLI::App* sub, const std::string& name, std::optional<T>& slot,
         const std::string& description) {
  sub->add_option_function<T>(
      name, [&slot](const T& v) { slot = v; }, description);
}

void add_shared(CLI::App* sub, Overrides& o) {
  opt<int>(sub, "--dim", o.dim, "Lattice dimension, 1 to 4 (default 2)");
  opt<std::int64_t>(sub, "--L", o.side, "Lattice side length (default 64)");
  opt<double>(sub, "--lambda", o.lambda, "Sleep rate, inf allowed in collapsed mode (default 1)");
  opt<std::uint64_t>(sub, "--seed", o.seed, "Master seed (default 1)");
  opt<std::uint64_t>(sub, "--replicas", o.replicas, "Independent replicas (default 1)");
  sub->add_option_function<std::string>(
         "--mode", [&o](const std::string& v) { o.mode = v; },
         "Instruction source: literal or collapsed (default collapsed)")
      ->check(CLI::IsMember({"literal", "collapsed"}));
  sub->add_option_function<std::string>(
         "--scheduler", [&o](const std::string& v) { o.scheduler = v; },
         "Active-site order: fifo, lifo, or random (default fifo)")
      ->check(CLI::IsMember({"fifo", "lifo", "random"}));
  opt<std::uint64_t>(sub, "--budget", o.budget,
                     "Instruction cap per stabilization, 0 = default cap");
  opt<int>(sub, "--threads", o.threads, "Worker threads across replicas (default 1)");
  opt<std::string>(sub, "--out", o.out, "Output directory (default out)");
  sub->add_option("--config", o.config_path,
                  "JSON config file; explicit flags win over file values");
}

void apply(const Overrides& o, ExperimentConfig& cfg) {
  if (o.dim) cfg.dim = *o.dim;
  if (o.side) cfg.side = arw::Coord(*o.side);
  if (o.lambda) cfg.lambda = *o.lambda;
  if (o.mode) cfg.mode = *o.mode == "literal" ? arw::SourceMode::kLiteral
                                              : arw::SourceMode::kCollapsed;
  if (o.scheduler) cfg.scheduler = *o.scheduler;
  if (o.seed) cfg.seed = *o.seed;
  if (o.replicas) cfg.replicas = *o.replicas;
  if (o.budget) cfg.budget = *o.budget;
  if (o.threads) cfg.threads = *o.threads;
  if (o.out) cfg.output_dir = *o.out;
  if (o.n) cfg.n = *o.n;
  if (o.tmax) cfg.tmax = *o.tmax;
  if (o.tstep) cfg.tstep = *o.tstep;
  if (o.density) cfg.density = *o.density;
  if (o.k) cfg.k = *o.k;
  if (o.steps) cfg.steps = *o.steps;
  if (o.rmax) cfg.rmax = *o.rmax;
  if (o.boxes) {
    cfg.boxes.clear();
    for (const std::int64_t s : *o.boxes) cfg.boxes.push_back(arw::Coord(s));
  }
  if (o.radius) cfg.radius = *o.radius;
  if (o.eps) cfg.eps = *o.eps;
  if (o.zeta_ref) cfg.zeta_ref = *o.zeta_ref;
  if (o.chain) cfg.chain = *o.chain;
  if (o.f_form) cfg.f_form = *o.f_form;
  if (o.f_scale) cfg.f_scale = *o.f_scale;
  if (o.probes) cfg.probes = *o.probes;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Activated random walk laboratory"};
  app.require_subcommand(1);
  Overrides o;

  CLI::App* aggregate = app.add_subcommand("aggregate", "Point-source growth and shape metrics");
  opt<std::uint64_t>(aggregate, "--n", o.n, "Source particles (default 10000)");

  CLI::App* region = app.add_subcommand("region", "Region-source stabilization");
  opt<double>(region, "--radius", o.radius, "Source ball radius (default 1)");
  opt<double>(region, "--eps", o.eps, "Lattice mesh spacing (default 1/64)");

  CLI::App* sprinkle = app.add_subcommand("sprinkle", "Poisson sprinkle on the torus");
  opt<double>(sprinkle, "--density", o.density, "Sprinkle intensity per site (default 0.3)");

  app.add_subcommand("wired-sample", "Exact stationary samples of the wired box");

  CLI::App* hockey = app.add_subcommand("hockey", "Density curve of the uniformly driven box");
  opt<double>(hockey, "--tmax", o.tmax, "Driving horizon in additions per site (default 1.2)");
  opt<double>(hockey, "--tstep", o.tstep, "Recording grid spacing (default 0.05)");
  opt<double>(hockey, "--zeta-ref", o.zeta_ref, "Reference density for the ramp distance");

  CLI::App* free_chain = app.add_subcommand("free", "Free chain with a work-threshold detector");
  opt<std::uint64_t>(free_chain, "--steps", o.steps, "Uniform additions to drive (default 10)");
  free_chain
      ->add_option_function<std::string>(
          "--f-form", [&o](const std::string& v) { o.f_form = v; },
          "Threshold form: nlog2n, n32, or cnlogn (default nlog2n)")
      ->check(CLI::IsMember({"nlog2n", "n32", "cnlogn"}));
  opt<double>(free_chain, "--f-scale", o.f_scale, "Scale c of the c n log n form (default 1)");

  CLI::App* wake = app.add_subcommand("wake", "Wake-chain covariance after fixed sweeps");
  opt<double>(wake, "--density", o.density, "Fill fraction of the torus (default 0.3)");
  opt<std::uint64_t>(wake, "--k", o.k, "Explicit fill count, 0 = derive from density");
  opt<std::uint64_t>(wake, "--steps", o.steps, "Wake sweeps before measuring (default 10)");
  opt<int>(wake, "--rmax", o.rmax, "Covariance offset range (default 5)");

  CLI::App* correlations =
      app.add_subcommand("correlations", "Two-point correlations of stationary samples");
  opt<double>(correlations, "--density", o.density, "Fill fraction of the torus (default 0.3)");
  opt<std::uint64_t>(correlations, "--k", o.k, "Explicit fill count, 0 = derive from density");
  opt<int>(correlations, "--rmax", o.rmax, "Correlation offset range (default 5)");
  correlations
      ->add_option_function<std::string>(
          "--chain", [&o](const std::string& v) { o.chain = v; },
          "Sample source: free (torus) or wired (box), default free")
      ->check(CLI::IsMember({"free", "wired"}));

  CLI::App* hyper = app.add_subcommand("hyperuniformity", "Box-count variance ladder");
  opt<double>(hyper, "--density", o.density, "Fill fraction of the torus (default 0.3)");
  opt<std::uint64_t>(hyper, "--k", o.k, "Explicit fill count, 0 = derive from density");
  hyper
      ->add_option_function<std::vector<std::int64_t>>(
          "--boxes", [&o](const std::vector<std::int64_t>& v) { o.boxes = v; },
          "Square box sides, e.g. --boxes 4,8,16 (default L/8, L/4, L/2)")
      ->delimiter(',');
  opt<double>(hyper, "--zeta-ref", o.zeta_ref, "Reference density for tail probabilities");

  CLI::App* quadrature = app.add_subcommand("quadrature", "Quadrature screen on region sources");
  opt<double>(quadrature, "--radius", o.radius, "Source ball radius (default 1)");
  opt<double>(quadrature, "--eps", o.eps, "Lattice mesh spacing (default 1/64)");
  opt<double>(quadrature, "--zeta-ref", o.zeta_ref, "Density factor of the support integral");
  opt<int>(quadrature, "--probes", o.probes, "Sampled paraboloid centers (default 50)");

  CLI::App* coupling = app.add_subcommand("coupling", "Lockstep coupling diagnostic");
  opt<std::uint64_t>(coupling, "--steps", o.steps, "Driving horizon in chain steps (default 10)");

  for (CLI::App* sub : {aggregate, region, sprinkle, app.get_subcommand("wired-sample"), hockey,
                        free_chain, wake, correlations, hyper, quadrature, coupling})
    add_shared(sub, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    ExperimentConfig cfg;
    if (!o.config_path.empty()) cfg = arw::config_from_json_file(o.config_path);
    cfg.experiment = arw::experiment_from_string(app.get_subcommands().front()->get_name());
    apply(o, cfg);
    const arw::RunManifest manifest = arw::run_experiment(cfg);
    for (const auto& [key, value] : manifest.summary) std::cout << key << "=" << value << "\n";
    std::cout << "out=" << cfg.output_dir << "\n";
    if (manifest.budget_exceeded > 0) {
      std::cerr << "warning: " << manifest.budget_exceeded
                << " replica(s) exceeded the instruction budget\n";
      return 3;
    }
    return 0;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::domain_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
