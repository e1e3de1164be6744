#pragma once

// Experiment harness: one flat configuration record, a worker pool that
// farms replicas out to threads, CSV and PGM artifact writers, and a run
// manifest with a checksummed file index. Replica results always fold in
// replica order, so every output byte is independent of the thread count.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "arw/chains.hpp"
#include "arw/lattice.hpp"
#include "arw/stabilize.hpp"

namespace arw {

/// The experiment families the harness can run.
enum class ExperimentKind {
  kAggregate,        // point-source growth and shape metrics
  kRegion,           // region-source growth
  kSprinkle,         // Poisson sprinkle stabilization on the torus
  kWiredSample,      // exact stationary samples of the driven wired box
  kHockey,           // density curve of the uniformly driven wired box
  kFree,             // free-chain run with a work-threshold detector
  kWake,             // wake-chain covariance after a fixed number of sweeps
  kCorrelations,     // two-point correlations of stationary samples
  kHyperuniformity,  // box-count variance curve of free-chain samples
  kQuadrature,       // quadrature screen on region-source outcomes
  kCoupling,         // lockstep coupling from a perturbed stationary state
};

/// Canonical lowercase name (the CLI subcommand) of an experiment kind.
const char* to_string(ExperimentKind kind);

/// Inverse of to_string. Throws std::invalid_argument on unknown names.
ExperimentKind experiment_from_string(const std::string& name);

/// Flat experiment description. JSON config files use exactly these keys
/// (each CLI flag maps to the key with dashes turned into underscores);
/// unknown keys are rejected. Fields an experiment does not read are
/// ignored by it but still validated for range.
struct ExperimentConfig {
  ExperimentKind experiment = ExperimentKind::kAggregate;
  int dim = 2;
  Coord side = 64;                           // key "L": lattice side
  double lambda = 1.0;
  SourceMode mode = SourceMode::kCollapsed;  // key "mode": literal|collapsed
  std::string scheduler = "fifo";            // fifo|lifo|random
  std::uint64_t seed = 1;
  std::uint64_t replicas = 1;
  std::uint64_t budget = 0;                  // instruction cap, 0 = default
  int threads = 1;
  std::string output_dir = "out";            // key "out"

  std::uint64_t n = 10000;        // source particles (aggregate)
  double tmax = 1.2;              // driving horizon in additions per site
  double tstep = 0.05;            // recording grid of the density curve
  double density = 0.3;           // torus fill fraction or sprinkle intensity
  std::uint64_t k = 0;            // explicit torus fill count, 0 = derive
  std::uint64_t steps = 10;       // chain steps, wake sweeps, coupling horizon
  int rmax = 5;                   // correlation / covariance offset range
  std::vector<Coord> boxes;       // square box sides, empty = default ladder
  double radius = 1.0;            // region ball radius
  double eps = 1.0 / 64;          // region mesh spacing
  double zeta_ref = 0;            // reference density, 0 = none
  std::string chain = "free";     // correlations source: free|wired
  std::string f_form = "nlog2n";  // threshold form: nlog2n|n32|cnlogn
  double f_scale = 1.0;           // the c in c n log n
  int probes = 50;                // sampled quadrature test centers
};

/// Parses a flat JSON object into a config. Rejects unknown keys, type
/// mismatches, and out-of-range values with std::invalid_argument.
ExperimentConfig config_from_json_text(const std::string& text);

/// Reads and parses a JSON config file. I/O failures raise
/// std::filesystem::filesystem_error, parse failures std::invalid_argument.
ExperimentConfig config_from_json_file(const std::string& path);

/// Canonical JSON echo of a config, keys sorted, values normalized.
std::string config_to_json(const ExperimentConfig& config);

/// Range-checks every field and cross-field rule (mode restrictions,
/// offset ranges against window sizes, fill counts against capacity).
/// Throws std::invalid_argument with a human-readable message.
void validate(const ExperimentConfig& config);

/// One artifact in the manifest's file index.
struct ArtifactEntry {
  std::string path;  // relative to the output directory
  std::uint64_t bytes = 0;
  std::string sha256;  // lowercase hex digest of the file contents
};

/// Record of one completed run: the config echo, per-replica seeds, budget
/// events, wall time, the key=value summary in print order, and the file
/// index. Written as manifest.json next to the artifacts.
struct RunManifest {
  std::string artifact_version;
  ExperimentConfig config;
  std::vector<std::uint64_t> replica_seeds;
  std::uint64_t budget_exceeded = 0;  // replicas that hit an instruction cap
  double wall_seconds = 0;
  std::vector<std::pair<std::string, std::string>> summary;
  std::vector<ArtifactEntry> files;  // sorted by path; excludes the manifest
};

/// Layout stamp recorded in every manifest.
inline constexpr const char* kArtifactVersion = "1";

/// SHA-256 of a file, lowercase hex. Throws std::filesystem::filesystem_error
/// when the file cannot be read.
std::string sha256_file(const std::filesystem::path& path);

/// Serializes the manifest and writes it atomically (temp file plus rename)
/// as manifest.json inside the given directory.
void write_manifest(const RunManifest& manifest, const std::filesystem::path& dir);

/// Parses a manifest.json produced by write_manifest.
RunManifest read_manifest(const std::filesystem::path& path);

/// Runs the configured experiment: validates, farms replicas to a pool of
/// config.threads workers, folds results in replica order, writes CSV and
/// PGM artifacts plus manifest.json under config.output_dir, and returns
/// the manifest. Nothing is written when validation fails. Identical
/// configs and seeds reproduce identical artifact bytes at any thread
/// count; a nonzero budget_exceeded marks replicas that hit their cap.
RunManifest run_experiment(const ExperimentConfig& config);

/// Shortest round-trip decimal rendering of a double (the CSV and summary
/// number format). Locale independent; nan and inf render as those words.
std::string format_double(double value);

}  // namespace arw
