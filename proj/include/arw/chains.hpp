#pragma once

// Drivers for the experimental settings built on the stabilizer: point and
// region sources on the growable lattice, Poisson sprinkling on a torus, the
// wired chain (driven box with killing), the free chain (driven torus), the
// wake chain (wake everything, restabilize), and a lockstep coupling
// diagnostic.
//
// Every driver keys its randomness off one run seed: instruction streams use
// per-step epochs, driving sites and sprinkles come from separately tagged
// streams. Two runs with equal parameters reproduce each other exactly.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "arw/lattice.hpp"
#include "arw/rng.hpp"
#include "arw/stabilize.hpp"

namespace arw {

/// Shared knobs for chain drivers.
struct ChainParams {
  double lambda = 1.0;
  SourceMode mode = SourceMode::kCollapsed;
  std::uint64_t run_seed = 1;
  SchedulerPolicy policy{};
  Budget budget{};

  InstructionSource source(std::uint64_t epoch) const {
    return InstructionSource{mode, run_seed, epoch, lambda};
  }
};

/// Running totals after each committed step; moves and exits accumulate over
/// the whole chain.
struct StepTotals {
  std::uint64_t step = 0;
  std::uint64_t particles = 0;
  std::uint64_t moves = 0;
  std::uint64_t exits = 0;
};

/// A chain position: a stable configuration plus step and epoch bookkeeping.
/// The epoch counter keys the instruction stream of the next step, so a
/// rolled-back step retries with the same instructions.
struct ChainState {
  Configuration config;
  std::uint64_t step = 0;
  std::uint64_t epoch_counter = 0;
  std::uint64_t total_moves = 0;
  std::uint64_t total_exits = 0;
  std::vector<StepTotals> cumulative;

  /// Throws std::invalid_argument unless the configuration is stable.
  explicit ChainState(Configuration c);
};

/// What one chain transition did. When the instruction budget ran out the
/// step was rolled back (states stay stable) and committed is false; the
/// stats still describe the abandoned work.
struct StepResult {
  bool committed = true;
  Stabilizer::Stats stats{};
};

/// Uniform driving sites over a finite domain, keyed separately from the
/// instruction streams so couplings can share or split either independently.
class DrivingStream {
 public:
  DrivingStream(const Topology& t, std::uint64_t run_seed);
  Site next();

 private:
  Topology topo_;
  rng::Xoshiro256 rng_;
};

/// One wired-chain transition: add an active at v, stabilize with killing.
StepResult wired_step(ChainState& state, const Site& v, const ChainParams& params,
                      Stabilizer& engine);

/// One free-chain transition: add an active at v on the torus and stabilize.
/// Throws std::domain_error when the torus is already fully occupied.
StepResult free_step(ChainState& state, const Site& v, const ChainParams& params,
                     Stabilizer& engine);

/// One wake-chain transition: wake every sleeper, then stabilize. Particle
/// count is conserved exactly.
StepResult wake_step(ChainState& state, const ChainParams& params, Stabilizer& engine);

/// Stabilization of n active particles dropped at the origin of the growable
/// d-dimensional lattice. The outcome's visited set is the aggregate trace.
StabilizationOutcome point_source(std::uint64_t n, double lambda, int dim,
                                  std::uint64_t seed,
                                  SourceMode mode = SourceMode::kCollapsed,
                                  SchedulerPolicy policy = {}, Budget budget = {});

/// Bounded region of R^d assembled as a union of balls and axis-aligned
/// boxes. Closed: boundary points count as inside.
class Region {
 public:
  static Region ball(int dim, const std::array<double, kMaxDim>& center, double radius);
  static Region box(int dim, const std::array<double, kMaxDim>& lo,
                    const std::array<double, kMaxDim>& hi);

  /// Union with another region of the same dimension.
  Region unite(const Region& other) const;

  int dim() const { return dim_; }
  bool contains(const std::array<double, kMaxDim>& p) const;

  /// Bounding box of the union.
  std::array<double, kMaxDim> lower() const;
  std::array<double, kMaxDim> upper() const;

 private:
  Region() = default;

  struct BallShape {
    std::array<double, kMaxDim> center{};
    double radius = 0;
  };
  struct BoxShape {
    std::array<double, kMaxDim> lo{};
    std::array<double, kMaxDim> hi{};
  };

  int dim_ = 0;
  std::vector<BallShape> balls_;
  std::vector<BoxShape> boxes_;
};

/// Lattice realization of a region at mesh eps: all sites x with eps*x
/// inside. Throws std::invalid_argument when the mesh is non-positive or the
/// discretization overflows the coordinate range.
std::vector<Site> region_sites(const Region& region, double eps);

/// Stabilization of one active per site of the region's lattice realization
/// on the growable lattice. Throws std::domain_error when the discretized
/// region is empty.
StabilizationOutcome region_source(const Region& region, double eps, double lambda,
                                   std::uint64_t seed,
                                   SourceMode mode = SourceMode::kCollapsed,
                                   SchedulerPolicy policy = {}, Budget budget = {});

/// Poisson sprinkle stabilization: the base outcome plus resample
/// bookkeeping. A sprinkle whose total would exceed one particle per site is
/// discarded and redrawn, which preserves the sprinkle law conditional on
/// feasibility.
struct SprinkleOutcome {
  StabilizationOutcome outcome;
  std::uint64_t sprinkled = 0;   // particles added by the accepted sprinkle
  std::uint64_t resamples = 0;   // oversize sprinkles discarded before it
};

/// Adds i.i.d. Poisson(t) actives per site of the torus Z_L^d on top of base
/// (empty when null; must be a stable configuration on the same torus) and
/// stabilizes. Throws std::domain_error when no feasible sprinkle appears
/// within 100000 draws.
SprinkleOutcome poisson_stabilize(Coord L, int dim, const Configuration* base, double t,
                                  double lambda, std::uint64_t seed,
                                  SourceMode mode = SourceMode::kCollapsed,
                                  SchedulerPolicy policy = {}, Budget budget = {});

/// Exact stationary sample of the driven wired box: stabilization of one
/// active per site. Throws std::runtime_error on budget exhaustion.
Configuration wired_exact_sample(const Topology& box, const ChainParams& params);

/// Same sample wrapped as a chain state, with epoch 0 already spent on the
/// sampling stabilization so subsequent steps draw fresh instructions.
ChainState wired_exact_state(const Topology& box, const ChainParams& params);

/// One recorded point of a uniform-driving density curve.
struct DensityPoint {
  std::uint64_t step = 0;
  double t = 0;               // step / #V
  double global_density = 0;  // particles / #V
  double bulk_density = 0;    // particles in the central half-side window
};

/// Curve data from driving a wired box at uniform sites.
struct DriveCurve {
  std::vector<DensityPoint> points;
  ChainState state;
};

/// Drives the wired box [1,L]^d with t_steps uniform-site additions,
/// recording global and bulk density every record_every steps (and at the
/// final step). The bulk window is the centered sub-box of side floor(L/2).
/// Stops early when a step exceeds its budget.
DriveCurve wired_drive_uniform(Coord L, int dim, std::uint64_t t_steps,
                               const ChainParams& params, std::uint64_t record_every = 1);

/// Superlinear work threshold f(#V) for free-chain runs; triggered_at is the
/// first step whose stabilization work (move count) reached f(#V).
struct ThresholdDetector {
  enum class Form { kNLogSquaredN, kNPowThreeHalves, kScaledNLogN };

  Form form = Form::kNLogSquaredN;
  double scale = 1.0;  // multiplies f; the c in c*N*logN
  std::optional<std::uint64_t> triggered_at{};

  /// f(#V) in move counts; logarithms are natural.
  double threshold(std::uint64_t num_sites) const;

  static ThresholdDetector n_log_squared_n() { return {}; }
  static ThresholdDetector n_pow_three_halves() {
    return {Form::kNPowThreeHalves, 1.0, {}};
  }
  static ThresholdDetector scaled_n_log_n(double c) {
    return {Form::kScaledNLogN, c, {}};
  }
};

/// Trace of a free-chain run.
struct FreeRunTrace {
  ChainState state;                        // final position
  std::vector<std::uint64_t> step_moves;   // moves of step k at [k-1]
  ThresholdDetector detector;              // input copy with triggered_at set
  double threshold = 0;                    // f(#V) actually used
  bool halted_on_budget = false;
  std::vector<Configuration> snapshots;    // at snapshot_steps, ascending

  std::optional<std::uint64_t> tau() const { return detector.triggered_at; }
};

/// Runs the free chain on the torus Z_L^d for `steps` uniform additions from
/// the empty configuration. Throws std::domain_error when steps exceeds the
/// site count (the torus cannot hold more particles). A budget-exceeded step
/// halts the run; its partial work still feeds the detector.
FreeRunTrace free_run(Coord L, int dim, std::uint64_t steps, const ChainParams& params,
                      ThresholdDetector detector = {}, bool stop_at_threshold = false,
                      std::span<const std::uint64_t> snapshot_steps = {});

/// Stabilization of k uniform drops placed all at once on the torus: equal
/// in law to the free chain's position after k steps, because staged and
/// one-shot stabilization of the same drops agree site for site once the
/// instruction stacks are fixed, and every step draws fresh stacks.
StabilizationOutcome free_batch_sample(Coord L, int dim, std::uint64_t k,
                                       const ChainParams& params);

/// Initial wake-chain state: n particles dropped uniformly at random on the
/// torus and stabilized (spending epoch 0). Throws std::domain_error when n
/// exceeds the site count and std::runtime_error on budget exhaustion.
ChainState wake_init(Coord L, int dim, std::uint64_t n, const ChainParams& params);

/// Outcome of a lockstep coupling attempt.
struct CouplingResult {
  std::optional<std::uint64_t> coupled_at;  // steps into the run; 0 = already equal
  std::uint64_t steps_run = 0;
  bool halted_on_budget = false;
};

/// Drives two states of one finite topology with identical uniform additions
/// and identical instruction stacks until their occupations coincide. Done
/// well, coincidence is absorbing, so the result upper-bounds the time the
/// two histories become one. Requires Literal mode (shared site-keyed
/// stacks) and aligned epoch counters.
CouplingResult coupling_run(ChainState a, ChainState b, const ChainParams& params,
                            std::uint64_t max_steps);

}  // namespace arw
