#pragma once

// The abelian stabilization engine.
//
// A site holding any active particle is unstable. Stabilization repeatedly
// picks an unstable site, consumes that site's next instruction and applies
// it, until no unstable site remains or the instruction budget runs out.
//
// In Literal mode the k-th instruction at site v during one stabilization
// epoch is a pure function of (run_seed, epoch, v, k): conceptually every
// site carries a pre-dealt stack of instructions. By the abelian property
// the final configuration and the per-site instruction counts (odometer) are
// then independent of the order in which unstable sites are processed, and
// with keyed stacks that holds bit for bit, not just in law.
//
// Collapsed mode draws from one sequential stream instead and skips the
// sleep draws that could not take effect (a Sleep at a site with n >= 2
// changes nothing). Results match Literal mode in law but depend on the
// scheduling policy bitwise. Sleep rate +inf is allowed here and turns the
// walk into internal DLA: a lone particle always sleeps.

#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <vector>

#include "arw/lattice.hpp"
#include "arw/rng.hpp"

namespace arw {

struct Instruction {
  bool sleep = false;
  int dir = 0;  // valid when !sleep; in [0, 2*dim)

  static Instruction make_sleep() { return {true, 0}; }
  static Instruction move(int dir) { return {false, dir}; }
  bool operator==(const Instruction&) const = default;
};

enum class SourceMode { kLiteral, kCollapsed };

/// Where instructions come from. `epoch` distinguishes stabilization calls
/// that share a run_seed (chain steps); lambda may be +inf in Collapsed mode.
struct InstructionSource {
  SourceMode mode = SourceMode::kLiteral;
  std::uint64_t run_seed = 1;
  std::uint64_t epoch = 0;
  double lambda = 1.0;

  double p_sleep() const {
    if (std::isinf(lambda)) return 1.0;
    return lambda / (1.0 + lambda);
  }

  static InstructionSource literal(std::uint64_t run_seed, double lambda,
                                   std::uint64_t epoch = 0) {
    return {SourceMode::kLiteral, run_seed, epoch, lambda};
  }
  static InstructionSource collapsed(std::uint64_t run_seed, double lambda,
                                     std::uint64_t epoch = 0) {
    return {SourceMode::kCollapsed, run_seed, epoch, lambda};
  }
};

/// Literal-mode instruction lookup: the index-th instruction at `site` in
/// the given epoch. Pure; consumption order cannot matter.
Instruction draw_instruction(const InstructionSource& source, std::uint64_t epoch,
                             const Site& site, int dim, std::uint64_t index);

enum class SchedulerKind { kFifo, kLifo, kRandomQueue };

struct SchedulerPolicy {
  SchedulerKind kind = SchedulerKind::kFifo;
  std::uint64_t seed = 0;  // RandomQueue only

  static SchedulerPolicy fifo() { return {SchedulerKind::kFifo, 0}; }
  static SchedulerPolicy lifo() { return {SchedulerKind::kLifo, 0}; }
  static SchedulerPolicy random_queue(std::uint64_t seed) {
    return {SchedulerKind::kRandomQueue, seed};
  }
};

inline constexpr std::uint64_t kDefaultBudget = 10'000'000'000ULL;

/// Cap on consumed instructions per stabilization; moves and sleep no-ops
/// count alike. Supercritical states can take exponentially long, so every
/// run carries a cap.
struct Budget {
  std::uint64_t max_instructions = kDefaultBudget;

  static Budget unlimited() { return {std::numeric_limits<std::uint64_t>::max()}; }
};

enum class StabilizeStatus { kStabilized, kBudgetExceeded };

struct StabilizationOutcome {
  StabilizeStatus status = StabilizeStatus::kStabilized;
  Configuration final;            // stable iff status == kStabilized
  Grid<std::uint64_t> odometer;   // instructions consumed per site
  Grid<std::uint8_t> visited;     // 1 on sites that ever held an active
  std::uint64_t visited_count = 0;
  std::uint64_t initial_particles = 0;
  std::uint64_t moves = 0;
  std::uint64_t sleeps = 0;       // effective sleeps
  std::uint64_t sleep_noops = 0;  // sleeps consumed at n >= 2
  std::uint64_t exits = 0;        // particles killed at the boundary
  std::uint64_t instructions_total = 0;

  bool stabilized() const { return status == StabilizeStatus::kStabilized; }
};

/// Reusable engine bound to one topology. Chains call run() once per step to
/// amortize the workspace; the free functions below wrap it for one-shot use.
/// Not shareable across threads.
class Stabilizer {
 public:
  explicit Stabilizer(const Topology& t);

  struct Stats {
    StabilizeStatus status = StabilizeStatus::kStabilized;
    std::uint64_t moves = 0;
    std::uint64_t sleeps = 0;
    std::uint64_t sleep_noops = 0;
    std::uint64_t exits = 0;
    std::uint64_t instructions_total = 0;
  };

  /// Stabilizes config in place. On budget exhaustion the partial state is
  /// left in config (conservation still holds: initial = current + exits).
  Stats run(Configuration& config, const InstructionSource& source,
            SchedulerPolicy policy = {}, Budget budget = {});

  /// Scripted stacks for tests: instruction k at a site comes from a fixed
  /// list. Throws if a stack underruns.
  Stats run_scripted(Configuration& config,
                     const std::map<std::uint64_t, std::vector<Instruction>>& stacks,
                     SchedulerPolicy policy = {}, Budget budget = {});

  const Grid<std::uint64_t>& odometer() const { return odometer_; }
  const Grid<std::uint8_t>& visited() const { return visited_; }
  std::uint64_t visited_count() const { return visited_count_; }

 private:
  template <class Drawer>
  Stats run_impl(Configuration& config, Drawer& drawer, SchedulerPolicy policy,
                 Budget budget);

  Topology topo_;
  Grid<std::uint64_t> odometer_;
  Grid<std::uint8_t> visited_;
  Grid<std::uint8_t> queued_;
  std::vector<std::uint64_t> queue_;
  std::uint64_t visited_count_ = 0;
};

/// One-shot stabilization; the input configuration is not modified.
StabilizationOutcome stabilize(const Configuration& config, const InstructionSource& source,
                               SchedulerPolicy policy = {}, Budget budget = {});

/// Collapsed-mode convenience wrapper (lambda may be +inf).
StabilizationOutcome stabilize_collapsed(const Configuration& config, std::uint64_t seed,
                                         double lambda, SchedulerPolicy policy = {},
                                         Budget budget = {}, std::uint64_t epoch = 0);

/// Effect of applying one instruction by hand.
struct ApplyEffect {
  bool slept = false;
  bool noop = false;
  bool killed = false;
  std::optional<Site> moved_to{};
};

/// Applies a single instruction to an unstable site. Contract violation
/// (stable site) throws. Used by reference implementations and tests; the
/// engine inlines the same transitions.
ApplyEffect apply_instruction(Configuration& config, const Site& site, Instruction instr);

}  // namespace arw
