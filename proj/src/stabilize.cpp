#include "arw/stabilize.hpp"

#include <cmath>
#include <stdexcept>

namespace arw {

namespace {

constexpr std::uint64_t kSiteSalt = 0x7c6f5d4b3a291807ULL;

/// Shared literal-mode lookup so the engine and draw_instruction cannot
/// drift apart: instruction = f(key(run_seed, epoch), site, index).
inline Instruction literal_draw(std::uint64_t key, std::uint64_t threshold,
                                std::uint32_t two_d, std::uint64_t packed_site,
                                std::uint64_t index) {
  const std::uint64_t site_hash = rng::mix64(packed_site + kSiteSalt);
  const auto words = rng::Philox4x32::words(key, index, site_hash);
  if (words[0] < threshold) return Instruction::make_sleep();
  return Instruction::move(int(rng::scale_below(words[1], two_d)));
}

inline std::uint64_t literal_key(std::uint64_t run_seed, std::uint64_t epoch) {
  return rng::derive_seed(run_seed, epoch, rng::StreamTag::kInstructions);
}

struct LiteralDrawer {
  std::uint64_t key;
  std::uint64_t threshold;
  std::uint32_t two_d;

  Instruction draw(std::uint64_t packed, std::uint32_t /*cell*/, std::uint64_t index) {
    return literal_draw(key, threshold, two_d, packed, index);
  }
};

/// Sequential drawer that skips ineffective sleep draws: a crowded site can
/// only move, so only the direction is sampled. Lone particles draw the
/// sleep test and, if they move, an independent direction word.
struct CollapsedDrawer {
  rng::Xoshiro256 rng;
  std::uint64_t threshold;
  bool always_sleep;  // lambda == +inf
  std::uint32_t two_d;

  Instruction draw(std::uint64_t /*packed*/, std::uint32_t cell, std::uint64_t /*index*/) {
    if (cell == 1) {
      if (always_sleep) return Instruction::make_sleep();
      if (rng.next() < threshold) return Instruction::make_sleep();
    }
    return Instruction::move(int(rng::scale_below(rng.next(), two_d)));
  }
};

struct ScriptedDrawer {
  const std::map<std::uint64_t, std::vector<Instruction>>* stacks;

  Instruction draw(std::uint64_t packed, std::uint32_t /*cell*/, std::uint64_t index) {
    const auto it = stacks->find(packed);
    if (it == stacks->end() || index >= it->second.size())
      throw std::out_of_range("scripted instruction stack underrun");
    return it->second[std::size_t(index)];
  }
};

}  // namespace

Instruction draw_instruction(const InstructionSource& source, std::uint64_t epoch,
                             const Site& site, int dim, std::uint64_t index) {
  if (source.mode != SourceMode::kLiteral)
    throw std::logic_error("draw_instruction addresses literal-mode stacks only");
  if (std::isinf(source.lambda))
    throw std::invalid_argument("literal mode requires a finite sleep rate");
  return literal_draw(literal_key(source.run_seed, epoch),
                      rng::probability_threshold(source.p_sleep()),
                      std::uint32_t(2 * dim), pack_coords(site.c), index);
}

Stabilizer::Stabilizer(const Topology& t) : topo_(t) {}

template <class Drawer>
Stabilizer::Stats Stabilizer::run_impl(Configuration& cfg, Drawer& drawer,
                                       SchedulerPolicy policy, Budget budget) {
  Stats st;
  auto& cells = cfg.cells_mut();
  if (!(odometer_.geo == cells.geo)) {
    odometer_ = Grid<std::uint64_t>(cells.geo);
    visited_ = Grid<std::uint8_t>(cells.geo);
    queued_ = Grid<std::uint8_t>(cells.geo);
  } else {
    odometer_.clear();
    visited_.clear();
    queued_.clear();
  }
  visited_count_ = 0;
  queue_.clear();
  std::size_t head = 0;  // FIFO read position
  rng::Xoshiro256 sched_rng(policy.seed);

  const std::uint64_t initial = cfg.total_particles();

  for (std::int64_t i = 0; i < cells.geo.cells; ++i) {
    const std::uint32_t w = cells.v[std::size_t(i)];
    if (w == 0 || w == Configuration::kSleeping) continue;
    visited_.v[std::size_t(i)] = 1;
    ++visited_count_;
    queued_.v[std::size_t(i)] = 1;
    queue_.push_back(pack_coords(cells.geo.coords_of(i)));
  }

  const TopologyKind kind = topo_.kind();

  while (true) {
    if (queue_.size() == head) {
      st.status = StabilizeStatus::kStabilized;
      break;
    }
    if (st.instructions_total >= budget.max_instructions) {
      st.status = StabilizeStatus::kBudgetExceeded;
      break;
    }

    std::uint64_t w = 0;
    switch (policy.kind) {
      case SchedulerKind::kFifo:
        w = queue_[head++];
        if (head >= 4096 && head * 2 >= queue_.size()) {
          queue_.erase(queue_.begin(), queue_.begin() + std::ptrdiff_t(head));
          head = 0;
        }
        break;
      case SchedulerKind::kLifo:
        w = queue_.back();
        queue_.pop_back();
        break;
      case SchedulerKind::kRandomQueue: {
        const std::uint32_t n = std::uint32_t(queue_.size());
        const std::uint32_t j = sched_rng.next_below(n);
        w = queue_[j];
        queue_[j] = queue_.back();
        queue_.pop_back();
        break;
      }
    }

    const Coords c = unpack_coords(w);
    const std::int64_t idx = cells.geo.index_of(c);
    queued_.v[std::size_t(idx)] = 0;
    const std::uint32_t cell = cells.v[std::size_t(idx)];
    // Queued sites stay unstable until their own instruction fires: arrivals
    // only add particles, so cell is a positive active count here.
    const std::uint64_t index = odometer_.v[std::size_t(idx)]++;
    const Instruction ins = drawer.draw(w, cell, index);
    ++st.instructions_total;

    if (ins.sleep) {
      if (cell == 1) {
        cells.v[std::size_t(idx)] = Configuration::kSleeping;
        ++st.sleeps;
      } else {
        ++st.sleep_noops;
        queued_.v[std::size_t(idx)] = 1;
        queue_.push_back(w);
      }
      continue;
    }

    ++st.moves;
    cells.v[std::size_t(idx)] = cell - 1;
    if (cell != 1) {
      queued_.v[std::size_t(idx)] = 1;
      queue_.push_back(w);
    }

    const int axis = ins.dir >> 1;
    Coords d = c;
    d[axis] += (ins.dir & 1) ? -1 : 1;
    if (kind == TopologyKind::kWiredBox) {
      if (d[axis] < 1 || d[axis] > topo_.side(axis)) {
        ++st.exits;
        continue;
      }
    } else if (kind == TopologyKind::kTorus) {
      if (d[axis] < 0) d[axis] += topo_.side(axis);
      else if (d[axis] >= topo_.side(axis)) d[axis] -= topo_.side(axis);
    } else if (!cells.geo.covers(d)) {
      cfg.ensure_covered(Site{d});  // throws past the coordinate limit
      odometer_.re_embed(cells.geo);
      visited_.re_embed(cells.geo);
      queued_.re_embed(cells.geo);
    }

    const std::int64_t di = cells.geo.index_of(d);
    const std::uint32_t dw = cells.v[std::size_t(di)];
    cells.v[std::size_t(di)] = (dw == Configuration::kSleeping) ? 2u : dw + 1u;
    if (!visited_.v[std::size_t(di)]) {
      visited_.v[std::size_t(di)] = 1;
      ++visited_count_;
    }
    if (!queued_.v[std::size_t(di)]) {
      queued_.v[std::size_t(di)] = 1;
      queue_.push_back(pack_coords(d));
    }
  }

  cfg.set_total(initial - st.exits);
  return st;
}

Stabilizer::Stats Stabilizer::run(Configuration& cfg, const InstructionSource& source,
                                  SchedulerPolicy policy, Budget budget) {
  if (!(cfg.topology() == topo_)) throw std::logic_error("configuration/engine topology mismatch");
  if (topo_.kind() == TopologyKind::kTorus && cfg.total_particles() > topo_.num_sites())
    throw std::domain_error("torus cannot stabilize more particles than sites");

  const std::uint32_t two_d = std::uint32_t(2 * topo_.dim());
  if (source.mode == SourceMode::kLiteral) {
    if (std::isinf(source.lambda))
      throw std::invalid_argument("literal mode requires a finite sleep rate");
    LiteralDrawer drawer{literal_key(source.run_seed, source.epoch),
                         rng::probability_threshold(source.p_sleep()), two_d};
    return run_impl(cfg, drawer, policy, budget);
  }
  const bool inf = std::isinf(source.lambda);
  CollapsedDrawer drawer{
      rng::Xoshiro256(literal_key(source.run_seed, source.epoch)),
      inf ? 0 : rng::probability_threshold(source.p_sleep()), inf, two_d};
  return run_impl(cfg, drawer, policy, budget);
}

Stabilizer::Stats Stabilizer::run_scripted(
    Configuration& cfg, const std::map<std::uint64_t, std::vector<Instruction>>& stacks,
    SchedulerPolicy policy, Budget budget) {
  if (!(cfg.topology() == topo_)) throw std::logic_error("configuration/engine topology mismatch");
  ScriptedDrawer drawer{&stacks};
  return run_impl(cfg, drawer, policy, budget);
}

namespace {

StabilizationOutcome finish_outcome(Configuration work, const Stabilizer& eng,
                                    Stabilizer::Stats st, std::uint64_t initial) {
  return StabilizationOutcome{st.status,
                              std::move(work),
                              eng.odometer(),
                              eng.visited(),
                              eng.visited_count(),
                              initial,
                              st.moves,
                              st.sleeps,
                              st.sleep_noops,
                              st.exits,
                              st.instructions_total};
}

}  // namespace

StabilizationOutcome stabilize(const Configuration& config, const InstructionSource& source,
                               SchedulerPolicy policy, Budget budget) {
  Configuration work = config;
  const std::uint64_t initial = work.total_particles();
  Stabilizer eng(config.topology());
  const auto st = eng.run(work, source, policy, budget);
  return finish_outcome(std::move(work), eng, st, initial);
}

StabilizationOutcome stabilize_collapsed(const Configuration& config, std::uint64_t seed,
                                         double lambda, SchedulerPolicy policy, Budget budget,
                                         std::uint64_t epoch) {
  return stabilize(config, InstructionSource::collapsed(seed, lambda, epoch), policy, budget);
}

ApplyEffect apply_instruction(Configuration& config, const Site& site, Instruction instr) {
  const SiteState st = config.state(site);
  if (st.stable()) throw std::logic_error("apply_instruction on a stable site");

  ApplyEffect eff;
  if (instr.sleep) {
    if (st.n == 1) {
      config.set_state(site, SiteState::sleeper());
      eff.slept = true;
    } else {
      eff.noop = true;
    }
    return eff;
  }

  if (instr.dir < 0 || instr.dir >= 2 * config.topology().dim())
    throw std::invalid_argument("direction index out of range");
  config.set_state(site, SiteState::active(st.n - 1));
  const Neighbor nb = neighbor(config.topology(), site, instr.dir);
  if (nb.kill) {
    eff.killed = true;
  } else {
    config.add_active(nb.site);
    eff.moved_to = nb.site;
  }
  return eff;
}

}  // namespace arw
