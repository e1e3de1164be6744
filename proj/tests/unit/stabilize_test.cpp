#include <doctest.h>

#include <cmath>
#include <map>
#include <vector>

#include "arw/lattice.hpp"
#include "arw/rng.hpp"
#include "arw/stabilize.hpp"

using namespace arw;

namespace {

// Dead-simple reference stabilizer: scan for the first unstable site in
// storage order, apply its next literal instruction via the public ops,
// repeat. A fourth scheduling order; by abelianness it must reproduce the
// engine's output bit for bit.
struct RefResult {
  Configuration final;
  std::map<std::uint64_t, std::uint64_t> odometer;
  std::uint64_t moves = 0, sleeps = 0, sleep_noops = 0, exits = 0;
};

RefResult reference_stabilize(Configuration cfg, const InstructionSource& src) {
  RefResult r{cfg, {}, 0, 0, 0, 0};
  const int dim = cfg.topology().dim();
  for (;;) {
    bool found = false;
    Site site;
    const auto& g = cfg.cells().geo;
    for (std::int64_t i = 0; i < g.cells && !found; ++i) {
      const auto w = cfg.cells().v[std::size_t(i)];
      if (w != 0 && w != Configuration::kSleeping) {
        site = Site{g.coords_of(i)};
        found = true;
      }
    }
    if (!found) break;
    const std::uint64_t k = r.odometer[pack_coords(site.c)]++;
    const Instruction ins = draw_instruction(src, src.epoch, site, dim, k);
    const ApplyEffect eff = apply_instruction(cfg, site, ins);
    r.moves += !ins.sleep;
    r.sleeps += eff.slept;
    r.sleep_noops += eff.noop;
    r.exits += eff.killed;
  }
  r.final = std::move(cfg);
  return r;
}

bool odometer_matches(const Grid<std::uint64_t>& grid,
                      const std::map<std::uint64_t, std::uint64_t>& map) {
  std::size_t nonzero = 0;
  for (std::int64_t i = 0; i < grid.geo.cells; ++i) {
    const auto v = grid.v[std::size_t(i)];
    if (v == 0) continue;
    ++nonzero;
    const auto it = map.find(pack_coords(grid.geo.coords_of(i)));
    if (it == map.end() || it->second != v) return false;
  }
  return nonzero == map.size();
}

std::uint64_t cell_sum(const Configuration& c) {
  std::uint64_t sum = 0;
  c.for_each_occupied([&](const Site&, SiteState st) { sum += st.n; });
  return sum;
}

}  // namespace

TEST_CASE("p_sleep from the sleep rate") {
  CHECK(InstructionSource::literal(1, 1.0).p_sleep() == doctest::Approx(0.5));
  CHECK(InstructionSource::literal(1, 4.0).p_sleep() == doctest::Approx(0.8));
  CHECK(InstructionSource::collapsed(1, INFINITY).p_sleep() == 1.0);
}

TEST_CASE("draw_instruction is pure") {
  const auto src = InstructionSource::literal(77, 2.0);
  const auto a = draw_instruction(src, 3, Site::of(5, -2), 2, 9);
  const auto b = draw_instruction(src, 3, Site::of(5, -2), 2, 9);
  CHECK(a == b);
}

TEST_CASE("draw_instruction marginals match p_sleep and uniform directions") {
  const auto src = InstructionSource::literal(123, 4.0);  // p_sleep = 0.8
  int sleeps = 0;
  std::array<int, 4> dirs{};
  const int n = 100000;
  for (int k = 0; k < n; ++k) {
    const auto ins = draw_instruction(src, 0, Site::of(3, 4), 2, std::uint64_t(k));
    if (ins.sleep) ++sleeps;
    else ++dirs[std::size_t(ins.dir)];
  }
  CHECK(std::abs(sleeps - int(0.8 * n)) < 5 * std::sqrt(n * 0.8 * 0.2));
  const double per_dir = 0.2 * n / 4;
  for (const int c : dirs) CHECK(std::abs(c - per_dir) < 5 * std::sqrt(per_dir));
}

TEST_CASE("empty configuration stabilizes immediately") {
  const auto cfg = Configuration(Topology::torus(2, 5));
  const auto out = stabilize(cfg, InstructionSource::literal(1, 1.0));
  CHECK(out.stabilized());
  CHECK(out.instructions_total == 0);
  CHECK(out.visited_count == 0);
}

TEST_CASE("scripted instruction hand trace on the 3-cycle") {
  auto cfg = Configuration(Topology::torus(1, 3));
  cfg.add_active(Site::of(0), 2);

  std::map<std::uint64_t, std::vector<Instruction>> stacks;
  stacks[pack_coords(Site::of(0).c)] = {Instruction::move(0), Instruction::make_sleep()};
  stacks[pack_coords(Site::of(1).c)] = {Instruction::make_sleep()};

  Stabilizer eng(cfg.topology());
  const auto st = eng.run_scripted(cfg, stacks);
  CHECK(st.status == StabilizeStatus::kStabilized);
  CHECK(cfg.state(Site::of(0)) == SiteState::sleeper());
  CHECK(cfg.state(Site::of(1)) == SiteState::sleeper());
  CHECK(cfg.state(Site::of(2)) == SiteState::empty());
  CHECK(eng.odometer().at(Site::of(0).c) == 2);
  CHECK(eng.odometer().at(Site::of(1).c) == 1);
  CHECK(eng.odometer().at(Site::of(2).c) == 0);
  CHECK(st.moves == 1);
  CHECK(st.sleeps == 2);
  CHECK(st.sleep_noops == 0);
}

TEST_CASE("single-site wired box sleeps half the time at lambda 1") {
  const auto topo = Topology::wired_box(1, 1);
  int sleepers = 0;
  const int n = 10000;
  for (int s = 0; s < n; ++s) {
    auto cfg = Configuration(topo);
    cfg.add_active(Site::of(1));
    const auto out = stabilize(cfg, InstructionSource::literal(std::uint64_t(s) + 1, 1.0));
    REQUIRE(out.stabilized());
    sleepers += out.final.sleeper_count() == 1;
  }
  CHECK(std::abs(sleepers / double(n) - 0.5) < 0.015);
}

TEST_CASE("apply_instruction contract") {
  auto cfg = Configuration(Topology::torus(1, 3));

  // Stable site is a contract violation.
  CHECK_THROWS(apply_instruction(cfg, Site::of(0), Instruction::make_sleep()));

  // Sleep at n=2 is a no-op; at n=1 it is effective.
  cfg.add_active(Site::of(0), 2);
  auto eff = apply_instruction(cfg, Site::of(0), Instruction::make_sleep());
  CHECK(eff.noop);
  CHECK(cfg.state(Site::of(0)) == SiteState::active(2));
  eff = apply_instruction(cfg, Site::of(0), Instruction::move(0));
  CHECK(eff.moved_to == Site::of(1));
  eff = apply_instruction(cfg, Site::of(0), Instruction::make_sleep());
  CHECK(eff.slept);
  CHECK(cfg.state(Site::of(0)) == SiteState::sleeper());

  // Arrival onto the sleeper wakes it.
  eff = apply_instruction(cfg, Site::of(1), Instruction::move(1));
  CHECK(eff.moved_to == Site::of(0));
  CHECK(cfg.state(Site::of(0)) == SiteState::active(2));

  // Killing boundary removes the particle.
  auto box = Configuration(Topology::wired_box(1, 2));
  box.add_active(Site::of(1));
  eff = apply_instruction(box, Site::of(1), Instruction::move(1));
  CHECK(eff.killed);
  CHECK(box.total_particles() == 0);
}

TEST_CASE("engine matches the scan-order reference on randomized cases") {
  rng::Xoshiro256 gen(2024);
  const double lambdas[] = {0.25, 1.0, 4.0};
  for (int case_i = 0; case_i < 30; ++case_i) {
    // Rotate through topologies and dimensions.
    Topology topo = Topology::torus(1, 3);
    switch (case_i % 5) {
      case 0: topo = Topology::torus(1, 3 + int(gen.next_below(5))); break;
      case 1: topo = Topology::torus(2, 3 + int(gen.next_below(3))); break;
      case 2: topo = Topology::wired_box(1, 2 + int(gen.next_below(5))); break;
      case 3: topo = Topology::wired_box(2, 2 + int(gen.next_below(4))); break;
      case 4: topo = Topology::dynamic_lattice(1 + int(gen.next_below(2))); break;
    }
    auto cfg = Configuration(topo);
    const GridGeometry g = cfg.geometry();
    const std::uint64_t max_particles =
        topo.finite() ? std::min<std::uint64_t>(topo.num_sites(), 10) : 8;
    const std::uint64_t n = 1 + gen.next() % max_particles;
    for (std::uint64_t p = 0; p < n; ++p) {
      Coords c{};
      for (int i = 0; i < topo.dim(); ++i) {
        if (topo.finite()) {
          const Coord lo = g.lo[i];
          c[i] = lo + Coord(gen.next_below(std::uint32_t(g.shape[i])));
        } else {
          c[i] = Coord(gen.next_below(5)) - 2;
        }
      }
      cfg.add_active(Site{c});
    }
    // Sprinkle a sleeper on an empty site half the time.
    if (gen.next() & 1) {
      const Site s = Site{g.coords_of(std::int64_t(gen.next() % std::uint64_t(g.cells)))};
      if (cfg.state(s).n == 0) cfg.set_state(s, SiteState::sleeper());
    }

    const auto src = InstructionSource::literal(gen.next(), lambdas[case_i % 3], case_i);
    const auto ref = reference_stabilize(cfg, src);
    const auto out = stabilize(cfg, src);

    REQUIRE(out.stabilized());
    CHECK(out.final.same_occupation(ref.final));
    CHECK(odometer_matches(out.odometer, ref.odometer));
    CHECK(out.moves == ref.moves);
    // The sleep/no-op split depends on consumption order (a sleep can land
    // effectively and be undone by a later arrival); only the sum is abelian.
    CHECK(out.sleeps + out.sleep_noops == ref.sleeps + ref.sleep_noops);
    CHECK(out.exits == ref.exits);
  }
}

TEST_CASE("scheduling policies agree bitwise in literal mode") {
  rng::Xoshiro256 gen(55);
  for (int case_i = 0; case_i < 10; ++case_i) {
    auto cfg = Configuration(Topology::torus(2, 5));
    const std::uint64_t n = 1 + gen.next_below(20);
    for (std::uint64_t p = 0; p < n; ++p)
      cfg.add_active(Site::of(Coord(gen.next_below(5)), Coord(gen.next_below(5))));
    const auto src = InstructionSource::literal(gen.next(), 1.0);

    const auto fifo = stabilize(cfg, src, SchedulerPolicy::fifo());
    const auto lifo = stabilize(cfg, src, SchedulerPolicy::lifo());
    const auto rnd = stabilize(cfg, src, SchedulerPolicy::random_queue(case_i * 7 + 1));
    CHECK(fifo.final.same_occupation(lifo.final));
    CHECK(fifo.final.same_occupation(rnd.final));
    CHECK(fifo.odometer.v == lifo.odometer.v);
    CHECK(fifo.odometer.v == rnd.odometer.v);
    CHECK(fifo.exits == lifo.exits);
    CHECK(fifo.exits == rnd.exits);
  }
}

TEST_CASE("conservation and counter identities") {
  rng::Xoshiro256 gen(77);
  for (int case_i = 0; case_i < 12; ++case_i) {
    auto cfg = Configuration(Topology::wired_box(2, 4));
    const std::uint64_t n = 1 + gen.next_below(30);
    for (std::uint64_t p = 0; p < n; ++p)
      cfg.add_active(Site::of(1 + Coord(gen.next_below(4)), 1 + Coord(gen.next_below(4))));
    const auto out = stabilize(cfg, InstructionSource::literal(gen.next(), 0.25));
    REQUIRE(out.stabilized());
    CHECK(out.initial_particles == n);
    CHECK(out.final.total_particles() + out.exits == n);
    CHECK(cell_sum(out.final) == out.final.total_particles());
    CHECK(out.moves + out.sleeps + out.sleep_noops == out.instructions_total);
    std::uint64_t od_sum = 0;
    for (const auto v : out.odometer.v) od_sum += v;
    CHECK(od_sum == out.instructions_total);
    CHECK(out.final.is_stable());
    // Visited sites are exactly the ones that consumed instructions.
    for (std::int64_t i = 0; i < out.odometer.geo.cells; ++i) {
      CHECK((out.odometer.v[std::size_t(i)] > 0) == (out.visited.v[std::size_t(i)] == 1));
    }
  }
}

TEST_CASE("budget exhaustion returns a conserved partial state") {
  auto cfg = Configuration(Topology::torus(2, 5));
  cfg.add_active(Site::of(0, 0), 10);
  const auto out = stabilize(cfg, InstructionSource::literal(5, 0.25), SchedulerPolicy::fifo(),
                             Budget{7});
  CHECK(out.status == StabilizeStatus::kBudgetExceeded);
  CHECK(out.instructions_total == 7);
  CHECK(out.final.total_particles() + out.exits == 10);
  CHECK(cell_sum(out.final) == out.final.total_particles());
}

TEST_CASE("torus refuses more particles than sites") {
  auto cfg = Configuration(Topology::torus(1, 3));
  cfg.add_active(Site::of(0), 4);
  CHECK_THROWS_AS((void)stabilize(cfg, InstructionSource::literal(1, 1.0)), std::domain_error);
}

TEST_CASE("collapsed mode with infinite sleep rate settles a lone particle") {
  auto cfg = Configuration(Topology::dynamic_lattice(2));
  cfg.add_active(Site::of(0, 0));
  const auto out = stabilize_collapsed(cfg, 9, INFINITY);
  REQUIRE(out.stabilized());
  CHECK(out.final.state(Site::of(0, 0)) == SiteState::sleeper());
  CHECK(out.instructions_total == 1);
  CHECK(out.sleeps == 1);
  CHECK(out.visited_count == 1);
}

TEST_CASE("collapsed mode never draws a sleep no-op") {
  auto cfg = Configuration(Topology::torus(2, 7));
  cfg.add_active(Site::of(3, 3), 30);
  const auto out = stabilize_collapsed(cfg, 4, 0.5);
  REQUIRE(out.stabilized());
  CHECK(out.sleep_noops == 0);
  // Sleeps counts events (wake/re-sleep cycles included), not final sleepers.
  CHECK(out.final.sleeper_count() == 30);
  CHECK(out.sleeps >= 30);
}

TEST_CASE("literal mode requires a finite sleep rate") {
  auto cfg = Configuration(Topology::torus(1, 3));
  cfg.add_active(Site::of(0));
  CHECK_THROWS_AS((void)stabilize(cfg, InstructionSource::literal(1, INFINITY)),
                  std::invalid_argument);
}

TEST_CASE("dynamic lattice growth preserves the stabilization") {
  // Enough particles at low sleep rate to force several storage growths.
  auto cfg = Configuration(Topology::dynamic_lattice(1));
  cfg.add_active(Site::of(0), 30);
  const auto src = InstructionSource::literal(31337, 0.25);
  const auto ref = reference_stabilize(cfg, src);
  const auto out = stabilize(cfg, src);
  REQUIRE(out.stabilized());
  CHECK(out.final.same_occupation(ref.final));
  CHECK(odometer_matches(out.odometer, ref.odometer));
  CHECK(out.final.total_particles() == 30);
  CHECK(out.final.sleeper_count() == 30);
}
