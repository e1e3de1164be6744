#pragma once

// Lattice geometry and particle configurations.
//
// Three site spaces are supported: a finite box with absorbing (killing)
// boundary, a torus, and an unbounded lattice whose backing store grows on
// demand. Coordinates are global: the box occupies [1, L_i] per axis, the
// torus [0, L_i), and the growable lattice is centered on the origin.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "arw/grid.hpp"

namespace arw {

struct Site {
  Coords c{};

  Site() = default;
  explicit Site(const Coords& coords) : c(coords) {}
  static Site of(Coord x) { return Site{{x, 0, 0, 0}}; }
  static Site of(Coord x, Coord y) { return Site{{x, y, 0, 0}}; }
  static Site of(Coord x, Coord y, Coord z) { return Site{{x, y, z, 0}}; }

  bool operator==(const Site&) const = default;
};

std::string to_string(const Site& s, int dim);

enum class TopologyKind { kWiredBox, kTorus, kDynamicLattice };

/// Site space plus boundary rule. Immutable after construction.
class Topology {
 public:
  static Topology wired_box(std::span<const Coord> sides);
  static Topology torus(std::span<const Coord> sides);  // every side >= 3
  static Topology dynamic_lattice(int dim);

  // Convenience for cubes.
  static Topology wired_box(int dim, Coord side);
  static Topology torus(int dim, Coord side);

  TopologyKind kind() const { return kind_; }
  int dim() const { return dim_; }
  Coord side(int axis) const { return sides_[axis]; }
  bool finite() const { return kind_ != TopologyKind::kDynamicLattice; }

  /// Number of sites; finite topologies only.
  std::uint64_t num_sites() const;

  bool contains(const Site& s) const;

  /// Geometry covering the full domain (finite) or an initial centered box
  /// that configurations grow from (dynamic).
  GridGeometry domain_geometry() const;

  bool operator==(const Topology&) const = default;

 private:
  TopologyKind kind_{};
  int dim_ = 0;
  Coords sides_{};  // unused for dynamic lattices
};

/// One step from a site: either a neighbouring site or the killing boundary.
struct Neighbor {
  bool kill = false;
  Site site{};
};

/// Neighbour in direction `dir` of `2*dim` directions, ordered
/// +x, -x, +y, -y, ... (axis = dir/2, sign flips with the low bit).
Neighbor neighbor(const Topology& t, const Site& s, int dir);

/// All 2*dim neighbour entries in direction order.
std::vector<Neighbor> neighbors(const Topology& t, const Site& s);

/// Occupation of one site. A sleeping particle is always alone.
struct SiteState {
  std::uint32_t n = 0;
  bool asleep = false;

  bool stable() const { return n == 0 || asleep; }
  bool operator==(const SiteState&) const = default;

  static SiteState empty() { return {0, false}; }
  static SiteState active(std::uint32_t k) { return {k, false}; }
  static SiteState sleeper() { return {1, true}; }
};

/// Particle configuration over a topology. Cell encoding: 0 = empty,
/// k = k active particles, all-ones sentinel = one sleeping particle.
class Configuration {
 public:
  static constexpr std::uint32_t kSleeping = 0xFFFFFFFFu;

  explicit Configuration(const Topology& t);

  const Topology& topology() const { return topo_; }
  const GridGeometry& geometry() const { return cells_.geo; }

  SiteState state(const Site& s) const;
  void set_state(const Site& s, SiteState st);

  /// Adds k active particles; an arriving particle wakes a sleeper.
  void add_active(const Site& s, std::uint32_t k = 1);

  /// Turns every sleeping particle into an active one.
  void wake_all();

  std::uint64_t total_particles() const { return total_; }
  std::uint64_t sleeper_count() const;
  bool is_stable() const;

  /// Particles per site, total_particles / num_sites; finite topologies only.
  /// May exceed 1 for unstable configurations.
  double density() const;

  void for_each_occupied(const std::function<void(const Site&, SiteState)>& fn) const;

  /// Semantic equality: same topology and same occupation, regardless of how
  /// far the backing stores have grown.
  bool same_occupation(const Configuration& other) const;

  /// Grows the backing store (dynamic lattices) to cover s.
  void ensure_covered(const Site& s);

  // Direct cell access for the stabilizer and estimators.
  const Grid<std::uint32_t>& cells() const { return cells_; }
  Grid<std::uint32_t>& cells_mut() { return cells_; }
  void set_total(std::uint64_t t) { total_ = t; }

  static std::uint32_t encode(SiteState st) {
    return st.asleep ? kSleeping : st.n;
  }
  static SiteState decode(std::uint32_t w) {
    if (w == kSleeping) return SiteState::sleeper();
    return SiteState{w, false};
  }

 private:
  Topology topo_;
  Grid<std::uint32_t> cells_;
  std::uint64_t total_ = 0;
};

/// Plane of a d>2 snapshot: coordinates on axes other than `keep_x`/`keep_y`
/// are fixed. For d <= 2 the default (identity) slice is used.
struct SliceSpec {
  int keep_x = 0;
  int keep_y = 1;
  Coords fixed{};  // values on the remaining axes
};

/// Writes an ASCII PGM snapshot: 0 empty, 255 sleeping, 128 active.
/// Row 0 of the image is the smallest y. One-dimensional configurations
/// produce a height-1 image; higher dimensions require a slice.
void write_pgm(const Configuration& c, std::ostream& out, const SliceSpec& slice = {});
void write_pgm_file(const Configuration& c, const std::string& path, const SliceSpec& slice = {});

}  // namespace arw
