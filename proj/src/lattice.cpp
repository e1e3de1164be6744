#include "arw/lattice.hpp"

#include <algorithm>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace arw {

std::string to_string(const Site& s, int dim) {
  std::ostringstream os;
  os << '(';
  for (int i = 0; i < dim; ++i) {
    if (i) os << ',';
    os << s.c[i];
  }
  os << ')';
  return os.str();
}

static void check_dim(int dim) {
  if (dim < 1 || dim > kMaxDim) throw std::invalid_argument("dimension must be in [1,4]");
}

Topology Topology::wired_box(std::span<const Coord> sides) {
  check_dim(int(sides.size()));
  Topology t;
  t.kind_ = TopologyKind::kWiredBox;
  t.dim_ = int(sides.size());
  for (int i = 0; i < t.dim_; ++i) {
    if (sides[i] < 1 || sides[i] > kCoordLimit - 1)
      throw std::invalid_argument("box side out of range");
    t.sides_[i] = sides[i];
  }
  return t;
}

Topology Topology::torus(std::span<const Coord> sides) {
  check_dim(int(sides.size()));
  Topology t;
  t.kind_ = TopologyKind::kTorus;
  t.dim_ = int(sides.size());
  for (int i = 0; i < t.dim_; ++i) {
    // Side >= 3 keeps the 2*dim neighbour multiset free of self-loops and
    // double edges, which the move rule relies on.
    if (sides[i] < 3 || sides[i] > kCoordLimit)
      throw std::invalid_argument("torus side out of range (minimum 3)");
    t.sides_[i] = sides[i];
  }
  return t;
}

Topology Topology::dynamic_lattice(int dim) {
  check_dim(dim);
  Topology t;
  t.kind_ = TopologyKind::kDynamicLattice;
  t.dim_ = dim;
  return t;
}

Topology Topology::wired_box(int dim, Coord side) {
  std::vector<Coord> s(std::size_t(dim), side);
  return wired_box(std::span<const Coord>(s));
}

Topology Topology::torus(int dim, Coord side) {
  std::vector<Coord> s(std::size_t(dim), side);
  return torus(std::span<const Coord>(s));
}

std::uint64_t Topology::num_sites() const {
  if (!finite()) throw std::logic_error("num_sites on an unbounded lattice");
  std::uint64_t n = 1;
  for (int i = 0; i < dim_; ++i) n *= std::uint64_t(sides_[i]);
  return n;
}

bool Topology::contains(const Site& s) const {
  switch (kind_) {
    case TopologyKind::kWiredBox:
      for (int i = 0; i < dim_; ++i)
        if (s.c[i] < 1 || s.c[i] > sides_[i]) return false;
      break;
    case TopologyKind::kTorus:
      for (int i = 0; i < dim_; ++i)
        if (s.c[i] < 0 || s.c[i] >= sides_[i]) return false;
      break;
    case TopologyKind::kDynamicLattice:
      for (int i = 0; i < dim_; ++i)
        if (s.c[i] < -kCoordLimit || s.c[i] > kCoordLimit) return false;
      break;
  }
  for (int i = dim_; i < kMaxDim; ++i)
    if (s.c[i] != 0) return false;
  return true;
}

GridGeometry Topology::domain_geometry() const {
  switch (kind_) {
    case TopologyKind::kWiredBox: {
      Coords lo{}, shape{};
      for (int i = 0; i < dim_; ++i) {
        lo[i] = 1;
        shape[i] = sides_[i];
      }
      return GridGeometry::box(dim_, lo, shape);
    }
    case TopologyKind::kTorus: {
      Coords lo{}, shape{};
      for (int i = 0; i < dim_; ++i) shape[i] = sides_[i];
      return GridGeometry::box(dim_, lo, shape);
    }
    case TopologyKind::kDynamicLattice:
      return GridGeometry::centered(dim_, 8);
  }
  throw std::logic_error("unreachable");
}

Neighbor neighbor(const Topology& t, const Site& s, int dir) {
  const int axis = dir >> 1;
  const Coord delta = (dir & 1) ? -1 : 1;
  Site n = s;
  n.c[axis] += delta;
  switch (t.kind()) {
    case TopologyKind::kWiredBox:
      if (n.c[axis] < 1 || n.c[axis] > t.side(axis)) return Neighbor{true, {}};
      break;
    case TopologyKind::kTorus:
      if (n.c[axis] < 0) n.c[axis] += t.side(axis);
      if (n.c[axis] >= t.side(axis)) n.c[axis] -= t.side(axis);
      break;
    case TopologyKind::kDynamicLattice:
      if (n.c[axis] < -kCoordLimit || n.c[axis] > kCoordLimit)
        throw std::runtime_error("lattice coordinate limit exceeded");
      break;
  }
  return Neighbor{false, n};
}

std::vector<Neighbor> neighbors(const Topology& t, const Site& s) {
  std::vector<Neighbor> out;
  out.reserve(std::size_t(2 * t.dim()));
  for (int dir = 0; dir < 2 * t.dim(); ++dir) out.push_back(neighbor(t, s, dir));
  return out;
}

Configuration::Configuration(const Topology& t)
    : topo_(t), cells_(t.domain_geometry()) {}

SiteState Configuration::state(const Site& s) const {
  if (!topo_.contains(s)) throw std::out_of_range("site outside topology");
  if (!cells_.geo.covers(s.c)) return SiteState::empty();
  return decode(cells_.at(s.c));
}

void Configuration::set_state(const Site& s, SiteState st) {
  if (!topo_.contains(s)) throw std::out_of_range("site outside topology");
  if (st.asleep && st.n != 1) throw std::invalid_argument("a sleeper is a single particle");
  ensure_covered(s);
  std::uint32_t& w = cells_.at(s.c);
  const SiteState old = decode(w);
  total_ += st.n;
  total_ -= old.n;
  w = encode(st);
}

void Configuration::add_active(const Site& s, std::uint32_t k) {
  if (k == 0) return;
  if (!topo_.contains(s)) throw std::out_of_range("site outside topology");
  ensure_covered(s);
  std::uint32_t& w = cells_.at(s.c);
  if (w == kSleeping) {
    w = 1 + k;  // the arrival wakes the sleeper
  } else {
    if (w > kSleeping - 1 - k) throw std::overflow_error("site occupation overflow");
    w += k;
  }
  total_ += k;
}

void Configuration::wake_all() {
  for (auto& w : cells_.v)
    if (w == kSleeping) w = 1;
}

std::uint64_t Configuration::sleeper_count() const {
  std::uint64_t n = 0;
  for (const auto& w : cells_.v) n += (w == kSleeping);
  return n;
}

bool Configuration::is_stable() const {
  // Any active particle, even a lone one, makes its site unstable.
  for (const auto& w : cells_.v)
    if (w != 0 && w != kSleeping) return false;
  return true;
}

double Configuration::density() const {
  return double(total_) / double(topo_.num_sites());
}

void Configuration::for_each_occupied(
    const std::function<void(const Site&, SiteState)>& fn) const {
  for (std::int64_t i = 0; i < cells_.geo.cells; ++i) {
    const std::uint32_t w = cells_.v[std::size_t(i)];
    if (w == 0) continue;
    fn(Site{cells_.geo.coords_of(i)}, decode(w));
  }
}

bool Configuration::same_occupation(const Configuration& other) const {
  if (!(topo_ == other.topo_)) return false;
  if (total_ != other.total_) return false;
  std::uint64_t mine = 0, theirs = 0;
  for (std::int64_t i = 0; i < cells_.geo.cells; ++i) {
    const std::uint32_t w = cells_.v[std::size_t(i)];
    if (w == 0) continue;
    ++mine;
    const Coords c = cells_.geo.coords_of(i);
    if (!other.cells_.geo.covers(c) || other.cells_.at(c) != w) return false;
  }
  for (const auto& w : other.cells_.v) theirs += (w != 0);
  return mine == theirs;
}

void Configuration::ensure_covered(const Site& s) {
  if (cells_.geo.covers(s.c)) return;
  if (topo_.finite()) throw std::logic_error("finite domain does not cover its own site");
  Coord need = 0;
  for (int i = 0; i < topo_.dim(); ++i) need = std::max(need, Coord(std::abs(s.c[i])));
  Coord r = Coord(cells_.geo.shape[0] / 2);
  while (r < need) r = std::min(Coord(kCoordLimit), Coord(r * 2));
  cells_.re_embed(GridGeometry::centered(topo_.dim(), r));
}

namespace {

int pgm_value(std::uint32_t w) {
  if (w == 0) return 0;
  if (w == Configuration::kSleeping) return 255;
  return 128;
}

}  // namespace

void write_pgm(const Configuration& c, std::ostream& out, const SliceSpec& slice) {
  const int dim = c.topology().dim();
  const GridGeometry& g = c.geometry();
  int ax = 0, ay = 1;
  Coords fixed{};
  if (dim > 2) {
    ax = slice.keep_x;
    ay = slice.keep_y;
    fixed = slice.fixed;
    if (ax == ay || ax < 0 || ay < 0 || ax >= dim || ay >= dim)
      throw std::invalid_argument("slice axes must be two distinct axes");
  }
  const Coord w = Coord(g.shape[ax]);
  const Coord h = dim == 1 ? 1 : Coord(g.shape[ay]);
  out << "P2\n" << w << ' ' << h << "\n255\n";
  // Row 0 carries the smallest y of the covered box.
  for (Coord row = 0; row < h; ++row) {
    for (Coord col = 0; col < w; ++col) {
      Coords p = fixed;
      p[ax] = g.lo[ax] + col;
      if (dim > 1) p[ay] = g.lo[ay] + row;
      for (int i = dim; i < kMaxDim; ++i) p[i] = 0;
      const int v = g.covers(p) ? pgm_value(c.cells().at(p)) : 0;
      out << v << (col + 1 == w ? '\n' : ' ');
    }
  }
}

void write_pgm_file(const Configuration& c, const std::string& path, const SliceSpec& slice) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path);
  write_pgm(c, f, slice);
  if (!f.flush()) throw std::runtime_error("write failed: " + path);
}

}  // namespace arw
