#include "arw/statistics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>

#include <boost/math/special_functions/gamma.hpp>

namespace arw {

namespace {

double norm_sq(const Coords& c, int dim) {
  double s = 0;
  for (int i = 0; i < dim; ++i) s += double(c[i]) * double(c[i]);
  return s;
}

/// Visits every cell of a geometry in storage order.
template <class Fn>
void for_each_cell(const GridGeometry& geo, Fn&& fn) {
  Coords c = geo.lo;
  for (std::int64_t idx = 0; idx < geo.cells; ++idx) {
    fn(idx, c);
    for (int i = 0; i < kMaxDim; ++i) {
      if (++c[i] < geo.lo[i] + Coord(geo.shape[i])) break;
      c[i] = geo.lo[i];
    }
  }
}

/// Checks that a finite-domain grid is laid out row-major from the domain
/// corner, which lets estimators index the raw cell vector directly.
void require_plain_layout(const GridGeometry& geo, const Topology& topo) {
  Coord base = topo.kind() == TopologyKind::kWiredBox ? 1 : 0;
  for (int i = 0; i < topo.dim(); ++i) {
    if (geo.lo[i] != base || Coord(geo.shape[i]) != topo.side(i)) {
      throw std::logic_error("statistics: unexpected finite-domain grid layout");
    }
  }
}

/// Euclidean-ball offsets of the given radius around the origin.
std::vector<Coords> ball_offsets(int dim, int radius) {
  std::vector<Coords> out;
  GridGeometry cube = GridGeometry::centered(dim, radius);
  for_each_cell(cube, [&](std::int64_t, const Coords& c) {
    if (norm_sq(c, dim) <= double(radius) * double(radius) + 1e-9) out.push_back(c);
  });
  return out;
}

struct Welford {
  std::uint64_t n = 0;
  double mean = 0;
  double m2 = 0;

  void add(double x) {
    ++n;
    double d = x - mean;
    mean += d / double(n);
    m2 += d * (x - mean);
  }
  double variance() const { return n > 1 ? m2 / double(n - 1) : 0.0; }
  double std_error() const { return n > 0 ? std::sqrt(variance() / double(n)) : 0.0; }
};

}  // namespace

namespace {

struct RadiusScan {
  double min_unvisited_sq = 0;  // squared inradius, exact on integer norms
  double max_visited_sq = -1;   // squared outradius; -1 when nothing visited
};

RadiusScan radius_scan(const StabilizationOutcome& outcome) {
  const GridGeometry& geo = outcome.visited.geo;
  const int dim = outcome.final.topology().dim();
  // Sites beyond the backing grid are unvisited, so the nearest coordinate
  // outside the grid caps the inradius search.
  double cap_sq = std::numeric_limits<double>::infinity();
  for (int i = 0; i < dim; ++i) {
    double below = double(geo.lo[i]) - 1.0;
    double above = double(geo.lo[i]) + double(geo.shape[i]);
    cap_sq = std::min({cap_sq, below * below, above * above});
  }
  RadiusScan scan;
  scan.min_unvisited_sq = cap_sq;
  for_each_cell(geo, [&](std::int64_t idx, const Coords& c) {
    double n2 = norm_sq(c, dim);
    if (outcome.visited.at(idx) != 0) {
      scan.max_visited_sq = std::max(scan.max_visited_sq, n2);
    } else {
      scan.min_unvisited_sq = std::min(scan.min_unvisited_sq, n2);
    }
  });
  return scan;
}

}  // namespace

AggregateMetrics aggregate_metrics(const StabilizationOutcome& outcome) {
  if (outcome.initial_particles == 0) {
    throw std::domain_error("aggregate_metrics: the outcome holds no particles");
  }
  const RadiusScan scan = radius_scan(outcome);
  const double min_unvisited_sq = scan.min_unvisited_sq;
  const double max_visited_sq = scan.max_visited_sq;
  AggregateMetrics m;
  m.zeta_hat = outcome.visited_count == 0
                   ? 0.0
                   : double(outcome.final.total_particles()) / double(outcome.visited_count);
  m.inradius = std::sqrt(min_unvisited_sq);
  m.outradius = max_visited_sq < 0 ? 0.0 : std::sqrt(max_visited_sq);
  m.sphericity = m.outradius == 0 ? 1.0 : std::min(1.0, m.inradius / m.outradius);
  return m;
}

AnnulusProfile annulus_profile(const StabilizationOutcome& outcome, int n_annuli) {
  if (n_annuli < 1) {
    throw std::invalid_argument("annulus_profile: need at least one annulus");
  }
  if (outcome.initial_particles == 0) {
    throw std::domain_error("annulus_profile: the outcome holds no particles");
  }
  // The squared inradius straight from the scan: squaring the rounded square
  // root would let the first unvisited shell leak into the outer annulus.
  const double r_sq = radius_scan(outcome).min_unvisited_sq;
  const int dim = outcome.final.topology().dim();
  const Grid<std::uint32_t>& cells = outcome.final.cells();

  // Equal-volume annuli: the i-th outer radius is R * (i/n)^(1/d), so a site
  // of norm rho lands in bin floor(n * (rho/R)^d). When a bin ends up without
  // sites the resolution drops until every bin is populated.
  std::vector<std::int64_t> sites;
  std::vector<std::int64_t> particles;
  for (int n = n_annuli; n >= 1; --n) {
    sites.assign(std::size_t(n), 0);
    particles.assign(std::size_t(n), 0);
    for_each_cell(cells.geo, [&](std::int64_t idx, const Coords& c) {
      double n2 = norm_sq(c, dim);
      if (n2 >= r_sq) return;
      double frac = std::pow(n2 / r_sq, double(dim) / 2.0);
      int bin = std::min(n - 1, int(frac * double(n)));
      sites[std::size_t(bin)]++;
      if (cells.at(idx) != 0) particles[std::size_t(bin)]++;
    });
    bool populated =
        std::all_of(sites.begin(), sites.end(), [](std::int64_t s) { return s > 0; });
    if (!populated && n > 1) continue;
    AnnulusProfile profile;
    profile.inradius = std::sqrt(r_sq);
    profile.truncated = n < n_annuli;
    profile.density.resize(std::size_t(n));
    for (int i = 0; i < n; ++i) {
      profile.density[std::size_t(i)] =
          sites[std::size_t(i)] == 0
              ? 0.0
              : double(particles[std::size_t(i)]) / double(sites[std::size_t(i)]);
    }
    return profile;
  }
  throw std::logic_error("annulus_profile: unreachable");
}

const CorrelationEntry& CorrelationTable::at(int dx, int dy) const {
  int a = std::abs(dx);
  int b = std::abs(dy);
  if (a < b) std::swap(a, b);
  for (const CorrelationEntry& e : entries) {
    if (e.dx == a && e.dy == b) return e;
  }
  throw std::out_of_range("correlation table has no offset (" + std::to_string(dx) + "," +
                          std::to_string(dy) + ")");
}

CorrelationAccumulator::CorrelationAccumulator(SymmetryGroup group, int r_max,
                                               std::optional<Coord> window_side)
    : group_(group), r_max_(r_max), window_side_(window_side) {
  if (r_max < 0) throw std::invalid_argument("correlation: r_max must be non-negative");
  if (window_side && *window_side < 1) {
    throw std::invalid_argument("correlation: window side must be positive");
  }
  for (int dx = 0; dx <= r_max; ++dx) {
    for (int dy = 0; dy <= dx; ++dy) offsets_.push_back({dx, dy});
  }
  mean_.assign(offsets_.size(), 0.0);
  m2_.assign(offsets_.size(), 0.0);
}

void CorrelationAccumulator::bind(const Configuration& first) {
  topo_ = first.topology();
  if (topo_.dim() != 2) {
    throw std::invalid_argument("correlation: two-dimensional samples only");
  }
  if (group_ == SymmetryGroup::kTorusTranslations) {
    if (topo_.kind() != TopologyKind::kTorus) {
      throw std::invalid_argument("correlation: translation averaging needs a torus");
    }
    if (window_side_ &&
        (*window_side_ != topo_.side(0) || *window_side_ != topo_.side(1))) {
      throw std::invalid_argument("correlation: translation averaging uses the full torus");
    }
    if (Coord(r_max_) >= std::min(topo_.side(0), topo_.side(1))) {
      throw std::invalid_argument("correlation: r_max exceeds the torus");
    }
    window_ = topo_.side(0);
    window_lo_ = {};
    bound_ = true;
    return;
  }
  Coord fallback = 0;
  switch (topo_.kind()) {
    case TopologyKind::kTorus:
      fallback = std::min(topo_.side(0), topo_.side(1));
      break;
    case TopologyKind::kWiredBox:
      fallback = std::min(topo_.side(0), topo_.side(1)) / 2;
      break;
    case TopologyKind::kDynamicLattice:
      if (!window_side_) {
        throw std::invalid_argument(
            "correlation: a growable lattice needs an explicit window side");
      }
      break;
  }
  window_ = window_side_.value_or(fallback);
  if (window_ < 1) throw std::invalid_argument("correlation: empty window");
  if (topo_.finite()) {
    if (window_ > std::min(topo_.side(0), topo_.side(1))) {
      throw std::invalid_argument("correlation: window exceeds the domain");
    }
    Coord base = topo_.kind() == TopologyKind::kWiredBox ? 1 : 0;
    for (int i = 0; i < 2; ++i) window_lo_[i] = (topo_.side(i) - window_) / 2 + base;
  } else {
    for (int i = 0; i < 2; ++i) window_lo_[i] = -(window_ / 2);
  }
  if (Coord(r_max_) >= window_) {
    throw std::invalid_argument("correlation: r_max exceeds the window");
  }
  bound_ = true;
}

void CorrelationAccumulator::add(const Configuration& sample) {
  if (!bound_) {
    bind(sample);
  } else if (!(sample.topology() == topo_)) {
    throw std::invalid_argument("correlation: samples must share one topology");
  }
  std::vector<double> products = sample_products(sample);
  ++samples_;
  for (std::size_t k = 0; k < offsets_.size(); ++k) {
    double d = products[k] - mean_[k];
    mean_[k] += d / double(samples_);
    m2_[k] += d * (products[k] - mean_[k]);
  }
}

std::vector<double> CorrelationAccumulator::sample_products(const Configuration& sample) const {
  std::vector<double> out(offsets_.size(), 0.0);
  const Grid<std::uint32_t>& g = sample.cells();

  if (group_ == SymmetryGroup::kTorusTranslations) {
    require_plain_layout(g.geo, topo_);
    const Coord W = topo_.side(0);
    const Coord H = topo_.side(1);
    const std::uint32_t* v = g.v.data();
    const double denom = double(W) * double(H);
    for (std::size_t k = 0; k < offsets_.size(); ++k) {
      const Coord dx = offsets_[k].first;
      const Coord dy = offsets_[k].second;
      std::uint64_t acc = 0;
      for (Coord y = 0; y < H; ++y) {
        Coord y2 = y + dy;
        if (y2 >= H) y2 -= H;
        const std::uint32_t* row = v + std::size_t(y) * std::size_t(W);
        const std::uint32_t* row2 = v + std::size_t(y2) * std::size_t(W);
        const Coord split = W - dx;
        for (Coord x = 0; x < split; ++x) acc += (row[x] != 0 && row2[x + dx] != 0) ? 1 : 0;
        for (Coord x = split; x < W; ++x) acc += (row[x] != 0 && row2[x + dx - W] != 0) ? 1 : 0;
      }
      out[k] = double(acc) / denom;
    }
    return out;
  }

  auto occ = [&](Coord x, Coord y) -> bool {
    Coords c{x, y, 0, 0};
    return g.geo.covers(c) && g.at(c) != 0;
  };
  const Coord m = window_;
  const Coord x0 = window_lo_[0];
  const Coord y0 = window_lo_[1];
  const int n_images = group_ == SymmetryGroup::kD8 ? 8 : 1;
  for (std::size_t k = 0; k < offsets_.size(); ++k) {
    const int dx = offsets_[k].first;
    const int dy = offsets_[k].second;
    const std::array<std::pair<int, int>, 8> images{{{dx, dy},
                                                     {dy, dx},
                                                     {-dx, dy},
                                                     {dy, -dx},
                                                     {dx, -dy},
                                                     {-dy, dx},
                                                     {-dx, -dy},
                                                     {-dy, -dx}}};
    std::array<double, 8> means{};
    for (int i = 0; i < n_images; ++i) {
      const Coord ax = Coord(images[std::size_t(i)].first);
      const Coord ay = Coord(images[std::size_t(i)].second);
      // Base points with both ends of the offset inside the window.
      const Coord bx0 = x0 + std::max<Coord>(0, -ax);
      const Coord bx1 = x0 + m - std::max<Coord>(0, ax);
      const Coord by0 = y0 + std::max<Coord>(0, -ay);
      const Coord by1 = y0 + m - std::max<Coord>(0, ay);
      std::uint64_t acc = 0;
      for (Coord y = by0; y < by1; ++y) {
        for (Coord x = bx0; x < bx1; ++x) {
          acc += (occ(x, y) && occ(x + ax, y + ay)) ? 1 : 0;
        }
      }
      const double count = double(bx1 - bx0) * double(by1 - by0);
      means[std::size_t(i)] = double(acc) / count;
    }
    // A group element applied to every sample permutes the image means, so
    // summing them in sorted order keeps the table bitwise invariant.
    std::sort(means.begin(), means.begin() + n_images);
    double sum_means = 0;
    for (int i = 0; i < n_images; ++i) sum_means += means[std::size_t(i)];
    out[k] = sum_means / double(n_images);
  }
  return out;
}

CorrelationTable CorrelationAccumulator::finish() const {
  if (samples_ == 0) throw std::logic_error("correlation: no samples accumulated");
  // Offset (0,0) squares the occupancy indicator, so its mean product is the
  // pooled density; normalizing with it makes corr(0,0) exactly 1.
  const double zeta = mean_[0];
  if (!(zeta > 0.0) || !(zeta < 1.0)) {
    throw std::domain_error("correlation: degenerate sample density " + std::to_string(zeta));
  }
  const double denom = zeta - zeta * zeta;
  CorrelationTable table;
  table.zeta_hat = zeta;
  table.samples = samples_;
  table.entries.reserve(offsets_.size());
  for (std::size_t k = 0; k < offsets_.size(); ++k) {
    CorrelationEntry e;
    e.dx = offsets_[k].first;
    e.dy = offsets_[k].second;
    e.mean_product = mean_[k];
    e.corr = (mean_[k] - zeta * zeta) / denom;
    double var = samples_ > 1 ? m2_[k] / double(samples_ - 1) : 0.0;
    e.std_error = std::sqrt(std::max(0.0, var) / double(samples_)) / denom;
    table.entries.push_back(e);
  }
  return table;
}

CorrelationTable correlation_table(std::span<const Configuration> samples,
                                   SymmetryGroup group, int r_max,
                                   std::optional<Coord> window_side) {
  CorrelationAccumulator acc(group, r_max, window_side);
  for (const Configuration& s : samples) acc.add(s);
  return acc.finish();
}

double CovarianceMap::at(int dx, int dy) const {
  if (std::abs(dx) > r_max || std::abs(dy) > r_max) {
    throw std::out_of_range("covariance map has no offset (" + std::to_string(dx) + "," +
                            std::to_string(dy) + ")");
  }
  const int side = 2 * r_max + 1;
  return cov[std::size_t(dy + r_max) * std::size_t(side) + std::size_t(dx + r_max)];
}

double CovarianceMap::error_at(int dx, int dy) const {
  if (std::abs(dx) > r_max || std::abs(dy) > r_max) {
    throw std::out_of_range("covariance map has no offset (" + std::to_string(dx) + "," +
                            std::to_string(dy) + ")");
  }
  const int side = 2 * r_max + 1;
  return std_error[std::size_t(dy + r_max) * std::size_t(side) + std::size_t(dx + r_max)];
}

CovarianceAccumulator::CovarianceAccumulator(const Site& center, int r_max)
    : center_(center), r_max_(r_max) {
  if (r_max < 0) throw std::invalid_argument("covariance: r_max must be non-negative");
  const std::size_t side = std::size_t(2 * r_max + 1);
  mean_.assign(side * side, 0.0);
  m2_.assign(side * side, 0.0);
}

void CovarianceAccumulator::add(const Configuration& sample) {
  if (!bound_) {
    topo_ = sample.topology();
    if (topo_.dim() != 2) {
      throw std::invalid_argument("covariance: two-dimensional samples only");
    }
    translate_ = topo_.kind() == TopologyKind::kTorus;
    if (translate_) {
      if (Coord(2 * r_max_ + 1) > std::min(topo_.side(0), topo_.side(1))) {
        throw std::invalid_argument("covariance: offsets wrap around the torus");
      }
    } else if (topo_.kind() == TopologyKind::kWiredBox) {
      for (int i = 0; i < 2; ++i) {
        if (center_.c[i] - Coord(r_max_) < 1 || center_.c[i] + Coord(r_max_) > topo_.side(i)) {
          throw std::invalid_argument("covariance: offsets leave the domain");
        }
      }
    }
    bound_ = true;
  } else if (!(sample.topology() == topo_)) {
    throw std::invalid_argument("covariance: samples must share one topology");
  }

  const Grid<std::uint32_t>& g = sample.cells();
  const int side = 2 * r_max_ + 1;
  ++samples_;

  if (translate_) {
    // On a torus the anchor is immaterial in law, so the estimate pools over
    // translations: mean products go through Welford, per-site occupancy
    // counts accumulate for the mean term subtracted at finish.
    require_plain_layout(g.geo, topo_);
    const Coord W = topo_.side(0);
    const Coord H = topo_.side(1);
    const std::uint32_t* v = g.v.data();
    const double N = double(W) * double(H);
    if (site_hits_.empty()) site_hits_.assign(std::size_t(g.geo.cells), 0);
    for (std::int64_t i = 0; i < g.geo.cells; ++i) {
      site_hits_[std::size_t(i)] += (v[i] != 0) ? 1 : 0;
    }
    for (int dy = -r_max_; dy <= r_max_; ++dy) {
      for (int dx = -r_max_; dx <= r_max_; ++dx) {
        std::uint64_t acc = 0;
        for (Coord y = 0; y < H; ++y) {
          Coord y2 = y + Coord(dy);
          if (y2 < 0) y2 += H;
          if (y2 >= H) y2 -= H;
          const std::uint32_t* row = v + std::size_t(y) * std::size_t(W);
          const std::uint32_t* row2 = v + std::size_t(y2) * std::size_t(W);
          for (Coord x = 0; x < W; ++x) {
            Coord x2 = x + Coord(dx);
            if (x2 < 0) x2 += W;
            else if (x2 >= W) x2 -= W;
            acc += (row[x] != 0 && row2[x2] != 0) ? 1 : 0;
          }
        }
        const double c = double(acc) / N;
        const std::size_t k = std::size_t(dy + r_max_) * std::size_t(side) + std::size_t(dx + r_max_);
        double d = c - mean_[k];
        mean_[k] += d / double(samples_);
        m2_[k] += d * (c - mean_[k]);
      }
    }
    return;
  }

  auto occ = [&](Coords c) -> std::uint8_t {
    return (g.geo.covers(c) && g.at(c) != 0) ? 1 : 0;
  };
  anchor_buf_.push_back(occ(center_.c));
  for (int dy = -r_max_; dy <= r_max_; ++dy) {
    for (int dx = -r_max_; dx <= r_max_; ++dx) {
      Coords c = center_.c;
      c[0] += Coord(dx);
      c[1] += Coord(dy);
      offset_buf_.push_back(occ(c));
    }
  }
}

CovarianceMap CovarianceAccumulator::finish() const {
  if (samples_ == 0) throw std::logic_error("covariance: no samples accumulated");
  const int side = 2 * r_max_ + 1;
  const std::size_t cells = std::size_t(side) * std::size_t(side);
  CovarianceMap map;
  map.r_max = r_max_;
  map.samples = samples_;
  map.cov.assign(cells, 0.0);
  map.std_error.assign(cells, 0.0);

  if (translate_) {
    // Ensemble covariance pooled over translations: the mean product minus
    // the translation average of the per-site mean occupancy products. A
    // deterministic sample set cancels exactly. The mean term is treated as
    // a constant in the standard error; across-sample product spread is the
    // dominant noise.
    const Coord W = topo_.side(0);
    const Coord H = topo_.side(1);
    const double N = double(W) * double(H);
    std::vector<double> mu(site_hits_.size());
    for (std::size_t i = 0; i < site_hits_.size(); ++i) {
      mu[i] = double(site_hits_[i]) / double(samples_);
    }
    for (int dy = -r_max_; dy <= r_max_; ++dy) {
      for (int dx = -r_max_; dx <= r_max_; ++dx) {
        double term = 0;
        for (Coord y = 0; y < H; ++y) {
          Coord y2 = y + Coord(dy);
          if (y2 < 0) y2 += H;
          if (y2 >= H) y2 -= H;
          const double* row = mu.data() + std::size_t(y) * std::size_t(W);
          const double* row2 = mu.data() + std::size_t(y2) * std::size_t(W);
          for (Coord x = 0; x < W; ++x) {
            Coord x2 = x + Coord(dx);
            if (x2 < 0) x2 += W;
            else if (x2 >= W) x2 -= W;
            term += row[x] * row2[x2];
          }
        }
        const std::size_t k =
            std::size_t(dy + r_max_) * std::size_t(side) + std::size_t(dx + r_max_);
        map.cov[k] = mean_[k] - term / N;
        map.std_error[k] =
            samples_ > 1 ? std::sqrt(m2_[k] / double(samples_ - 1) / double(samples_)) : 0.0;
      }
    }
    return map;
  }

  // Anchored mode: plug-in covariance from the buffered indicators, with the
  // spread of the per-sample influence terms as the standard error.
  double xbar = 0;
  for (std::uint8_t x : anchor_buf_) xbar += x;
  xbar /= double(samples_);
  for (std::size_t k = 0; k < cells; ++k) {
    double ybar = 0;
    for (std::uint64_t s = 0; s < samples_; ++s) ybar += offset_buf_[s * cells + k];
    ybar /= double(samples_);
    Welford w;
    for (std::uint64_t s = 0; s < samples_; ++s) {
      w.add((double(anchor_buf_[s]) - xbar) * (double(offset_buf_[s * cells + k]) - ybar));
    }
    map.cov[k] = w.mean;
    map.std_error[k] = w.std_error();
  }
  return map;
}

CovarianceMap covariance_map(std::span<const Configuration> samples, const Site& center,
                             int r_max) {
  CovarianceAccumulator acc(center, r_max);
  for (const Configuration& s : samples) acc.add(s);
  return acc.finish();
}

std::uint64_t box_count(const Configuration& config, const Coords& lo, const Coords& shape) {
  const Topology& t = config.topology();
  const int dim = t.dim();
  Coords eff_lo = lo;
  Coords eff_shape = shape;
  for (int i = 0; i < kMaxDim; ++i) {
    if (i < dim) {
      if (eff_shape[i] < 1) throw std::invalid_argument("box_count: empty box");
    } else {
      eff_lo[i] = 0;
      eff_shape[i] = 1;
    }
  }
  if (t.finite()) {
    const Coord base = t.kind() == TopologyKind::kWiredBox ? 1 : 0;
    for (int i = 0; i < dim; ++i) {
      if (eff_lo[i] < base || eff_lo[i] + eff_shape[i] > base + t.side(i)) {
        throw std::invalid_argument("box_count: box leaves the domain");
      }
    }
  }
  const Grid<std::uint32_t>& g = config.cells();
  std::uint64_t total = 0;
  for_each_cell(GridGeometry::box(dim, eff_lo, eff_shape), [&](std::int64_t, const Coords& c) {
    if (!g.geo.covers(c)) return;
    std::uint32_t w = g.at(c);
    total += (w == Configuration::kSleeping) ? 1 : w;
  });
  return total;
}

VarianceCurve variance_curve(const std::vector<std::vector<double>>& counts,
                             std::span<const double> volumes, int dim,
                             std::optional<double> zeta_ref) {
  if (counts.size() != volumes.size()) {
    throw std::invalid_argument("variance_curve: counts and volumes differ in length");
  }
  if (counts.empty()) throw std::invalid_argument("variance_curve: no boxes");
  if (dim < 1) throw std::invalid_argument("variance_curve: dimension must be positive");

  VarianceCurve curve;
  curve.replicas = std::numeric_limits<std::uint64_t>::max();
  for (std::size_t b = 0; b < counts.size(); ++b) {
    const std::vector<double>& xs = counts[b];
    if (xs.size() < 2) {
      throw std::domain_error("variance_curve: every box needs at least two replicas");
    }
    if (!(volumes[b] > 0)) throw std::invalid_argument("variance_curve: volumes must be positive");
    Welford w;
    for (double x : xs) w.add(x);
    curve.volume.push_back(volumes[b]);
    curve.variance.push_back(w.variance());
    curve.replicas = std::min<std::uint64_t>(curve.replicas, xs.size());
    if (zeta_ref) {
      std::uint64_t hits = 0;
      const double cut = *zeta_ref * volumes[b];
      for (double x : xs) hits += (x >= cut) ? 1 : 0;
      curve.tail.push_back(double(hits) / double(xs.size()));
    }
  }

  // Exponent of variance growth against box side: slope of log variance on
  // log side. Independent sites give variance proportional to volume, hence
  // alpha = dim.
  std::vector<double> xs, ys;
  for (std::size_t b = 0; b < counts.size(); ++b) {
    if (curve.variance[b] > 0) {
      xs.push_back(std::log(curve.volume[b]) / double(dim));
      ys.push_back(std::log(curve.variance[b]));
    }
  }
  std::vector<double> distinct = xs;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() >= 3) {
    const double n = double(xs.size());
    const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
    const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
    double sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      sxx += (xs[i] - mx) * (xs[i] - mx);
      sxy += (xs[i] - mx) * (ys[i] - my);
    }
    if (sxx > 0 && xs.size() > 2) {
      AlphaFit fit;
      fit.alpha = sxy / sxx;
      fit.intercept = my - fit.alpha * mx;
      double ssr = 0;
      for (std::size_t i = 0; i < xs.size(); ++i) {
        const double r = ys[i] - (fit.intercept + fit.alpha * xs[i]);
        ssr += r * r;
      }
      fit.std_error = std::sqrt(ssr / double(xs.size() - 2) / sxx);
      curve.fitted_alpha = fit;
    }
  }
  return curve;
}

SaturationFit saturation_distance(std::span<const DensityPoint> curve, double level,
                                  bool use_bulk) {
  if (curve.empty()) throw std::invalid_argument("saturation_distance: empty curve");
  if (!(level >= 0) || !std::isfinite(level)) {
    throw std::invalid_argument("saturation_distance: level must be finite and non-negative");
  }
  SaturationFit fit;
  double sum = 0;
  int cnt = 0;
  for (const DensityPoint& p : curve) {
    const double rho = use_bulk ? p.bulk_density : p.global_density;
    fit.distance = std::max(fit.distance, std::abs(rho - std::min(p.t, level)));
    if (p.t >= 1.0 && p.t <= 1.2) {
      sum += rho;
      ++cnt;
    }
  }
  if (cnt > 0) fit.plateau = sum / cnt;
  return fit;
}

std::vector<Site> sleeper_support(const Configuration& config, int closing_radius) {
  if (closing_radius < 0) {
    throw std::invalid_argument("sleeper_support: radius must be non-negative");
  }
  const int dim = config.topology().dim();
  std::vector<Coords> sleepers;
  Coords blo{}, bhi{};
  config.for_each_occupied([&](const Site& s, SiteState st) {
    if (!st.asleep) return;
    if (sleepers.empty()) {
      blo = s.c;
      bhi = s.c;
    } else {
      for (int i = 0; i < dim; ++i) {
        blo[i] = std::min(blo[i], s.c[i]);
        bhi[i] = std::max(bhi[i], s.c[i]);
      }
    }
    sleepers.push_back(s.c);
  });
  if (sleepers.empty()) return {};

  const std::vector<Coords> ball = ball_offsets(dim, closing_radius);
  Coords pad_lo{}, pad_shape{};
  for (int i = 0; i < dim; ++i) {
    pad_lo[i] = blo[i] - Coord(closing_radius);
    pad_shape[i] = bhi[i] - blo[i] + 1 + 2 * Coord(closing_radius);
  }
  Grid<std::uint8_t> dilated(GridGeometry::box(dim, pad_lo, pad_shape));
  for (const Coords& s : sleepers) {
    for (const Coords& o : ball) {
      Coords c = s;
      for (int i = 0; i < dim; ++i) c[i] += o[i];
      dilated.at(c) = 1;
    }
  }
  // Erode the dilation with the same ball; cells outside the padded box are
  // never dilated, so an uncovered probe fails the erosion.
  std::vector<Site> support;
  for_each_cell(dilated.geo, [&](std::int64_t idx, const Coords& c) {
    if (dilated.at(idx) == 0) return;
    for (const Coords& o : ball) {
      Coords p = c;
      for (int i = 0; i < dim; ++i) p[i] += o[i];
      if (!dilated.geo.covers(p) || dilated.at(p) == 0) return;
    }
    support.push_back(Site{c});
  });
  return support;
}

double QuadratureFunction::operator()(std::span<const double> p) const {
  switch (kind) {
    case Kind::kConstant:
      return b;
    case Kind::kAffine: {
      double s = b;
      for (std::size_t i = 0; i < p.size(); ++i) s += a[i] * p[i];
      return s;
    }
    case Kind::kNegSquare: {
      double s = 0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double d = p[i] - x0[i];
        s -= d * d;
      }
      return b * s;
    }
  }
  throw std::logic_error("quadrature: unknown test function kind");
}

QuadratureFunction QuadratureFunction::constant(double value) {
  QuadratureFunction u;
  u.kind = Kind::kConstant;
  u.b = value;
  return u;
}

QuadratureFunction QuadratureFunction::affine(const std::array<double, kMaxDim>& slope,
                                              double offset) {
  QuadratureFunction u;
  u.kind = Kind::kAffine;
  u.a = slope;
  u.b = offset;
  return u;
}

QuadratureFunction QuadratureFunction::neg_square(const std::array<double, kMaxDim>& center,
                                                  double scale) {
  QuadratureFunction u;
  u.kind = Kind::kNegSquare;
  u.b = scale;
  u.x0 = center;
  return u;
}

std::vector<QuadratureReport> quadrature_check(const Region& region, double eps,
                                               const StabilizationOutcome& outcome,
                                               double zeta_a,
                                               std::span<const QuadratureFunction> functions) {
  if (!(eps > 0) || !std::isfinite(eps)) {
    throw std::invalid_argument("quadrature: mesh must be positive and finite");
  }
  if (!outcome.stabilized()) {
    throw std::invalid_argument("quadrature: outcome is not stabilized");
  }
  if (!(zeta_a > 0) || !(zeta_a <= 1)) {
    throw std::invalid_argument("quadrature: density must lie in (0, 1]");
  }
  const int dim = outcome.final.topology().dim();
  if (region.dim() != dim) {
    throw std::invalid_argument("quadrature: region and outcome dimensions differ");
  }
  const std::vector<Site> source = region_sites(region, eps);
  if (source.empty()) throw std::domain_error("quadrature: the discretized region is empty");
  const std::vector<Site> support = sleeper_support(outcome.final, 3);

  auto at_mesh = [&](const QuadratureFunction& u, const Coords& c) {
    std::array<double, kMaxDim> p{};
    for (int i = 0; i < dim; ++i) p[i] = eps * double(c[i]);
    return u(std::span<const double>(p.data(), std::size_t(dim)));
  };
  auto laplacian = [&](const QuadratureFunction& u, const Coords& c) {
    const double center = at_mesh(u, c);
    double s = 0;
    for (int i = 0; i < dim; ++i) {
      Coords cp = c;
      cp[i] += 1;
      Coords cm = c;
      cm[i] -= 1;
      s += at_mesh(u, cp) + at_mesh(u, cm) - 2.0 * center;
    }
    return s;
  };

  const double eps_d = std::pow(eps, dim);
  std::vector<QuadratureReport> reports;
  reports.reserve(functions.size());
  for (const QuadratureFunction& u : functions) {
    // Superharmonicity screen over sampled sites of both sums.
    auto screen = [&](const std::vector<Site>& sites) {
      if (sites.empty()) return;
      const std::size_t stride = std::max<std::size_t>(1, sites.size() / 1024);
      for (std::size_t i = 0; i < sites.size(); i += stride) {
        if (laplacian(u, sites[i].c) > 1e-9) {
          throw std::invalid_argument(
              "quadrature: test function has positive discrete Laplacian");
        }
      }
    };
    screen(source);
    screen(support);

    QuadratureReport r;
    r.kind = u.kind;
    double ls = 0;
    for (const Site& s : source) ls += at_mesh(u, s.c);
    double rs = 0;
    for (const Site& s : support) rs += at_mesh(u, s.c);
    r.lhs = eps_d * ls;
    r.rhs = zeta_a * eps_d * rs;
    r.margin = r.lhs - r.rhs;
    reports.push_back(r);
  }
  return reports;
}

double chi_square_p_value(double statistic, double dof) {
  if (!(statistic >= 0) || !(dof > 0)) {
    throw std::invalid_argument("chi_square: statistic must be >= 0 and dof positive");
  }
  return boost::math::gamma_q(dof / 2.0, statistic / 2.0);
}

ChiSquareTest chi_square_two_sample(std::span<const std::uint64_t> a,
                                    std::span<const std::uint64_t> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("chi_square: histograms differ in length");
  }
  double na = 0, nb = 0;
  for (std::uint64_t x : a) na += double(x);
  for (std::uint64_t x : b) nb += double(x);
  if (na == 0 || nb == 0) throw std::domain_error("chi_square: empty histogram");
  double stat = 0;
  int used = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double tot = double(a[i]) + double(b[i]);
    if (tot == 0) continue;
    ++used;
    const double ea = tot * na / (na + nb);
    const double eb = tot * nb / (na + nb);
    const double da = double(a[i]) - ea;
    const double db = double(b[i]) - eb;
    stat += da * da / ea + db * db / eb;
  }
  if (used < 2) throw std::domain_error("chi_square: need at least two populated bins");
  ChiSquareTest t;
  t.statistic = stat;
  t.dof = double(used - 1);
  t.p_value = chi_square_p_value(stat, t.dof);
  return t;
}

}  // namespace arw
