#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <set>
#include <stdexcept>
#include <utility>
#include <vector>

#include "arw/chains.hpp"
#include "arw/statistics.hpp"
#include "doctest.h"

using namespace arw;

namespace {

ChainParams collapsed_params(std::uint64_t seed, double lambda) {
  ChainParams p;
  p.lambda = lambda;
  p.mode = SourceMode::kCollapsed;
  p.run_seed = seed;
  return p;
}

double site_norm(const Site& s, int dim) {
  double n2 = 0;
  for (int i = 0; i < dim; ++i) n2 += double(s.c[i]) * double(s.c[i]);
  return std::sqrt(n2);
}

/// Synthetic outcome whose sleepers and visited set are exactly the lattice
/// ball of the given radius.
StabilizationOutcome ball_outcome(int dim, Coord radius) {
  Configuration cfg(Topology::dynamic_lattice(dim));
  Coords hi{}, lo{};
  for (int i = 0; i < dim; ++i) {
    hi[i] = radius;
    lo[i] = -radius;
  }
  cfg.ensure_covered(Site{hi});
  cfg.ensure_covered(Site{lo});
  const GridGeometry geo = cfg.geometry();
  Grid<std::uint8_t> visited(geo);
  std::uint64_t visited_count = 0;
  for (std::int64_t idx = 0; idx < geo.cells; ++idx) {
    const Coords c = geo.coords_of(idx);
    double n2 = 0;
    for (int i = 0; i < dim; ++i) n2 += double(c[i]) * double(c[i]);
    if (n2 <= double(radius) * double(radius)) {
      cfg.set_state(Site{c}, SiteState::sleeper());
      visited.at(idx) = 1;
      ++visited_count;
    }
  }
  const std::uint64_t n = cfg.total_particles();
  return StabilizationOutcome{StabilizeStatus::kStabilized,
                              cfg,
                              Grid<std::uint64_t>(geo),
                              visited,
                              visited_count,
                              n,
                              0,
                              0,
                              0,
                              0,
                              0};
}

/// Torus configuration with sleepers wherever keep(x, y) holds.
Configuration pattern_torus(Coord L, const std::function<bool(Coord, Coord)>& keep) {
  Configuration cfg(Topology::torus(2, L));
  for (Coord y = 0; y < L; ++y) {
    for (Coord x = 0; x < L; ++x) {
      if (keep(x, y)) cfg.set_state(Site::of(x, y), SiteState::sleeper());
    }
  }
  return cfg;
}

/// Image of a torus configuration under a bijection of the domain.
Configuration mapped_torus(const Configuration& cfg,
                           const std::function<Site(const Site&)>& map) {
  Configuration out(cfg.topology());
  cfg.for_each_occupied([&](const Site& s, SiteState st) { out.set_state(map(s), st); });
  return out;
}

bool tables_identical(const CorrelationTable& a, const CorrelationTable& b) {
  if (a.entries.size() != b.entries.size()) return false;
  for (std::size_t i = 0; i < a.entries.size(); ++i) {
    if (a.entries[i].corr != b.entries[i].corr) return false;
    if (a.entries[i].std_error != b.entries[i].std_error) return false;
    if (a.entries[i].mean_product != b.entries[i].mean_product) return false;
  }
  return a.zeta_hat == b.zeta_hat;
}

}  // namespace

TEST_CASE("aggregate metrics of an exact lattice ball are perfectly spherical") {
  const StabilizationOutcome out = ball_outcome(2, 5);
  const AggregateMetrics m = aggregate_metrics(out);
  CHECK(m.zeta_hat == 1.0);
  CHECK(m.outradius == doctest::Approx(5.0));
  CHECK(m.inradius >= 5.0);
  CHECK(m.sphericity == 1.0);
}

TEST_CASE("aggregate metrics of a real point source are sane") {
  const StabilizationOutcome out = point_source(2000, 1.0, 2, 42);
  REQUIRE(out.stabilized());
  const AggregateMetrics m = aggregate_metrics(out);
  CHECK(m.zeta_hat > 0.3);
  CHECK(m.zeta_hat < 1.0);
  CHECK(m.inradius > 10.0);
  CHECK(m.outradius >= m.inradius);
  CHECK(m.sphericity > 0.7);
  CHECK(m.sphericity <= 1.0);
}

TEST_CASE("aggregate metrics reject an empty outcome") {
  const Configuration empty(Topology::dynamic_lattice(2));
  const StabilizationOutcome out = stabilize_collapsed(empty, 1, 1.0);
  CHECK_THROWS_AS(aggregate_metrics(out), std::domain_error);
}

TEST_CASE("annulus profile of a constant ball is flat") {
  const StabilizationOutcome out = ball_outcome(2, 9);
  const AnnulusProfile profile = annulus_profile(out, 4);
  REQUIRE(profile.density.size() == 4);
  CHECK_FALSE(profile.truncated);
  for (double d : profile.density) CHECK(d == 1.0);
}

TEST_CASE("annulus profile drops resolution when a bin would be empty") {
  // Radius-1 ball: inradius sqrt(2), only five sites. Three annuli leave the
  // middle bin empty, so the profile falls back to fewer.
  const StabilizationOutcome out = ball_outcome(2, 1);
  const AnnulusProfile profile = annulus_profile(out, 3);
  CHECK(profile.truncated);
  CHECK(profile.density.size() < 3);
  for (double d : profile.density) CHECK(d == 1.0);
}

TEST_CASE("annulus profile of a point source stays within density bounds") {
  const StabilizationOutcome out = point_source(2000, 1.0, 2, 7);
  const AnnulusProfile profile = annulus_profile(out, 5);
  REQUIRE(profile.density.size() == 5);
  CHECK_FALSE(profile.truncated);
  for (double d : profile.density) {
    CHECK(d > 0.3);
    CHECK(d <= 1.0);
  }
  CHECK_THROWS_AS(annulus_profile(out, 0), std::invalid_argument);
}

TEST_CASE("checkerboard correlations are exactly -1 at distance one") {
  const Configuration board =
      pattern_torus(8, [](Coord x, Coord y) { return (x + y) % 2 == 0; });
  const std::vector<Configuration> samples{board, board};

  // Distance-one products vanish identically, so every group pins -1.
  for (SymmetryGroup group : {SymmetryGroup::kTorusTranslations, SymmetryGroup::kD8,
                              SymmetryGroup::kIdentity}) {
    const CorrelationTable table = correlation_table(samples, group, 2);
    CHECK(table.zeta_hat == 0.5);
    CHECK(table.at(0, 0).corr == 1.0);
    CHECK(table.at(1, 0).corr == -1.0);
    CHECK(table.at(0, 0).std_error == 0.0);  // identical samples
  }

  // Same-parity offsets reproduce the pattern exactly under the wrap-around
  // translation average.
  const CorrelationTable wrap =
      correlation_table(samples, SymmetryGroup::kTorusTranslations, 2);
  CHECK(wrap.at(1, 1).corr == 1.0);
  CHECK(wrap.at(2, 0).corr == 1.0);
}

TEST_CASE("correlation table rejects degenerate densities") {
  const Configuration full = pattern_torus(6, [](Coord, Coord) { return true; });
  const std::vector<Configuration> samples{full};
  CHECK_THROWS_AS(correlation_table(samples, SymmetryGroup::kTorusTranslations, 1),
                  std::domain_error);
  const Configuration empty(Topology::torus(2, 6));
  const std::vector<Configuration> none{empty};
  CHECK_THROWS_AS(correlation_table(none, SymmetryGroup::kTorusTranslations, 1),
                  std::domain_error);
}

TEST_CASE("correlation table validates its inputs") {
  CHECK_THROWS_AS(CorrelationAccumulator(SymmetryGroup::kIdentity, -1),
                  std::invalid_argument);
  CorrelationAccumulator none(SymmetryGroup::kIdentity, 1);
  CHECK_THROWS_AS(none.finish(), std::logic_error);

  // Translation averaging needs a torus.
  const Configuration wired(Topology::wired_box(2, 9));
  CorrelationAccumulator trans(SymmetryGroup::kTorusTranslations, 1);
  CHECK_THROWS_AS(trans.add(wired), std::invalid_argument);

  // A growable lattice has no default window.
  const Configuration open(Topology::dynamic_lattice(2));
  CorrelationAccumulator no_window(SymmetryGroup::kD8, 1);
  CHECK_THROWS_AS(no_window.add(open), std::invalid_argument);

  // r_max must fit inside the window.
  const Configuration small(Topology::torus(2, 5));
  CorrelationAccumulator wide(SymmetryGroup::kTorusTranslations, 5);
  CHECK_THROWS_AS(wide.add(small), std::invalid_argument);

  // Samples must share one topology.
  CorrelationAccumulator mixed(SymmetryGroup::kTorusTranslations, 1);
  Configuration occupied6(Topology::torus(2, 6));
  occupied6.set_state(Site::of(0, 0), SiteState::sleeper());
  mixed.add(occupied6);
  const Configuration t8(Topology::torus(2, 8));
  CHECK_THROWS_AS(mixed.add(t8), std::invalid_argument);
}

TEST_CASE("correlation tables are exactly invariant under their symmetry group") {
  // A batch of genuinely random stable samples.
  std::vector<Configuration> samples;
  for (std::uint64_t s = 0; s < 6; ++s) {
    StabilizationOutcome out = free_batch_sample(16, 2, 100, collapsed_params(900 + s, 1.0));
    REQUIRE(out.stabilized());
    samples.push_back(out.final);
  }

  SUBCASE("translations") {
    std::vector<Configuration> shifted;
    for (const Configuration& c : samples) {
      shifted.push_back(mapped_torus(c, [](const Site& s) {
        return Site::of((s.c[0] + 3) % 16, (s.c[1] + 11) % 16);
      }));
    }
    const CorrelationTable a =
        correlation_table(samples, SymmetryGroup::kTorusTranslations, 4);
    const CorrelationTable b =
        correlation_table(shifted, SymmetryGroup::kTorusTranslations, 4);
    CHECK(tables_identical(a, b));
    CHECK(a.at(0, 0).corr == 1.0);
  }

  SUBCASE("quarter turn about the window center") {
    // (x, y) -> (15 - y, x) rotates the full 16x16 window by 90 degrees.
    std::vector<Configuration> rotated;
    for (const Configuration& c : samples) {
      rotated.push_back(mapped_torus(
          c, [](const Site& s) { return Site::of(15 - s.c[1], s.c[0]); }));
    }
    const CorrelationTable a = correlation_table(samples, SymmetryGroup::kD8, 4);
    const CorrelationTable b = correlation_table(rotated, SymmetryGroup::kD8, 4);
    CHECK(tables_identical(a, b));
  }

  SUBCASE("reflection about the window center") {
    std::vector<Configuration> mirrored;
    for (const Configuration& c : samples) {
      mirrored.push_back(mapped_torus(
          c, [](const Site& s) { return Site::of(15 - s.c[0], s.c[1]); }));
    }
    const CorrelationTable a = correlation_table(samples, SymmetryGroup::kD8, 4);
    const CorrelationTable b = correlation_table(mirrored, SymmetryGroup::kD8, 4);
    CHECK(tables_identical(a, b));
  }
}

TEST_CASE("correlations of real samples stay normalized") {
  std::vector<Configuration> samples;
  for (std::uint64_t s = 0; s < 24; ++s) {
    StabilizationOutcome out = free_batch_sample(16, 2, 64, collapsed_params(1200 + s, 1.0));
    REQUIRE(out.stabilized());
    samples.push_back(out.final);
  }
  const CorrelationTable table =
      correlation_table(samples, SymmetryGroup::kTorusTranslations, 5);
  CHECK(table.at(0, 0).corr == 1.0);
  CHECK(table.samples == 24);
  for (const CorrelationEntry& e : table.entries) {
    CHECK(std::abs(e.corr) <= 1.0 + 1e-9);
    CHECK(e.std_error >= 0.0);
  }
  // The particle count is conserved on the torus, so the (0,0) entry has no
  // spread; genuine fluctuation shows up from distance one on.
  CHECK(table.at(0, 0).std_error == 0.0);
  CHECK(table.at(1, 0).std_error > 0.0);
  CHECK_THROWS_AS(table.at(6, 0), std::out_of_range);
}

TEST_CASE("wired window correlations default to the centered half-side box") {
  std::vector<Configuration> samples;
  const Topology box = Topology::wired_box(2, 20);
  for (std::uint64_t s = 0; s < 4; ++s) {
    samples.push_back(wired_exact_sample(box, collapsed_params(50 + s, 2.0)));
  }
  const CorrelationTable table = correlation_table(samples, SymmetryGroup::kD8, 3);
  CHECK(table.at(0, 0).corr == 1.0);
  CHECK(table.zeta_hat > 0.4);
  CHECK(table.zeta_hat < 1.0);
  for (const CorrelationEntry& e : table.entries) CHECK(std::abs(e.corr) <= 1.0 + 1e-9);
}

TEST_CASE("a deterministic sample set has zero covariance everywhere") {
  const Configuration board =
      pattern_torus(9, [](Coord x, Coord y) { return (x + 2 * y) % 3 == 0; });
  const std::vector<Configuration> samples{board, board, board};
  const CovarianceMap map = covariance_map(samples, Site::of(4, 4), 2);
  for (double c : map.cov) CHECK(c == 0.0);
  for (double e : map.std_error) CHECK(e == 0.0);
}

TEST_CASE("covariance of independent occupancies vanishes within error") {
  // Independent Bernoulli planes: every offdiagonal covariance is 0 in law
  // and the (0,0) entry is the occupancy variance.
  std::mt19937_64 rng(11);
  std::bernoulli_distribution occ(0.35);
  std::vector<Configuration> samples;
  for (int s = 0; s < 400; ++s) {
    samples.push_back(pattern_torus(11, [&](Coord, Coord) { return occ(rng); }));
  }
  const CovarianceMap map = covariance_map(samples, Site::of(5, 5), 1);
  const double var = map.at(0, 0);
  CHECK(var > 0.35 * 0.65 * 0.8);
  CHECK(var < 0.35 * 0.65 * 1.2);
  for (int dy = -1; dy <= 1; ++dy) {
    for (int dx = -1; dx <= 1; ++dx) {
      if (dx == 0 && dy == 0) continue;
      CHECK(std::abs(map.at(dx, dy)) <= 4.0 * map.error_at(dx, dy) + 1e-12);
    }
  }
}

TEST_CASE("anchored covariance works on a wired box and validates the anchor") {
  const Topology box = Topology::wired_box(2, 9);
  std::vector<Configuration> samples;
  for (std::uint64_t s = 0; s < 30; ++s) {
    samples.push_back(wired_exact_sample(box, collapsed_params(300 + s, 1.0)));
  }
  const CovarianceMap map = covariance_map(samples, Site::of(5, 5), 2);
  CHECK(map.at(0, 0) >= 0.0);
  CHECK(map.at(0, 0) <= 0.25 + 1e-12);
  CHECK_THROWS_AS(map.at(3, 0), std::out_of_range);
  CHECK_THROWS_AS(covariance_map(samples, Site::of(1, 1), 2), std::invalid_argument);
}

TEST_CASE("box counts include sleepers and actives alike") {
  Configuration cfg(Topology::wired_box(2, 4));
  cfg.set_state(Site::of(1, 1), SiteState::sleeper());
  cfg.set_state(Site::of(2, 1), SiteState::active(3));
  cfg.set_state(Site::of(4, 4), SiteState::sleeper());
  CHECK(box_count(cfg, {1, 1, 0, 0}, {2, 1, 1, 1}) == 4);
  CHECK(box_count(cfg, {1, 1, 0, 0}, {4, 4, 1, 1}) == 5);
  CHECK(box_count(cfg, {3, 3, 0, 0}, {1, 1, 1, 1}) == 0);
  CHECK_THROWS_AS(box_count(cfg, {0, 1, 0, 0}, {2, 1, 1, 1}), std::invalid_argument);
  CHECK_THROWS_AS(box_count(cfg, {1, 1, 0, 0}, {0, 1, 1, 1}), std::invalid_argument);
}

TEST_CASE("variance curve recovers the independent-site law") {
  // Binomial counts emulate boxes of independent Bernoulli(0.3) sites.
  std::mt19937_64 rng(5);
  const double zeta = 0.3;
  const std::vector<double> sides{4, 8, 16, 32};
  std::vector<double> volumes;
  std::vector<std::vector<double>> counts;
  for (double side : sides) {
    const double vol = side * side;
    volumes.push_back(vol);
    std::binomial_distribution<int> bin(int(vol), zeta);
    std::vector<double> xs;
    for (int r = 0; r < 10000; ++r) xs.push_back(double(bin(rng)));
    counts.push_back(std::move(xs));
  }
  const VarianceCurve curve = variance_curve(counts, volumes, 2, zeta);
  REQUIRE(curve.variance.size() == 4);
  REQUIRE(curve.tail.size() == 4);
  for (std::size_t b = 0; b < 4; ++b) {
    const double expect = zeta * (1 - zeta) * volumes[b];
    CHECK(curve.variance[b] > expect * 0.95);
    CHECK(curve.variance[b] < expect * 1.05);
    CHECK(curve.tail[b] > 0.4);
    CHECK(curve.tail[b] < 0.65);
  }
  REQUIRE(curve.fitted_alpha.has_value());
  CHECK(std::abs(curve.fitted_alpha->alpha - 2.0) < 0.1);
  CHECK(std::abs(curve.fitted_alpha->alpha - 2.0) <=
        4.0 * curve.fitted_alpha->std_error + 0.05);
  CHECK(curve.replicas == 10000);
}

TEST_CASE("variance curve validates its inputs") {
  const std::vector<double> volumes{16.0};
  const std::vector<double> no_volumes;
  std::vector<std::vector<double>> single{{3.0}};
  CHECK_THROWS_AS(variance_curve(single, volumes, 2), std::domain_error);
  std::vector<std::vector<double>> fine{{3.0, 4.0}};
  CHECK_NOTHROW(variance_curve(fine, volumes, 2));
  CHECK_FALSE(variance_curve(fine, volumes, 2).fitted_alpha.has_value());
  CHECK_THROWS_AS(variance_curve(fine, no_volumes, 2), std::invalid_argument);
  CHECK_THROWS_AS(variance_curve(fine, volumes, 0), std::invalid_argument);
}

TEST_CASE("saturation distance is zero exactly on the ramp") {
  std::vector<DensityPoint> curve;
  for (int k = 1; k <= 24; ++k) {
    DensityPoint p;
    p.step = std::uint64_t(k);
    p.t = 0.05 * k;
    p.global_density = std::min(p.t, 0.8);
    p.bulk_density = p.global_density;
    curve.push_back(p);
  }
  const SaturationFit exact = saturation_distance(curve, 0.8);
  CHECK(exact.distance == 0.0);
  REQUIRE(exact.plateau.has_value());
  CHECK(*exact.plateau == doctest::Approx(0.8));

  curve[10].global_density += 0.07;  // t = 0.55
  const SaturationFit bent = saturation_distance(curve, 0.8);
  CHECK(bent.distance == doctest::Approx(0.07));
  const SaturationFit bulk = saturation_distance(curve, 0.8, true);
  CHECK(bulk.distance == 0.0);

  CHECK_THROWS_AS(saturation_distance({}, 0.8), std::invalid_argument);
}

TEST_CASE("sleeper support closes interior holes without inflating the outline") {
  Configuration cfg(Topology::dynamic_lattice(2));
  const Coord R = 6;
  cfg.ensure_covered(Site::of(R, R));
  cfg.ensure_covered(Site::of(-R, -R));
  const std::set<std::pair<Coord, Coord>> holes{{0, 0}, {2, 1}, {-3, 2}};
  std::size_t ball_sites = 0;
  for (Coord y = -R; y <= R; ++y) {
    for (Coord x = -R; x <= R; ++x) {
      if (x * x + y * y > R * R) continue;
      ++ball_sites;
      if (holes.count({x, y})) continue;
      cfg.set_state(Site::of(x, y), SiteState::sleeper());
    }
  }

  const std::vector<Site> support = sleeper_support(cfg, 3);
  std::set<std::pair<Coord, Coord>> in_support;
  for (const Site& s : support) in_support.insert({s.c[0], s.c[1]});
  for (const auto& h : holes) CHECK(in_support.count(h) == 1);
  CHECK(support.size() >= ball_sites);
  for (const Site& s : support) CHECK(site_norm(s, 2) <= double(R) + 1.5);

  // Radius zero is the identity closing.
  const std::vector<Site> raw = sleeper_support(cfg, 0);
  CHECK(raw.size() == ball_sites - holes.size());

  const Configuration none(Topology::dynamic_lattice(2));
  CHECK(sleeper_support(none).empty());
}

TEST_CASE("quadrature with the constant function reduces to site counting") {
  const Region disk = Region::ball(2, {0, 0, 0, 0}, 1.0);
  const double eps = 1.0 / 16.0;
  const StabilizationOutcome out = region_source(disk, eps, 1.0, 13);
  REQUIRE(out.stabilized());

  const double zeta = 0.68;
  const std::vector<QuadratureFunction> fns{
      QuadratureFunction::constant(),
      QuadratureFunction::affine({0.5, -0.25, 0, 0}, 2.0),
      QuadratureFunction::neg_square({0.3, 0.1, 0, 0}),
  };
  const std::vector<QuadratureReport> reports = quadrature_check(disk, eps, out, zeta, fns);
  REQUIRE(reports.size() == 3);

  const double sources = double(region_sites(disk, eps).size());
  const double support = double(sleeper_support(out.final, 3).size());
  const double expect = eps * eps * (sources - zeta * support);
  CHECK(reports[0].kind == QuadratureFunction::Kind::kConstant);
  CHECK(std::abs(reports[0].margin - expect) < 1e-9);
  CHECK(std::abs(reports[0].lhs - eps * eps * sources) < 1e-9);
  for (const QuadratureReport& r : reports) {
    CHECK(std::isfinite(r.lhs));
    CHECK(std::isfinite(r.rhs));
    CHECK(std::abs(r.margin - (r.lhs - r.rhs)) < 1e-12);
  }
}

TEST_CASE("quadrature rejects convex test functions and bad arguments") {
  const Region disk = Region::ball(2, {0, 0, 0, 0}, 0.5);
  const double eps = 0.25;
  const StabilizationOutcome out = region_source(disk, eps, 1.0, 3);
  REQUIRE(out.stabilized());

  const std::vector<QuadratureFunction> convex{
      QuadratureFunction::neg_square({0, 0, 0, 0}, -1.0)};
  CHECK_THROWS_AS(quadrature_check(disk, eps, out, 0.68, convex), std::invalid_argument);

  const std::vector<QuadratureFunction> fine{QuadratureFunction::constant()};
  CHECK_THROWS_AS(quadrature_check(disk, 0.0, out, 0.68, fine), std::invalid_argument);
  CHECK_THROWS_AS(quadrature_check(disk, eps, out, 0.0, fine), std::invalid_argument);
  CHECK_THROWS_AS(quadrature_check(disk, eps, out, 1.5, fine), std::invalid_argument);
}

TEST_CASE("chi-square helpers match textbook values") {
  CHECK(chi_square_p_value(0.0, 1.0) == doctest::Approx(1.0));
  CHECK(chi_square_p_value(3.841, 1.0) == doctest::Approx(0.05).epsilon(2e-2));
  CHECK(chi_square_p_value(200.0, 1.0) < 1e-20);
  CHECK_THROWS_AS(chi_square_p_value(-1.0, 1.0), std::invalid_argument);

  const std::vector<std::uint64_t> a{50, 50};
  const std::vector<std::uint64_t> b{50, 50};
  const ChiSquareTest same = chi_square_two_sample(a, b);
  CHECK(same.statistic == 0.0);
  CHECK(same.p_value == doctest::Approx(1.0));

  const std::vector<std::uint64_t> c{100, 0};
  const std::vector<std::uint64_t> d{0, 100};
  const ChiSquareTest split = chi_square_two_sample(c, d);
  CHECK(split.statistic == doctest::Approx(200.0));
  CHECK(split.p_value < 1e-20);

  const std::vector<std::uint64_t> zeros{0, 0};
  CHECK_THROWS_AS(chi_square_two_sample(a, zeros), std::domain_error);
  const std::vector<std::uint64_t> short_hist{10};
  CHECK_THROWS_AS(chi_square_two_sample(a, short_hist), std::invalid_argument);
}
