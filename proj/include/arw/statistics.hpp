#pragma once

// Estimators turning configurations and traces into observables: aggregate
// shape metrics, radial density profiles, symmetry-averaged correlation
// tables, covariance maps, box-count variance curves with a growth-exponent
// fit, distance to a saturating density ramp, and quadrature checks of
// region sources against superharmonic test functions.
//
// Everything here is a pure function of its inputs. The accumulator classes
// exist so large sample streams need not be held in memory.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "arw/chains.hpp"
#include "arw/lattice.hpp"
#include "arw/stabilize.hpp"

namespace arw {

/// Shape summary of a source stabilization. Radii are Euclidean on site
/// centers: inradius is the largest r with every site of norm < r visited,
/// outradius the largest visited norm. Discreteness can push the inradius a
/// hair past the outradius, so sphericity is clamped to 1.
struct AggregateMetrics {
  double zeta_hat = 0;
  double inradius = 0;
  double outradius = 0;
  double sphericity = 0;
};

/// Throws std::domain_error when the outcome began with no particles.
AggregateMetrics aggregate_metrics(const StabilizationOutcome& outcome);

/// Sleeper density by equal-volume origin-centered annuli up to the
/// inradius. When the requested resolution leaves an annulus without sites
/// the count is reduced and the result flagged.
struct AnnulusProfile {
  std::vector<double> density;
  double inradius = 0;
  bool truncated = false;
};

AnnulusProfile annulus_profile(const StabilizationOutcome& outcome, int n_annuli);

/// Symmetries to average over: full translation group of a torus, the eight
/// square symmetries about a centered window, or nothing.
enum class SymmetryGroup { kIdentity, kTorusTranslations, kD8 };

struct CorrelationEntry {
  int dx = 0;
  int dy = 0;
  double corr = 0;
  double std_error = 0;
  double mean_product = 0;  // symmetry-averaged E[1(v) 1(v+offset)]
};

/// Site correlations over the offset triangle 0 <= dy <= dx <= r_max,
/// normalized as (E[1 1] - zeta^2) / (zeta - zeta^2) with the pooled
/// empirical density. corr at (0,0) is identically 1.
struct CorrelationTable {
  std::vector<CorrelationEntry> entries;
  double zeta_hat = 0;
  std::uint64_t samples = 0;

  const CorrelationEntry& at(int dx, int dy) const;
};

/// Streams stable two-dimensional samples into a correlation table without
/// retaining them. All samples must share the first sample's topology.
class CorrelationAccumulator {
 public:
  /// window_side selects a centered square window; defaults to the whole
  /// domain on a torus and to side floor(L/2) on a wired box. Growable
  /// lattices have no natural side, so there it must be given. Translation
  /// averaging needs a torus and a full window; D8 needs a square window.
  CorrelationAccumulator(SymmetryGroup group, int r_max,
                         std::optional<Coord> window_side = {});

  void add(const Configuration& sample);

  /// Throws std::logic_error without samples and std::domain_error when the
  /// pooled density is degenerate (0 or 1).
  CorrelationTable finish() const;

 private:
  void bind(const Configuration& first);
  std::vector<double> sample_products(const Configuration& sample) const;

  SymmetryGroup group_;
  int r_max_;
  std::optional<Coord> window_side_;
  bool bound_ = false;
  Topology topo_{Topology::dynamic_lattice(1)};
  Coords window_lo_{};
  Coord window_{0};
  std::vector<std::pair<int, int>> offsets_;
  std::uint64_t samples_ = 0;
  double density_sum_ = 0;
  std::vector<double> mean_;  // Welford running mean of per-sample products
  std::vector<double> m2_;
};

CorrelationTable correlation_table(std::span<const Configuration> samples,
                                   SymmetryGroup group, int r_max,
                                   std::optional<Coord> window_side = {});

/// Covariances Cov(1(center), 1(center+offset)) over the square of offsets
/// |dx|, |dy| <= r_max, with standard errors across samples. On a torus the
/// estimate is additionally averaged over translations (the anchor site is
/// immaterial in law there).
struct CovarianceMap {
  int r_max = 0;
  std::uint64_t samples = 0;
  std::vector<double> cov;        // row-major, (dx,dy) at (dy+r)*(2r+1)+(dx+r)
  std::vector<double> std_error;  // same layout

  double at(int dx, int dy) const;
  double error_at(int dx, int dy) const;
};

class CovarianceAccumulator {
 public:
  CovarianceAccumulator(const Site& center, int r_max);

  void add(const Configuration& sample);
  CovarianceMap finish() const;

 private:
  Site center_;
  int r_max_;
  bool bound_ = false;
  bool translate_ = false;
  Topology topo_{Topology::dynamic_lattice(1)};
  std::uint64_t samples_ = 0;
  std::vector<double> mean_;                // torus: Welford over per-sample products
  std::vector<double> m2_;
  std::vector<std::uint32_t> site_hits_;    // torus: occupancy count per site
  std::vector<std::uint8_t> anchor_buf_;    // anchored mode: indicators per sample
  std::vector<std::uint8_t> offset_buf_;    // samples * (2r+1)^2, row-major
};

CovarianceMap covariance_map(std::span<const Configuration> samples, const Site& center,
                             int r_max);

/// Particles inside the axis box [lo, lo + shape) of a configuration.
std::uint64_t box_count(const Configuration& config, const Coords& lo, const Coords& shape);

struct AlphaFit {
  double alpha = 0;      // growth exponent of variance against box side
  double std_error = 0;  // from the regression residuals
  double intercept = 0;  // of log variance against log side
};

/// Count fluctuations across replicas per box, with an optional growth
/// exponent and the upper tail P(count >= zeta_ref * volume) used as the
/// incompressibility diagnostic.
struct VarianceCurve {
  std::vector<double> volume;
  std::vector<double> variance;  // unbiased across replicas
  std::vector<double> tail;      // present when zeta_ref was given
  std::uint64_t replicas = 0;    // smallest replica count across boxes
  std::optional<AlphaFit> fitted_alpha;
};

/// counts[b][r] is replica r's particle count in box b; volumes[b] = side^dim.
/// Throws std::domain_error when a box has fewer than two replicas. The
/// exponent is fitted by least squares on log variance against log side
/// (i.e. dim times the log-volume slope) once three or more distinct sizes
/// with positive variance are present: an independent-site field then
/// recovers alpha = dim exactly in expectation.
VarianceCurve variance_curve(const std::vector<std::vector<double>>& counts,
                             std::span<const double> volumes, int dim,
                             std::optional<double> zeta_ref = {});

/// Fit of a driven-density curve against the saturating ramp min(t, level).
struct SaturationFit {
  double distance = 0;               // sup over the curve's grid
  std::optional<double> plateau;     // mean density over t in [1.0, 1.2]
};

/// use_bulk selects the bulk-window density instead of the global one.
/// Throws std::invalid_argument on an empty curve.
SaturationFit saturation_distance(std::span<const DensityPoint> curve, double level,
                                  bool use_bulk = false);

/// The filled region behind a stable configuration's sleepers: morphological
/// closing of the sleeper set with a Euclidean ball of the given radius.
/// Interior holes vanish; the outline keeps its scale.
std::vector<Site> sleeper_support(const Configuration& config, int closing_radius = 3);

/// Test functions for quadrature checks: constants, affine maps, and scaled
/// concave paraboloids -scale * |x - x0|^2. All have non-positive discrete
/// Laplacian for non-negative paraboloid scales; a negative scale flips the
/// paraboloid convex and the quadrature screen rejects it.
struct QuadratureFunction {
  enum class Kind { kConstant, kAffine, kNegSquare };

  Kind kind = Kind::kConstant;
  std::array<double, kMaxDim> a{};   // affine slope
  double b = 1.0;                    // affine offset, constant value, or paraboloid scale
  std::array<double, kMaxDim> x0{};  // center of the paraboloid

  double operator()(std::span<const double> p) const;

  static QuadratureFunction constant(double value = 1.0);
  static QuadratureFunction affine(const std::array<double, kMaxDim>& slope, double offset);
  static QuadratureFunction neg_square(const std::array<double, kMaxDim>& center,
                                       double scale = 1.0);
};

struct QuadratureReport {
  QuadratureFunction::Kind kind{};
  double lhs = 0;     // eps^d * sum of u over source sites
  double rhs = 0;     // zeta_a * eps^d * sum of u over the support
  double margin = 0;  // lhs - rhs
};

/// Evaluates each test function against one region-source outcome: the mesh
/// sum over the source set versus zeta_a times the mesh sum over the sleeper
/// support. Functions whose discrete Laplacian turns positive at any sampled
/// site are rejected with std::invalid_argument.
std::vector<QuadratureReport> quadrature_check(const Region& region, double eps,
                                               const StabilizationOutcome& outcome,
                                               double zeta_a,
                                               std::span<const QuadratureFunction> functions);

/// Upper tail of the chi-square distribution.
double chi_square_p_value(double statistic, double dof);

/// Pearson two-sample comparison of histogram counts over shared bins.
struct ChiSquareTest {
  double statistic = 0;
  double dof = 0;
  double p_value = 0;
};

ChiSquareTest chi_square_two_sample(std::span<const std::uint64_t> a,
                                    std::span<const std::uint64_t> b);

}  // namespace arw
