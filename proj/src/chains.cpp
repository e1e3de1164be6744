#include "arw/chains.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace arw {

namespace {

/// Adds one particle (or wakes everything when v is null), stabilizes, and
/// commits the step, rolling the state back when the budget runs out.
StepResult step_common(ChainState& state, const Site* v, const ChainParams& params,
                       Stabilizer& engine) {
  Configuration snapshot = state.config;
  if (v != nullptr) {
    state.config.add_active(*v);
  } else {
    state.config.wake_all();
  }
  const auto stats = engine.run(state.config, params.source(state.epoch_counter),
                                params.policy, params.budget);
  if (stats.status != StabilizeStatus::kStabilized) {
    state.config = std::move(snapshot);
    return {false, stats};
  }
  state.step += 1;
  state.epoch_counter += 1;
  state.total_moves += stats.moves;
  state.total_exits += stats.exits;
  state.cumulative.push_back(
      {state.step, state.config.total_particles(), state.total_moves, state.total_exits});
  return {true, stats};
}

void require_kind(const Topology& t, TopologyKind kind, const char* what) {
  if (t.kind() != kind) throw std::invalid_argument(what);
}

}  // namespace

ChainState::ChainState(Configuration c) : config(std::move(c)) {
  if (!config.is_stable())
    throw std::invalid_argument("chain states require a stable configuration");
}

DrivingStream::DrivingStream(const Topology& t, std::uint64_t run_seed)
    : topo_(t), rng_(rng::derive_seed(run_seed, 0, rng::StreamTag::kDriving)) {
  if (!t.finite()) throw std::invalid_argument("uniform driving needs a finite domain");
}

Site DrivingStream::next() {
  const Coord lo = topo_.kind() == TopologyKind::kWiredBox ? 1 : 0;
  Site s;
  for (int i = 0; i < topo_.dim(); ++i)
    s.c[i] = lo + Coord(rng_.next_below(std::uint64_t(topo_.side(i))));
  return s;
}

StepResult wired_step(ChainState& state, const Site& v, const ChainParams& params,
                      Stabilizer& engine) {
  require_kind(state.config.topology(), TopologyKind::kWiredBox,
               "wired steps need a wired box");
  if (!state.config.topology().contains(v))
    throw std::domain_error("driving site outside the box");
  return step_common(state, &v, params, engine);
}

StepResult free_step(ChainState& state, const Site& v, const ChainParams& params,
                     Stabilizer& engine) {
  require_kind(state.config.topology(), TopologyKind::kTorus, "free steps need a torus");
  if (!state.config.topology().contains(v))
    throw std::domain_error("driving site outside the torus");
  if (state.config.total_particles() >= state.config.topology().num_sites())
    throw std::domain_error("the torus is fully occupied");
  return step_common(state, &v, params, engine);
}

StepResult wake_step(ChainState& state, const ChainParams& params, Stabilizer& engine) {
  require_kind(state.config.topology(), TopologyKind::kTorus, "wake steps need a torus");
  return step_common(state, nullptr, params, engine);
}

StabilizationOutcome point_source(std::uint64_t n, double lambda, int dim,
                                  std::uint64_t seed, SourceMode mode,
                                  SchedulerPolicy policy, Budget budget) {
  if (n == 0) throw std::invalid_argument("a point source needs at least one particle");
  if (n >= Configuration::kSleeping)
    throw std::invalid_argument("point source exceeds per-site capacity");
  Configuration cfg(Topology::dynamic_lattice(dim));
  cfg.add_active(Site{}, std::uint32_t(n));
  return stabilize(cfg, InstructionSource{mode, seed, 0, lambda}, policy, budget);
}

Region Region::ball(int dim, const std::array<double, kMaxDim>& center, double radius) {
  if (dim < 1 || dim > kMaxDim) throw std::invalid_argument("region dimension out of range");
  if (!(radius > 0)) throw std::invalid_argument("ball radius must be positive");
  Region r;
  r.dim_ = dim;
  r.balls_.push_back({center, radius});
  return r;
}

Region Region::box(int dim, const std::array<double, kMaxDim>& lo,
                   const std::array<double, kMaxDim>& hi) {
  if (dim < 1 || dim > kMaxDim) throw std::invalid_argument("region dimension out of range");
  for (int i = 0; i < dim; ++i)
    if (!(lo[i] <= hi[i])) throw std::invalid_argument("box bounds are inverted");
  Region r;
  r.dim_ = dim;
  r.boxes_.push_back({lo, hi});
  return r;
}

Region Region::unite(const Region& other) const {
  if (dim_ != other.dim_) throw std::invalid_argument("region dimensions differ");
  Region r = *this;
  r.balls_.insert(r.balls_.end(), other.balls_.begin(), other.balls_.end());
  r.boxes_.insert(r.boxes_.end(), other.boxes_.begin(), other.boxes_.end());
  return r;
}

bool Region::contains(const std::array<double, kMaxDim>& p) const {
  for (const auto& b : balls_) {
    double d2 = 0;
    for (int i = 0; i < dim_; ++i) {
      const double d = p[i] - b.center[i];
      d2 += d * d;
    }
    if (d2 <= b.radius * b.radius) return true;
  }
  for (const auto& b : boxes_) {
    bool inside = true;
    for (int i = 0; i < dim_ && inside; ++i) inside = b.lo[i] <= p[i] && p[i] <= b.hi[i];
    if (inside) return true;
  }
  return false;
}

std::array<double, kMaxDim> Region::lower() const {
  std::array<double, kMaxDim> lo{};
  lo.fill(std::numeric_limits<double>::infinity());
  for (const auto& b : balls_)
    for (int i = 0; i < dim_; ++i) lo[i] = std::min(lo[i], b.center[i] - b.radius);
  for (const auto& b : boxes_)
    for (int i = 0; i < dim_; ++i) lo[i] = std::min(lo[i], b.lo[i]);
  return lo;
}

std::array<double, kMaxDim> Region::upper() const {
  std::array<double, kMaxDim> hi{};
  hi.fill(-std::numeric_limits<double>::infinity());
  for (const auto& b : balls_)
    for (int i = 0; i < dim_; ++i) hi[i] = std::max(hi[i], b.center[i] + b.radius);
  for (const auto& b : boxes_)
    for (int i = 0; i < dim_; ++i) hi[i] = std::max(hi[i], b.hi[i]);
  return hi;
}

std::vector<Site> region_sites(const Region& region, double eps) {
  if (!(eps > 0) || !std::isfinite(eps))
    throw std::invalid_argument("the mesh must be positive");
  const int d = region.dim();
  const auto lo = region.lower();
  const auto hi = region.upper();
  Coords a{}, b{};
  for (int i = 0; i < d; ++i) {
    // A whisker of tolerance keeps exactly-representable bounds like 1/eps
    // from falling to floating-point dust.
    const double lod = std::ceil(lo[i] / eps - 1e-9);
    const double hid = std::floor(hi[i] / eps + 1e-9);
    if (hid < lod) return {};
    if (lod < -double(kCoordLimit) || hid > double(kCoordLimit))
      throw std::invalid_argument("discretized region exceeds the coordinate range");
    a[i] = Coord(lod);
    b[i] = Coord(hid);
  }
  std::vector<Site> out;
  Coords x = a;
  while (true) {
    std::array<double, kMaxDim> p{};
    for (int i = 0; i < d; ++i) p[i] = eps * double(x[i]);
    if (region.contains(p)) out.push_back(Site{x});
    int axis = 0;
    while (axis < d && ++x[axis] > b[axis]) {
      x[axis] = a[axis];
      ++axis;
    }
    if (axis == d) break;
  }
  return out;
}

StabilizationOutcome region_source(const Region& region, double eps, double lambda,
                                   std::uint64_t seed, SourceMode mode,
                                   SchedulerPolicy policy, Budget budget) {
  const auto sites = region_sites(region, eps);
  if (sites.empty()) throw std::domain_error("the discretized region is empty");
  Configuration cfg(Topology::dynamic_lattice(region.dim()));
  for (const auto& s : sites) cfg.add_active(s);
  return stabilize(cfg, InstructionSource{mode, seed, 0, lambda}, policy, budget);
}

SprinkleOutcome poisson_stabilize(Coord L, int dim, const Configuration* base, double t,
                                  double lambda, std::uint64_t seed, SourceMode mode,
                                  SchedulerPolicy policy, Budget budget) {
  if (!(t >= 0) || !std::isfinite(t))
    throw std::invalid_argument("the sprinkle mean must be finite and non-negative");
  // The product-of-uniforms sampler loses accuracy once exp(-t) underflows.
  if (t > 500) throw std::invalid_argument("sprinkle mean too large for the sampler");
  const auto topo = Topology::torus(dim, L);
  Configuration cfg(topo);
  if (base != nullptr) {
    if (base->topology() != topo)
      throw std::invalid_argument("base configuration lives on a different torus");
    if (!base->is_stable()) throw std::invalid_argument("base configuration must be stable");
    cfg = *base;
  }
  const std::uint64_t capacity = topo.num_sites();
  const std::uint64_t have = cfg.total_particles();

  rng::Xoshiro256 sprinkle(rng::derive_seed(seed, 0, rng::StreamTag::kSprinkle));
  std::vector<std::uint32_t> drops(capacity);
  std::uint64_t total = 0;
  std::uint64_t resamples = 0;
  constexpr std::uint64_t kMaxResamples = 100000;
  while (true) {
    total = 0;
    for (auto& k : drops) {
      k = std::uint32_t(rng::poisson_knuth(sprinkle, t));
      total += k;
    }
    if (have + total <= capacity) break;
    if (++resamples > kMaxResamples)
      throw std::domain_error("no feasible sprinkle at this density");
  }

  const auto& geo = cfg.geometry();
  for (std::uint64_t idx = 0; idx < std::uint64_t(geo.cells); ++idx)
    if (drops[idx] != 0) cfg.add_active(Site{geo.coords_of(idx)}, drops[idx]);

  auto outcome = stabilize(cfg, InstructionSource{mode, seed, 0, lambda}, policy, budget);
  return SprinkleOutcome{std::move(outcome), total, resamples};
}

Configuration wired_exact_sample(const Topology& box, const ChainParams& params) {
  require_kind(box, TopologyKind::kWiredBox, "exact sampling needs a wired box");
  Configuration cfg(box);
  const auto geo = box.domain_geometry();
  for (std::uint64_t idx = 0; idx < std::uint64_t(geo.cells); ++idx)
    cfg.add_active(Site{geo.coords_of(idx)});
  Stabilizer engine(box);
  const auto stats = engine.run(cfg, params.source(0), params.policy, params.budget);
  if (stats.status != StabilizeStatus::kStabilized)
    throw std::runtime_error("instruction budget exceeded while drawing an exact sample");
  return cfg;
}

ChainState wired_exact_state(const Topology& box, const ChainParams& params) {
  ChainState state(wired_exact_sample(box, params));
  state.epoch_counter = 1;
  return state;
}

namespace {

/// Particle count inside the centered sub-box of side floor(L/2).
std::uint64_t bulk_count(const Configuration& cfg, Coord L, int dim) {
  const Coord m = L / 2;
  const Coord start = (L - m) / 2 + 1;
  Coords x{};
  for (int i = 0; i < dim; ++i) x[i] = start;
  std::uint64_t count = 0;
  while (true) {
    count += cfg.state(Site{x}).n;
    int axis = 0;
    while (axis < dim && ++x[axis] >= start + m) {
      x[axis] = start;
      ++axis;
    }
    if (axis == dim) break;
  }
  return count;
}

}  // namespace

DriveCurve wired_drive_uniform(Coord L, int dim, std::uint64_t t_steps,
                               const ChainParams& params, std::uint64_t record_every) {
  if (record_every == 0) throw std::invalid_argument("record stride must be positive");
  const auto topo = Topology::wired_box(dim, L);
  const double n_sites = double(topo.num_sites());
  const double bulk_sites = std::pow(double(L / 2), dim);
  DriveCurve curve{{}, ChainState(Configuration(topo))};
  Stabilizer engine(topo);
  DrivingStream drive(topo, params.run_seed);
  for (std::uint64_t k = 1; k <= t_steps; ++k) {
    const Site v = drive.next();
    const auto res = wired_step(curve.state, v, params, engine);
    if (!res.committed) break;
    if (k % record_every == 0 || k == t_steps) {
      const auto& cfg = curve.state.config;
      curve.points.push_back({k, double(k) / n_sites,
                              double(cfg.total_particles()) / n_sites,
                              double(bulk_count(cfg, L, dim)) / bulk_sites});
    }
  }
  return curve;
}

double ThresholdDetector::threshold(std::uint64_t num_sites) const {
  const double n = double(num_sites);
  const double logn = std::log(std::max(2.0, n));
  switch (form) {
    case Form::kNLogSquaredN:
      return scale * n * logn * logn;
    case Form::kNPowThreeHalves:
      return scale * n * std::sqrt(n);
    case Form::kScaledNLogN:
      return scale * n * logn;
  }
  throw std::logic_error("unknown threshold form");
}

FreeRunTrace free_run(Coord L, int dim, std::uint64_t steps, const ChainParams& params,
                      ThresholdDetector detector, bool stop_at_threshold,
                      std::span<const std::uint64_t> snapshot_steps) {
  const auto topo = Topology::torus(dim, L);
  if (steps > topo.num_sites())
    throw std::domain_error("the torus cannot hold more particles than sites");
  std::vector<std::uint64_t> wanted(snapshot_steps.begin(), snapshot_steps.end());
  std::sort(wanted.begin(), wanted.end());
  wanted.erase(std::unique(wanted.begin(), wanted.end()), wanted.end());

  detector.triggered_at.reset();
  FreeRunTrace trace{ChainState(Configuration(topo)), {}, detector,
                     detector.threshold(topo.num_sites()), false, {}};
  Stabilizer engine(topo);
  DrivingStream drive(topo, params.run_seed);
  auto next_snapshot = wanted.begin();
  for (std::uint64_t k = 1; k <= steps; ++k) {
    const Site v = drive.next();
    const auto res = free_step(trace.state, v, params, engine);
    const bool crossed = double(res.stats.moves) >= trace.threshold;
    if (!res.committed) {
      // The abandoned step's partial work can already prove the crossing.
      if (crossed && !trace.detector.triggered_at) trace.detector.triggered_at = k;
      trace.halted_on_budget = true;
      break;
    }
    trace.step_moves.push_back(res.stats.moves);
    if (crossed && !trace.detector.triggered_at) trace.detector.triggered_at = k;
    if (next_snapshot != wanted.end() && *next_snapshot == k) {
      trace.snapshots.push_back(trace.state.config);
      ++next_snapshot;
    }
    if (stop_at_threshold && trace.detector.triggered_at) break;
  }
  return trace;
}

StabilizationOutcome free_batch_sample(Coord L, int dim, std::uint64_t k,
                                       const ChainParams& params) {
  const auto topo = Topology::torus(dim, L);
  if (k > topo.num_sites())
    throw std::domain_error("the torus cannot hold more particles than sites");
  Configuration cfg(topo);
  DrivingStream drive(topo, params.run_seed);
  for (std::uint64_t i = 0; i < k; ++i) cfg.add_active(drive.next());
  return stabilize(cfg, params.source(0), params.policy, params.budget);
}

ChainState wake_init(Coord L, int dim, std::uint64_t n, const ChainParams& params) {
  const auto topo = Topology::torus(dim, L);
  if (n > topo.num_sites())
    throw std::domain_error("the torus cannot hold more particles than sites");
  Configuration cfg(topo);
  rng::Xoshiro256 drop(rng::derive_seed(params.run_seed, 0, rng::StreamTag::kInit));
  for (std::uint64_t i = 0; i < n; ++i) {
    Site s;
    for (int axis = 0; axis < dim; ++axis)
      s.c[axis] = Coord(drop.next_below(std::uint64_t(topo.side(axis))));
    cfg.add_active(s);
  }
  Stabilizer engine(topo);
  const auto stats = engine.run(cfg, params.source(0), params.policy, params.budget);
  if (stats.status != StabilizeStatus::kStabilized)
    throw std::runtime_error("instruction budget exceeded while preparing the drop");
  ChainState state(std::move(cfg));
  state.epoch_counter = 1;
  return state;
}

CouplingResult coupling_run(ChainState a, ChainState b, const ChainParams& params,
                            std::uint64_t max_steps) {
  if (a.config.topology() != b.config.topology())
    throw std::invalid_argument("coupled chains need one topology");
  if (params.mode != SourceMode::kLiteral)
    throw std::invalid_argument("coupling needs literal instruction stacks");
  if (a.epoch_counter != b.epoch_counter)
    throw std::invalid_argument("coupled chains need aligned epochs");
  const auto& topo = a.config.topology();
  const bool wired = topo.kind() == TopologyKind::kWiredBox;
  if (!wired && topo.kind() != TopologyKind::kTorus)
    throw std::invalid_argument("coupling needs a finite topology");

  CouplingResult result;
  if (a.config.same_occupation(b.config)) {
    result.coupled_at = 0;
    return result;
  }
  Stabilizer engine(topo);
  DrivingStream drive(topo, params.run_seed);
  for (std::uint64_t k = 1; k <= max_steps; ++k) {
    const Site v = drive.next();
    const auto ra = wired ? wired_step(a, v, params, engine) : free_step(a, v, params, engine);
    const auto rb = wired ? wired_step(b, v, params, engine) : free_step(b, v, params, engine);
    if (!ra.committed || !rb.committed) {
      result.halted_on_budget = true;
      return result;
    }
    result.steps_run = k;
    if (a.config.same_occupation(b.config)) {
      result.coupled_at = k;
      return result;
    }
  }
  return result;
}

}  // namespace arw
