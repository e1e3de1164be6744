#include "arw/harness.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "arw/rng.hpp"
#include "arw/statistics.hpp"

namespace arw {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

constexpr std::array<std::pair<ExperimentKind, const char*>, 11> kExperimentNames{{
    {ExperimentKind::kAggregate, "aggregate"},
    {ExperimentKind::kRegion, "region"},
    {ExperimentKind::kSprinkle, "sprinkle"},
    {ExperimentKind::kWiredSample, "wired-sample"},
    {ExperimentKind::kHockey, "hockey"},
    {ExperimentKind::kFree, "free"},
    {ExperimentKind::kWake, "wake"},
    {ExperimentKind::kCorrelations, "correlations"},
    {ExperimentKind::kHyperuniformity, "hyperuniformity"},
    {ExperimentKind::kQuadrature, "quadrature"},
    {ExperimentKind::kCoupling, "coupling"},
}};

[[noreturn]] void fail_config(const std::string& message) {
  throw std::invalid_argument(message);
}

std::string mode_name(SourceMode mode) {
  return mode == SourceMode::kLiteral ? "literal" : "collapsed";
}

SourceMode mode_from_string(const std::string& name) {
  if (name == "literal") return SourceMode::kLiteral;
  if (name == "collapsed") return SourceMode::kCollapsed;
  fail_config("mode must be literal or collapsed, got \"" + name + "\"");
}

std::uint64_t as_uint(const json& v, const std::string& key) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return std::uint64_t(v.get<std::int64_t>());
  fail_config("config key \"" + key + "\" must be a non-negative integer");
}

int as_int(const json& v, const std::string& key) {
  const std::uint64_t raw = as_uint(v, key);
  if (raw > std::uint64_t(std::numeric_limits<int>::max()))
    fail_config("config key \"" + key + "\" is out of range");
  return int(raw);
}

double as_double(const json& v, const std::string& key) {
  if (v.is_number()) return v.get<double>();
  if (v.is_string() && v.get<std::string>() == "inf") return std::numeric_limits<double>::infinity();
  fail_config("config key \"" + key + "\" must be a number");
}

std::string as_string(const json& v, const std::string& key) {
  if (v.is_string()) return v.get<std::string>();
  fail_config("config key \"" + key + "\" must be a string");
}

/// Writes content to path.tmp, then renames over path. The rename keeps
/// readers from ever seeing a half-written file.
void write_file_atomic(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(content.data(), std::streamsize(content.size()));
    out.flush();
    if (!out)
      throw fs::filesystem_error("write failed", tmp, std::make_error_code(std::errc::io_error));
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw fs::filesystem_error("cannot open file", path,
                               std::make_error_code(std::errc::no_such_file_or_directory));
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad())
    throw fs::filesystem_error("read failed", path, std::make_error_code(std::errc::io_error));
  return content;
}

/// Comma-separated table with a fixed column count per row, numbers in
/// shortest round-trip form. The whole file is built in memory so it can be
/// written atomically and checksummed without re-reading.
class Csv {
 public:
  explicit Csv(std::initializer_list<const char*> header) : columns_(header.size()) {
    for (const char* name : header) raw(name);
    end_row();
  }

  Csv& f(double value) { return raw(format_double(value)); }
  Csv& u(std::uint64_t value) { return raw(std::to_string(value)); }
  Csv& i(std::int64_t value) { return raw(std::to_string(value)); }
  Csv& s(std::string_view text) { return raw(text); }
  Csv& blank() { return raw(""); }

  void end_row() {
    if (col_ != columns_) throw std::logic_error("csv row has the wrong column count");
    out_.push_back('\n');
    col_ = 0;
  }

  const std::string& str() const {
    if (col_ != 0) throw std::logic_error("csv ends mid-row");
    return out_;
  }

 private:
  Csv& raw(std::string_view text) {
    if (col_ > 0) out_.push_back(',');
    out_ += text;
    ++col_;
    return *this;
  }

  std::size_t columns_;
  std::size_t col_ = 0;
  std::string out_;
};

/// Streaming mean and spread, used for every cross-replica summary.
struct Acc {
  std::uint64_t n = 0;
  double mean = 0;
  double m2 = 0;

  void add(double x) {
    ++n;
    const double d = x - mean;
    mean += d / double(n);
    m2 += d * (x - mean);
  }
  double variance() const { return n > 1 ? m2 / double(n - 1) : 0.0; }
  double std_error() const { return n > 0 ? std::sqrt(variance() / double(n)) : 0.0; }
};

/// mean±stderr rendering for summary lines.
std::string pm(const Acc& acc) {
  return format_double(acc.mean) + "±" + format_double(acc.std_error());
}

std::uint64_t torus_sites(const ExperimentConfig& cfg) {
  std::uint64_t sites = 1;
  for (int i = 0; i < cfg.dim; ++i) sites *= std::uint64_t(cfg.side);
  return sites;
}

std::uint64_t fill_count(const ExperimentConfig& cfg, std::uint64_t sites) {
  if (cfg.k > 0) return cfg.k;
  return std::uint64_t(std::floor(cfg.density * double(sites)));
}

std::vector<Coord> box_ladder(const ExperimentConfig& cfg) {
  std::vector<Coord> sides = cfg.boxes;
  if (sides.empty())
    sides = {std::max<Coord>(1, cfg.side / 8), std::max<Coord>(1, cfg.side / 4),
             std::max<Coord>(1, cfg.side / 2)};
  std::sort(sides.begin(), sides.end());
  sides.erase(std::unique(sides.begin(), sides.end()), sides.end());
  return sides;
}

/// Runs body(0..replicas-1) on a pool of worker threads. Workers pull
/// indices from a shared counter; exceptions are parked per replica and the
/// lowest-index one is rethrown after the join, so failures are reported
/// identically at every thread count.
void parallel_for_replicas(std::uint64_t replicas, int threads,
                           const std::function<void(std::uint64_t)>& body) {
  const std::uint64_t workers =
      std::min<std::uint64_t>(std::uint64_t(std::max(threads, 1)), replicas);
  if (workers <= 1) {
    for (std::uint64_t r = 0; r < replicas; ++r) body(r);
    return;
  }
  std::atomic<std::uint64_t> next{0};
  std::vector<std::exception_ptr> errors(replicas);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::uint64_t w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      for (;;) {
        const std::uint64_t r = next.fetch_add(1);
        if (r >= replicas) return;
        try {
          body(r);
        } catch (...) {
          errors[r] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Shared state of one run: seeds, artifact bookkeeping, summary lines.
struct RunContext {
  const ExperimentConfig& cfg;
  std::vector<std::uint64_t> seeds;
  fs::path dir;
  std::vector<std::string> artifact_paths;
  std::vector<std::pair<std::string, std::string>> summary;
  std::uint64_t budget_exceeded = 0;

  SchedulerPolicy policy(std::uint64_t run_seed) const {
    if (cfg.scheduler == "lifo") return SchedulerPolicy::lifo();
    if (cfg.scheduler == "random")
      return SchedulerPolicy::random_queue(
          rng::derive_seed(run_seed, 0, rng::StreamTag::kScheduler));
    return SchedulerPolicy::fifo();
  }

  Budget budget() const { return cfg.budget == 0 ? Budget{} : Budget{cfg.budget}; }

  ChainParams params(std::uint64_t replica) const {
    return ChainParams{cfg.lambda, cfg.mode, seeds[replica], policy(seeds[replica]), budget()};
  }

  template <class R>
  std::vector<std::optional<R>> map_replicas(const std::function<R(std::uint64_t)>& fn) const {
    std::vector<std::optional<R>> slots(cfg.replicas);
    parallel_for_replicas(cfg.replicas, cfg.threads,
                          [&](std::uint64_t r) { slots[r].emplace(fn(r)); });
    return slots;
  }

  void write_text(const std::string& rel, const std::string& content) {
    const fs::path path = dir / rel;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    write_file_atomic(path, content);
    artifact_paths.push_back(rel);
  }

  void snapshot(const std::string& rel, const Configuration& config) {
    const fs::path path = dir / rel;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    write_pgm_file(config, path.string());
    artifact_paths.push_back(rel);
  }

  void note(std::string key, std::string value) {
    summary.emplace_back(std::move(key), std::move(value));
  }
};

void write_metrics_table(RunContext& ctx, const std::vector<std::optional<StabilizationOutcome>>& slots) {
  Csv csv{"replica", "seed",     "particles", "visited",    "zeta_hat",
          "inradius", "outradius", "sphericity", "stabilized"};
  Acc zeta;
  Acc inradius;
  double sphericity_min = std::numeric_limits<double>::infinity();
  for (std::uint64_t r = 0; r < ctx.cfg.replicas; ++r) {
    const StabilizationOutcome& o = *slots[r];
    const bool ok = o.stabilized();
    if (!ok) ++ctx.budget_exceeded;
    const AggregateMetrics m = aggregate_metrics(o);
    csv.u(r).u(ctx.seeds[r]).u(o.final.total_particles()).u(o.visited_count);
    csv.f(m.zeta_hat).f(m.inradius).f(m.outradius).f(m.sphericity).u(ok ? 1 : 0).end_row();
    if (ok) {
      zeta.add(m.zeta_hat);
      inradius.add(m.inradius);
      sphericity_min = std::min(sphericity_min, m.sphericity);
    }
  }
  ctx.write_text("metrics.csv", csv.str());
  if (slots[0]->stabilized() && slots[0]->final.total_particles() > 0) {
    const AnnulusProfile profile = annulus_profile(*slots[0], 10);
    Csv pcsv{"annulus", "density"};
    for (std::size_t i = 0; i < profile.density.size(); ++i)
      pcsv.u(i).f(profile.density[i]).end_row();
    ctx.write_text("profile.csv", pcsv.str());
  }
  ctx.snapshot("snapshots/final_0.pgm", slots[0]->final);
  ctx.note("zeta_hat", pm(zeta));
  ctx.note("inradius", format_double(inradius.mean));
  ctx.note("sphericity_min", format_double(zeta.n > 0 ? sphericity_min : 0.0));
  ctx.note("stabilized", std::to_string(zeta.n) + "/" + std::to_string(ctx.cfg.replicas));
}

void run_aggregate(RunContext& ctx) {
  auto slots = ctx.map_replicas<StabilizationOutcome>([&](std::uint64_t r) {
    return point_source(ctx.cfg.n, ctx.cfg.lambda, ctx.cfg.dim, ctx.seeds[r], ctx.cfg.mode,
                        ctx.policy(ctx.seeds[r]), ctx.budget());
  });
  write_metrics_table(ctx, slots);
}

void run_region(RunContext& ctx) {
  const Region region = Region::ball(ctx.cfg.dim, {}, ctx.cfg.radius);
  auto slots = ctx.map_replicas<StabilizationOutcome>([&](std::uint64_t r) {
    return region_source(region, ctx.cfg.eps, ctx.cfg.lambda, ctx.seeds[r], ctx.cfg.mode,
                         ctx.policy(ctx.seeds[r]), ctx.budget());
  });
  write_metrics_table(ctx, slots);
  ctx.note("source_sites", std::to_string(region_sites(region, ctx.cfg.eps).size()));
}

void run_sprinkle(RunContext& ctx) {
  auto slots = ctx.map_replicas<SprinkleOutcome>([&](std::uint64_t r) {
    return poisson_stabilize(ctx.cfg.side, ctx.cfg.dim, nullptr, ctx.cfg.density, ctx.cfg.lambda,
                             ctx.seeds[r], ctx.cfg.mode, ctx.policy(ctx.seeds[r]), ctx.budget());
  });
  Csv csv{"replica", "seed", "sprinkled", "resamples", "particles", "density", "stabilized"};
  Acc density;
  Acc sprinkled;
  std::uint64_t ok_count = 0;
  for (std::uint64_t r = 0; r < ctx.cfg.replicas; ++r) {
    const SprinkleOutcome& s = *slots[r];
    const bool ok = s.outcome.stabilized();
    if (!ok) ++ctx.budget_exceeded;
    const double rho = s.outcome.final.density();
    csv.u(r).u(ctx.seeds[r]).u(s.sprinkled).u(s.resamples);
    csv.u(s.outcome.final.total_particles()).f(rho).u(ok ? 1 : 0).end_row();
    if (ok) {
      density.add(rho);
      sprinkled.add(double(s.sprinkled));
      ++ok_count;
    }
  }
  ctx.write_text("sprinkle.csv", csv.str());
  ctx.snapshot("snapshots/final_0.pgm", slots[0]->outcome.final);
  ctx.note("density", pm(density));
  ctx.note("sprinkled_mean", format_double(sprinkled.mean));
  ctx.note("stabilized", std::to_string(ok_count) + "/" + std::to_string(ctx.cfg.replicas));
}

void run_wired_sample(RunContext& ctx) {
  struct Rep {
    std::optional<Configuration> sample;
  };
  auto slots = ctx.map_replicas<Rep>([&](std::uint64_t r) -> Rep {
    // The exact sampler documents std::runtime_error as budget exhaustion.
    try {
      return Rep{wired_exact_sample(Topology::wired_box(ctx.cfg.dim, ctx.cfg.side), ctx.params(r))};
    } catch (const std::runtime_error&) {
      return Rep{};
    }
  });
  Csv csv{"replica", "seed", "particles", "sleepers", "density"};
  Acc density;
  const Configuration* first = nullptr;
  for (std::uint64_t r = 0; r < ctx.cfg.replicas; ++r) {
    if (!slots[r]->sample.has_value()) {
      ++ctx.budget_exceeded;
      continue;
    }
    const Configuration& c = *slots[r]->sample;
    if (first == nullptr) first = &c;
    csv.u(r).u(ctx.seeds[r]).u(c.total_particles()).u(c.sleeper_count()).f(c.density()).end_row();
    density.add(c.density());
  }
  ctx.write_text("samples.csv", csv.str());
  if (first != nullptr) ctx.snapshot("snapshots/final_0.pgm", *first);
  ctx.note("density", pm(density));
  ctx.note("samples", std::to_string(density.n));
}

void run_hockey(RunContext& ctx) {
  const std::uint64_t sites = torus_sites(ctx.cfg);
  const auto t_steps = std::uint64_t(std::llround(ctx.cfg.tmax * double(sites)));
  const auto record =
      std::max<std::uint64_t>(1, std::uint64_t(std::llround(ctx.cfg.tstep * double(sites))));
  auto slots = ctx.map_replicas<DriveCurve>([&](std::uint64_t r) {
    return wired_drive_uniform(ctx.cfg.side, ctx.cfg.dim, t_steps, ctx.params(r), record);
  });
  std::size_t common = slots[0]->points.size();
  std::size_t longest = common;
  for (const auto& slot : slots) {
    common = std::min(common, slot->points.size());
    longest = std::max(longest, slot->points.size());
  }
  for (const auto& slot : slots)
    if (slot->points.size() < longest) ++ctx.budget_exceeded;
  std::vector<DensityPoint> averaged(common);
  for (std::size_t i = 0; i < common; ++i) {
    averaged[i] = slots[0]->points[i];
    Acc global;
    Acc bulk;
    for (const auto& slot : slots) {
      global.add(slot->points[i].global_density);
      bulk.add(slot->points[i].bulk_density);
    }
    averaged[i].global_density = global.mean;
    averaged[i].bulk_density = bulk.mean;
  }
  Csv csv{"t", "global_density", "bulk_density"};
  for (const auto& p : averaged) csv.f(p.t).f(p.global_density).f(p.bulk_density).end_row();
  ctx.write_text("hockey.csv", csv.str());
  ctx.snapshot("snapshots/final_0.pgm", slots[0]->state.config);
  if (!averaged.empty()) {
    ctx.note("final_density", format_double(averaged.back().global_density));
    ctx.note("final_bulk", format_double(averaged.back().bulk_density));
  }
  if (ctx.cfg.zeta_ref > 0 && !averaged.empty()) {
    const SaturationFit fit = saturation_distance(averaged, ctx.cfg.zeta_ref);
    ctx.note("hockey_distance", format_double(fit.distance));
    if (fit.plateau.has_value()) ctx.note("plateau", format_double(*fit.plateau));
  }
}

ThresholdDetector detector_from(const ExperimentConfig& cfg) {
  if (cfg.f_form == "n32") return ThresholdDetector::n_pow_three_halves();
  if (cfg.f_form == "cnlogn") return ThresholdDetector::scaled_n_log_n(cfg.f_scale);
  return ThresholdDetector::n_log_squared_n();
}

void run_free(RunContext& ctx) {
  const std::uint64_t sites = torus_sites(ctx.cfg);
  auto slots = ctx.map_replicas<FreeRunTrace>([&](std::uint64_t r) {
    return free_run(ctx.cfg.side, ctx.cfg.dim, ctx.cfg.steps, ctx.params(r), detector_from(ctx.cfg));
  });
  Csv csv{"replica", "seed", "tau", "threshold", "particles", "halted"};
  Acc tau;
  for (std::uint64_t r = 0; r < ctx.cfg.replicas; ++r) {
    const FreeRunTrace& trace = *slots[r];
    if (trace.halted_on_budget) ++ctx.budget_exceeded;
    csv.u(r).u(ctx.seeds[r]);
    if (trace.tau().has_value()) {
      csv.u(*trace.tau());
      tau.add(double(*trace.tau()));
    } else {
      csv.blank();
    }
    csv.f(trace.threshold).u(trace.state.config.total_particles());
    csv.u(trace.halted_on_budget ? 1 : 0).end_row();
  }
  ctx.write_text("free.csv", csv.str());
  Csv trace_csv{"step", "particles", "exits", "moves", "density"};
  for (const StepTotals& row : slots[0]->state.cumulative) {
    trace_csv.u(row.step).u(row.particles).u(row.exits).u(row.moves);
    trace_csv.f(double(row.particles) / double(sites)).end_row();
  }
  ctx.write_text("trace.csv", trace_csv.str());
  ctx.snapshot("snapshots/final_0.pgm", slots[0]->state.config);
  ctx.note("triggered_fraction", format_double(double(tau.n) / double(ctx.cfg.replicas)));
  if (tau.n > 0) ctx.note("tau_mean", format_double(tau.mean));
  ctx.note("threshold", format_double(slots[0]->threshold));
}

void run_wake(RunContext& ctx) {
  const std::uint64_t sites = torus_sites(ctx.cfg);
  const std::uint64_t fill = fill_count(ctx.cfg, sites);
  struct Rep {
    std::optional<Configuration> final;
    std::uint64_t moves = 0;
    bool budget = false;
  };
  auto slots = ctx.map_replicas<Rep>([&](std::uint64_t r) -> Rep {
    const ChainParams params = ctx.params(r);
    Rep rep;
    // wake_init documents std::runtime_error as budget exhaustion.
    std::optional<ChainState> state;
    try {
      state.emplace(wake_init(ctx.cfg.side, ctx.cfg.dim, fill, params));
    } catch (const std::runtime_error&) {
      rep.budget = true;
      return rep;
    }
    // steps counts stabilization passes including the one inside wake_init,
    // so steps=1 measures the freshly dropped state and steps=k matches the
    // k-th term of the waking sequence.
    Stabilizer engine(Topology::torus(ctx.cfg.dim, ctx.cfg.side));
    for (std::uint64_t s = 1; s < ctx.cfg.steps; ++s) {
      const StepResult res = wake_step(*state, params, engine);
      rep.moves += res.stats.moves;
      if (!res.committed) {
        rep.budget = true;
        return rep;
      }
    }
    rep.final = std::move(state->config);
    return rep;
  });
  Coords center{};
  for (int i = 0; i < ctx.cfg.dim; ++i) center[i] = ctx.cfg.side / 2;
  CovarianceAccumulator acc(Site{center}, ctx.cfg.rmax);
  Acc moves;
  const Configuration* first = nullptr;
  for (std::uint64_t r = 0; r < ctx.cfg.replicas; ++r) {
    if (slots[r]->budget) ++ctx.budget_exceeded;
    if (!slots[r]->final.has_value()) continue;
    if (first == nullptr) first = &*slots[r]->final;
    acc.add(*slots[r]->final);
    moves.add(double(slots[r]->moves));
  }
  if (moves.n == 0) throw std::runtime_error("every replica exceeded its budget");
  const CovarianceMap map = acc.finish();
  Csv csv{"dx", "dy", "cov", "std_error", "samples"};
  for (int dy = -map.r_max; dy <= map.r_max; ++dy)
    for (int dx = -map.r_max; dx <= map.r_max; ++dx)
      csv.i(dx).i(dy).f(map.at(dx, dy)).f(map.error_at(dx, dy)).u(map.samples).end_row();
  ctx.write_text("covariance.csv", csv.str());
  if (first != nullptr) ctx.snapshot("snapshots/final_0.pgm", *first);
  ctx.note("fill", std::to_string(fill));
  if (map.r_max >= 1) {
    ctx.note("cov_1_0", format_double(map.at(1, 0)));
    ctx.note("stderr_1_0", format_double(map.error_at(1, 0)));
  }
  ctx.note("samples", std::to_string(map.samples));
  ctx.note("moves_mean", format_double(moves.mean));
}

void run_correlations(RunContext& ctx) {
  const bool wired = ctx.cfg.chain == "wired";
  const std::uint64_t fill = fill_count(ctx.cfg, torus_sites(ctx.cfg));
  struct Rep {
    std::optional<Configuration> sample;
  };
  auto slots = ctx.map_replicas<Rep>([&](std::uint64_t r) -> Rep {
    if (wired) {
      try {
        return Rep{wired_exact_sample(Topology::wired_box(ctx.cfg.dim, ctx.cfg.side), ctx.params(r))};
      } catch (const std::runtime_error&) {
        return Rep{};
      }
    }
    StabilizationOutcome out = free_batch_sample(ctx.cfg.side, ctx.cfg.dim, fill, ctx.params(r));
    if (!out.stabilized()) return Rep{};
    return Rep{std::move(out.final)};
  });
  CorrelationAccumulator acc(wired ? SymmetryGroup::kD8 : SymmetryGroup::kTorusTranslations,
                             ctx.cfg.rmax);
  std::uint64_t added = 0;
  for (std::uint64_t r = 0; r < ctx.cfg.replicas; ++r) {
    if (!slots[r]->sample.has_value()) {
      ++ctx.budget_exceeded;
      continue;
    }
    acc.add(*slots[r]->sample);
    ++added;
  }
  if (added == 0) throw std::runtime_error("every replica exceeded its budget");
  const CorrelationTable table = acc.finish();
  Csv csv{"x", "y", "corr", "stderr", "samples"};
  for (const CorrelationEntry& e : table.entries)
    csv.i(e.dx).i(e.dy).f(e.corr).f(e.std_error).u(table.samples).end_row();
  ctx.write_text("correlations.csv", csv.str());
  ctx.note("zeta_hat", format_double(table.zeta_hat));
  if (ctx.cfg.rmax >= 1) {
    const CorrelationEntry& e = table.at(1, 0);
    ctx.note("corr_1_0", format_double(e.corr) + "±" + format_double(e.std_error));
  }
  ctx.note("samples", std::to_string(table.samples));
}

void run_hyperuniformity(RunContext& ctx) {
  const std::uint64_t sites = torus_sites(ctx.cfg);
  const std::uint64_t fill = fill_count(ctx.cfg, sites);
  const std::vector<Coord> sides = box_ladder(ctx.cfg);
  struct Rep {
    std::vector<std::uint64_t> counts;  // empty on budget exhaustion
  };
  auto slots = ctx.map_replicas<Rep>([&](std::uint64_t r) -> Rep {
    const StabilizationOutcome out = free_batch_sample(ctx.cfg.side, ctx.cfg.dim, fill, ctx.params(r));
    if (!out.stabilized()) return Rep{};
    Rep rep;
    rep.counts.reserve(sides.size());
    for (const Coord s : sides) {
      Coords lo{};
      Coords shape{};
      for (int i = 0; i < ctx.cfg.dim; ++i) shape[i] = s;
      rep.counts.push_back(box_count(out.final, lo, shape));
    }
    return rep;
  });
  std::vector<std::vector<double>> counts(sides.size());
  for (std::uint64_t r = 0; r < ctx.cfg.replicas; ++r) {
    if (slots[r]->counts.empty()) {
      ++ctx.budget_exceeded;
      continue;
    }
    for (std::size_t b = 0; b < sides.size(); ++b) counts[b].push_back(double(slots[r]->counts[b]));
  }
  std::vector<double> volumes;
  volumes.reserve(sides.size());
  for (const Coord s : sides) volumes.push_back(std::pow(double(s), ctx.cfg.dim));
  const std::optional<double> ref =
      ctx.cfg.zeta_ref > 0 ? std::optional<double>(ctx.cfg.zeta_ref) : std::nullopt;
  const VarianceCurve curve = variance_curve(counts, volumes, ctx.cfg.dim, ref);
  Csv csv{"vol", "variance", "replicas"};
  for (std::size_t b = 0; b < curve.volume.size(); ++b)
    csv.f(curve.volume[b]).f(curve.variance[b]).u(curve.replicas).end_row();
  ctx.write_text("variance.csv", csv.str());
  ctx.note("density", format_double(double(fill) / double(sites)));
  if (curve.fitted_alpha.has_value()) {
    ctx.note("alpha", format_double(curve.fitted_alpha->alpha) + "±" +
                          format_double(curve.fitted_alpha->std_error));
  }
  for (std::size_t b = 0; b < curve.tail.size(); ++b)
    ctx.note("tail_" + std::to_string(sides[b]), format_double(curve.tail[b]));
  ctx.note("samples", std::to_string(curve.replicas));
}

void run_quadrature(RunContext& ctx) {
  const Region region = Region::ball(ctx.cfg.dim, {}, ctx.cfg.radius);
  auto slots = ctx.map_replicas<StabilizationOutcome>([&](std::uint64_t r) {
    return region_source(region, ctx.cfg.eps, ctx.cfg.lambda, ctx.seeds[r], ctx.cfg.mode,
                         ctx.policy(ctx.seeds[r]), ctx.budget());
  });
  const StabilizationOutcome* reference = nullptr;
  for (const auto& slot : slots) {
    if (slot->stabilized()) {
      reference = &*slot;
      break;
    }
  }
  if (reference == nullptr) throw std::runtime_error("every replica exceeded its budget");

  // Test centers are drawn once from the first stabilized support, then the
  // same function family is evaluated on every replicate outcome.
  const std::vector<Site> support = sleeper_support(reference->final);
  if (support.empty()) throw std::runtime_error("reference outcome has no sleeper support");
  rng::Xoshiro256 probe_rng(rng::derive_seed(ctx.cfg.seed, 0, rng::StreamTag::kProbe));
  std::vector<QuadratureFunction> functions;
  functions.push_back(QuadratureFunction::constant(1.0));
  for (int p = 0; p < ctx.cfg.probes; ++p) {
    const Site& site = support[probe_rng.next() % support.size()];
    std::array<double, kMaxDim> center{};
    for (int i = 0; i < ctx.cfg.dim; ++i) center[i] = ctx.cfg.eps * double(site.c[i]);
    functions.push_back(QuadratureFunction::neg_square(center));
  }

  std::vector<Acc> margin(functions.size());
  std::vector<Acc> lhs(functions.size());
  std::vector<Acc> rhs(functions.size());
  for (std::uint64_t r = 0; r < ctx.cfg.replicas; ++r) {
    if (!slots[r]->stabilized()) {
      ++ctx.budget_exceeded;
      continue;
    }
    const std::vector<QuadratureReport> reports =
        quadrature_check(region, ctx.cfg.eps, *slots[r], ctx.cfg.zeta_ref, functions);
    for (std::size_t i = 0; i < reports.size(); ++i) {
      margin[i].add(reports[i].margin);
      lhs[i].add(reports[i].lhs);
      rhs[i].add(reports[i].rhs);
    }
  }
  Csv csv{"function_id", "lhs", "rhs", "margin", "stderr"};
  double min_margin = std::numeric_limits<double>::infinity();
  std::uint64_t ok = 0;
  for (std::size_t i = 0; i < functions.size(); ++i) {
    const std::string id = i == 0 ? std::string("const") : "negsq_" + std::to_string(i - 1);
    csv.s(id).f(lhs[i].mean).f(rhs[i].mean).f(margin[i].mean).f(margin[i].std_error()).end_row();
    if (i > 0) {
      min_margin = std::min(min_margin, margin[i].mean);
      if (margin[i].mean >= -3.0 * margin[i].std_error()) ++ok;
    }
  }
  ctx.write_text("quadrature.csv", csv.str());
  ctx.snapshot("snapshots/final_0.pgm", reference->final);
  ctx.note("const_margin", format_double(margin[0].mean));
  if (ctx.cfg.probes > 0) {
    ctx.note("fraction_ok", format_double(double(ok) / double(ctx.cfg.probes)));
    ctx.note("min_margin", format_double(min_margin));
  }
  ctx.note("samples", std::to_string(margin[0].n));
}

void run_coupling(RunContext& ctx) {
  struct Rep {
    CouplingResult result;
    bool budget_init = false;
  };
  auto slots = ctx.map_replicas<Rep>([&](std::uint64_t r) -> Rep {
    const ChainParams params = ctx.params(r);
    const Topology topo = Topology::wired_box(ctx.cfg.dim, ctx.cfg.side);
    std::optional<ChainState> a;
    // The exact sampler documents std::runtime_error as budget exhaustion.
    try {
      a.emplace(wired_exact_state(topo, params));
    } catch (const std::runtime_error&) {
      return Rep{CouplingResult{{}, 0, true}, true};
    }
    Configuration perturbed = a->config;
    const auto& geo = perturbed.geometry();
    std::vector<std::uint64_t> empty_cells;
    for (std::uint64_t j = 0; j < std::uint64_t(geo.cells); ++j)
      if (perturbed.cells().v[j] == 0) empty_cells.push_back(j);
    if (empty_cells.empty()) return Rep{CouplingResult{0, 0, false}, false};
    rng::Xoshiro256 pick(rng::derive_seed(ctx.cfg.seed, r, rng::StreamTag::kInit));
    const std::uint64_t cell = empty_cells[pick.next() % empty_cells.size()];
    perturbed.set_state(Site{geo.coords_of(std::int64_t(cell))}, SiteState::sleeper());
    ChainState b{std::move(perturbed)};
    b.epoch_counter = a->epoch_counter;
    return Rep{coupling_run(std::move(*a), std::move(b), params, ctx.cfg.steps), false};
  });
  Csv csv{"replica", "seed", "coupled", "coupled_at", "steps_run", "halted"};
  Acc tau;
  std::uint64_t coupled = 0;
  for (std::uint64_t r = 0; r < ctx.cfg.replicas; ++r) {
    const Rep& rep = *slots[r];
    if (rep.result.halted_on_budget) ++ctx.budget_exceeded;
    csv.u(r).u(ctx.seeds[r]).u(rep.result.coupled_at.has_value() ? 1 : 0);
    if (rep.result.coupled_at.has_value()) {
      csv.u(*rep.result.coupled_at);
      tau.add(double(*rep.result.coupled_at));
      ++coupled;
    } else {
      csv.blank();
    }
    csv.u(rep.result.steps_run).u(rep.result.halted_on_budget ? 1 : 0).end_row();
  }
  ctx.write_text("coupling.csv", csv.str());
  ctx.note("coupled_fraction", format_double(double(coupled) / double(ctx.cfg.replicas)));
  if (coupled > 0) ctx.note("tau_mean", format_double(tau.mean));
}

json manifest_to_json(const RunManifest& manifest) {
  json j;
  j["artifact_version"] = manifest.artifact_version;
  j["budget_exceeded"] = manifest.budget_exceeded;
  j["config"] = json::parse(config_to_json(manifest.config));
  json files = json::array();
  for (const ArtifactEntry& entry : manifest.files) {
    json f;
    f["path"] = entry.path;
    f["bytes"] = entry.bytes;
    f["sha256"] = entry.sha256;
    files.push_back(std::move(f));
  }
  j["files"] = std::move(files);
  j["replica_seeds"] = manifest.replica_seeds;
  json summary = json::array();
  for (const auto& [key, value] : manifest.summary) summary.push_back(key + "=" + value);
  j["summary"] = std::move(summary);
  j["wall_seconds"] = manifest.wall_seconds;
  return j;
}

}  // namespace

const char* to_string(ExperimentKind kind) {
  for (const auto& [k, name] : kExperimentNames)
    if (k == kind) return name;
  throw std::logic_error("unknown experiment kind");
}

ExperimentKind experiment_from_string(const std::string& name) {
  for (const auto& [kind, n] : kExperimentNames)
    if (name == n) return kind;
  fail_config("unknown experiment \"" + name + "\"");
}

std::string format_double(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  std::array<char, 32> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), value);
  return std::string(buf.data(), res.ptr);
}

ExperimentConfig config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    fail_config(std::string("config parse error: ") + e.what());
  }
  if (!j.is_object()) fail_config("config must be a JSON object");
  ExperimentConfig cfg;
  for (const auto& [key, value] : j.items()) {
    if (key == "experiment") {
      cfg.experiment = experiment_from_string(as_string(value, key));
    } else if (key == "dim") {
      cfg.dim = as_int(value, key);
    } else if (key == "L") {
      cfg.side = Coord(as_int(value, key));
    } else if (key == "lambda") {
      cfg.lambda = as_double(value, key);
    } else if (key == "mode") {
      cfg.mode = mode_from_string(as_string(value, key));
    } else if (key == "scheduler") {
      cfg.scheduler = as_string(value, key);
    } else if (key == "seed") {
      cfg.seed = as_uint(value, key);
    } else if (key == "replicas") {
      cfg.replicas = as_uint(value, key);
    } else if (key == "budget") {
      cfg.budget = as_uint(value, key);
    } else if (key == "threads") {
      cfg.threads = as_int(value, key);
    } else if (key == "out") {
      cfg.output_dir = as_string(value, key);
    } else if (key == "n") {
      cfg.n = as_uint(value, key);
    } else if (key == "tmax") {
      cfg.tmax = as_double(value, key);
    } else if (key == "tstep") {
      cfg.tstep = as_double(value, key);
    } else if (key == "density") {
      cfg.density = as_double(value, key);
    } else if (key == "k") {
      cfg.k = as_uint(value, key);
    } else if (key == "steps") {
      cfg.steps = as_uint(value, key);
    } else if (key == "rmax") {
      cfg.rmax = as_int(value, key);
    } else if (key == "boxes") {
      if (!value.is_array()) fail_config("config key \"boxes\" must be an array of integers");
      cfg.boxes.clear();
      for (const auto& item : value) cfg.boxes.push_back(Coord(as_int(item, key)));
    } else if (key == "radius") {
      cfg.radius = as_double(value, key);
    } else if (key == "eps") {
      cfg.eps = as_double(value, key);
    } else if (key == "zeta_ref") {
      cfg.zeta_ref = as_double(value, key);
    } else if (key == "chain") {
      cfg.chain = as_string(value, key);
    } else if (key == "f_form") {
      cfg.f_form = as_string(value, key);
    } else if (key == "f_scale") {
      cfg.f_scale = as_double(value, key);
    } else if (key == "probes") {
      cfg.probes = as_int(value, key);
    } else {
      fail_config("unknown config key \"" + key + "\"");
    }
  }
  return cfg;
}

ExperimentConfig config_from_json_file(const std::string& path) {
  if (!fs::exists(path)) fail_config("config file not found: " + path);
  return config_from_json_text(read_file(path));
}

std::string config_to_json(const ExperimentConfig& cfg) {
  json j;
  j["experiment"] = to_string(cfg.experiment);
  j["dim"] = cfg.dim;
  j["L"] = cfg.side;
  if (std::isinf(cfg.lambda)) {
    j["lambda"] = "inf";
  } else {
    j["lambda"] = cfg.lambda;
  }
  j["mode"] = mode_name(cfg.mode);
  j["scheduler"] = cfg.scheduler;
  j["seed"] = cfg.seed;
  j["replicas"] = cfg.replicas;
  j["budget"] = cfg.budget;
  j["threads"] = cfg.threads;
  j["out"] = cfg.output_dir;
  j["n"] = cfg.n;
  j["tmax"] = cfg.tmax;
  j["tstep"] = cfg.tstep;
  j["density"] = cfg.density;
  j["k"] = cfg.k;
  j["steps"] = cfg.steps;
  j["rmax"] = cfg.rmax;
  j["boxes"] = cfg.boxes;
  j["radius"] = cfg.radius;
  j["eps"] = cfg.eps;
  j["zeta_ref"] = cfg.zeta_ref;
  j["chain"] = cfg.chain;
  j["f_form"] = cfg.f_form;
  j["f_scale"] = cfg.f_scale;
  j["probes"] = cfg.probes;
  return j.dump(2);
}

void validate(const ExperimentConfig& cfg) {
  if (cfg.dim < 1 || cfg.dim > kMaxDim) fail_config("dim must be between 1 and 4");
  if (cfg.side < 1 || cfg.side > kCoordLimit) fail_config("L must be between 1 and 32767");
  if (std::isnan(cfg.lambda) || cfg.lambda <= 0) fail_config("lambda must be positive");
  if (std::isinf(cfg.lambda) && cfg.mode == SourceMode::kLiteral)
    fail_config("lambda = inf needs collapsed mode");
  if (cfg.scheduler != "fifo" && cfg.scheduler != "lifo" && cfg.scheduler != "random")
    fail_config("scheduler must be fifo, lifo, or random");
  if (cfg.replicas < 1) fail_config("replicas must be at least 1");
  if (cfg.threads < 1 || cfg.threads > 256) fail_config("threads must be between 1 and 256");
  if (cfg.output_dir.empty()) fail_config("out must not be empty");
  if (cfg.n < 1) fail_config("n must be at least 1");
  if (!std::isfinite(cfg.tmax) || cfg.tmax <= 0) fail_config("tmax must be positive");
  if (!std::isfinite(cfg.tstep) || cfg.tstep <= 0 || cfg.tstep > cfg.tmax)
    fail_config("tstep must be in (0, tmax]");
  if (!(cfg.density > 0) || !(cfg.density < 1)) fail_config("density must be inside (0, 1)");
  if (cfg.rmax < 0) fail_config("rmax must be non-negative");
  for (const Coord s : cfg.boxes)
    if (s < 1 || s > cfg.side) fail_config("boxes entries must be between 1 and L");
  if (!std::isfinite(cfg.radius) || cfg.radius <= 0) fail_config("radius must be positive");
  if (!std::isfinite(cfg.eps) || cfg.eps <= 0) fail_config("eps must be positive");
  if (std::isnan(cfg.zeta_ref) || cfg.zeta_ref < 0 || cfg.zeta_ref > 1)
    fail_config("zeta_ref must be between 0 and 1");
  if (cfg.chain != "free" && cfg.chain != "wired") fail_config("chain must be free or wired");
  if (cfg.f_form != "nlog2n" && cfg.f_form != "n32" && cfg.f_form != "cnlogn")
    fail_config("f_form must be nlog2n, n32, or cnlogn");
  if (!std::isfinite(cfg.f_scale) || cfg.f_scale <= 0) fail_config("f_scale must be positive");
  if (cfg.probes < 1) fail_config("probes must be at least 1");
  if (cfg.steps < 1) fail_config("steps must be at least 1");

  const bool on_torus = cfg.experiment == ExperimentKind::kSprinkle ||
                        cfg.experiment == ExperimentKind::kHockey ||
                        cfg.experiment == ExperimentKind::kFree ||
                        cfg.experiment == ExperimentKind::kWake ||
                        cfg.experiment == ExperimentKind::kHyperuniformity ||
                        (cfg.experiment == ExperimentKind::kCorrelations && cfg.chain == "free");
  if (on_torus && cfg.side < 3) fail_config("torus experiments need L of at least 3");
  const std::uint64_t sites = torus_sites(cfg);
  const std::uint64_t fill = fill_count(cfg, sites);

  switch (cfg.experiment) {
    case ExperimentKind::kAggregate:
      break;
    case ExperimentKind::kRegion:
    case ExperimentKind::kQuadrature:
      if (cfg.radius / cfg.eps >= double(kCoordLimit))
        fail_config("radius / eps exceeds the coordinate range");
      if (cfg.experiment == ExperimentKind::kQuadrature && cfg.zeta_ref <= 0)
        fail_config("quadrature needs a positive zeta_ref");
      break;
    case ExperimentKind::kSprinkle:
    case ExperimentKind::kWiredSample:
    case ExperimentKind::kHockey:
      break;
    case ExperimentKind::kFree:
      if (cfg.steps > sites) fail_config("steps must not exceed the torus site count");
      break;
    case ExperimentKind::kWake:
      if (cfg.dim != 2) fail_config("wake covariance needs dim = 2");
      if (2 * cfg.rmax + 1 > cfg.side) fail_config("rmax too large for this L");
      if (fill < 1 || fill > sites) fail_config("fill count must be between 1 and the site count");
      break;
    case ExperimentKind::kCorrelations: {
      if (cfg.dim != 2) fail_config("correlations need dim = 2");
      const Coord window = cfg.chain == "wired" ? cfg.side / 2 : cfg.side;
      if (cfg.rmax >= window) fail_config("rmax must be smaller than the correlation window");
      if (cfg.chain == "free" && (fill < 1 || fill > sites))
        fail_config("fill count must be between 1 and the site count");
      break;
    }
    case ExperimentKind::kHyperuniformity:
      if (cfg.replicas < 2) fail_config("hyperuniformity needs at least 2 replicas");
      if (fill < 1 || fill > sites) fail_config("fill count must be between 1 and the site count");
      break;
    case ExperimentKind::kCoupling:
      if (cfg.mode != SourceMode::kLiteral) fail_config("coupling needs literal mode");
      break;
  }
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw fs::filesystem_error("cannot open file for hashing", path,
                               std::make_error_code(std::errc::no_such_file_or_directory));
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr) throw std::runtime_error("digest context allocation failed");
  if (EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("digest init failed");
  }
  std::array<char, 65536> buf{};
  while (in) {
    in.read(buf.data(), std::streamsize(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), std::size_t(in.gcount()));
  }
  if (in.bad()) {
    EVP_MD_CTX_free(ctx);
    throw fs::filesystem_error("read failed while hashing", path,
                               std::make_error_code(std::errc::io_error));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest.data(), &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

void write_manifest(const RunManifest& manifest, const fs::path& dir) {
  fs::create_directories(dir);
  write_file_atomic(dir / "manifest.json", manifest_to_json(manifest).dump(2) + "\n");
}

RunManifest read_manifest(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    fail_config(std::string("manifest parse error: ") + e.what());
  }
  RunManifest m;
  m.artifact_version = j.at("artifact_version").get<std::string>();
  m.budget_exceeded = j.at("budget_exceeded").get<std::uint64_t>();
  m.config = config_from_json_text(j.at("config").dump());
  for (const auto& f : j.at("files")) {
    m.files.push_back(ArtifactEntry{f.at("path").get<std::string>(),
                                    f.at("bytes").get<std::uint64_t>(),
                                    f.at("sha256").get<std::string>()});
  }
  m.replica_seeds = j.at("replica_seeds").get<std::vector<std::uint64_t>>();
  for (const auto& line : j.at("summary")) {
    const std::string text = line.get<std::string>();
    const std::size_t eq = text.find('=');
    if (eq == std::string::npos) fail_config("manifest summary line lacks '='");
    m.summary.emplace_back(text.substr(0, eq), text.substr(eq + 1));
  }
  m.wall_seconds = j.at("wall_seconds").get<double>();
  return m;
}

RunManifest run_experiment(const ExperimentConfig& cfg) {
  validate(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  RunContext ctx{cfg, {}, fs::path(cfg.output_dir), {}, {}, 0};
  ctx.seeds.reserve(cfg.replicas);
  for (std::uint64_t r = 0; r < cfg.replicas; ++r)
    ctx.seeds.push_back(rng::derive_seed(cfg.seed, r, rng::StreamTag::kReplica));
  fs::create_directories(ctx.dir);

  switch (cfg.experiment) {
    case ExperimentKind::kAggregate:
      run_aggregate(ctx);
      break;
    case ExperimentKind::kRegion:
      run_region(ctx);
      break;
    case ExperimentKind::kSprinkle:
      run_sprinkle(ctx);
      break;
    case ExperimentKind::kWiredSample:
      run_wired_sample(ctx);
      break;
    case ExperimentKind::kHockey:
      run_hockey(ctx);
      break;
    case ExperimentKind::kFree:
      run_free(ctx);
      break;
    case ExperimentKind::kWake:
      run_wake(ctx);
      break;
    case ExperimentKind::kCorrelations:
      run_correlations(ctx);
      break;
    case ExperimentKind::kHyperuniformity:
      run_hyperuniformity(ctx);
      break;
    case ExperimentKind::kQuadrature:
      run_quadrature(ctx);
      break;
    case ExperimentKind::kCoupling:
      run_coupling(ctx);
      break;
  }

  RunManifest manifest;
  manifest.artifact_version = kArtifactVersion;
  manifest.config = cfg;
  manifest.replica_seeds = ctx.seeds;
  manifest.budget_exceeded = ctx.budget_exceeded;
  manifest.summary = std::move(ctx.summary);
  std::sort(ctx.artifact_paths.begin(), ctx.artifact_paths.end());
  for (const std::string& rel : ctx.artifact_paths) {
    const fs::path path = ctx.dir / rel;
    manifest.files.push_back(ArtifactEntry{rel, fs::file_size(path), sha256_file(path)});
  }
  manifest.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_manifest(manifest, ctx.dir);
  return manifest;
}

}  // namespace arw
