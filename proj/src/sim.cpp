#include "fsmfg/sim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "fsmfg/rng.hpp"

namespace fsmfg {

namespace {
constexpr std::uint64_t kNoisePurpose = 0x6e6f697365ULL;
constexpr std::uint64_t kInitialPurpose = 0x696e6974ULL;
}  // namespace

NoiseStream NoiseStream::generate(std::uint64_t seed, std::uint64_t path, std::uint64_t player, int d, double M,
                                  double T) {
  if (d < 1 || !(M > 0.0) || !(T >= 0.0)) throw Error("sim", "NoiseStream", "invalid noise parameters");
  CounterRng rng{seed, path, player, kNoisePurpose};
  NoiseStream ns;
  const double rate = d * M;
  double t = rng.exponential(rate);
  while (t < T) {
    const int y = rng.below(d);
    ns.events.push_back({t, y, rng.uniform(0.0, M)});
    t += rng.exponential(rate);
  }
  return ns;
}

std::vector<PlayerEvent> merged_noise(std::uint64_t seed, std::uint64_t path, int N, int d, double M, double T) {
  std::vector<PlayerEvent> all;
  for (int j = 0; j < N; ++j) {
    const auto ns = NoiseStream::generate(seed, path, static_cast<std::uint64_t>(j), d, M, T);
    for (const auto& e : ns.events) all.push_back({e.time, j, e.coord, e.level});
  }
  std::sort(all.begin(), all.end(), [](const PlayerEvent& a, const PlayerEvent& b) {
    return a.time < b.time || (a.time == b.time && a.player < b.player);
  });
  return all;
}

int draw_initial_state(std::uint64_t seed, std::uint64_t path, std::uint64_t player, const SimplexPoint& m0) {
  CounterRng rng{seed, path, player, kInitialPurpose};
  const double u = rng.uniform();
  double c = 0.0;
  for (int x = 0; x < m0.dim(); ++x) {
    c += m0[static_cast<std::size_t>(x)];
    if (u < c) return x;
  }
  // Rounding left u above the cumulative sum; take the last charged state.
  for (int x = m0.dim() - 1; x >= 0; --x) {
    if (m0[static_cast<std::size_t>(x)] > 0.0) return x;
  }
  return m0.dim() - 1;
}

std::vector<int> deterministic_initial_states(int N, const SimplexPoint& m0) {
  if (N < 1) throw Error("sim", "deterministic_initial_states", "need N >= 1");
  const auto d = static_cast<std::size_t>(m0.dim());
  std::vector<int> counts(d);
  std::vector<std::pair<double, std::size_t>> rem(d);
  int used = 0;
  for (std::size_t x = 0; x < d; ++x) {
    const double target = N * m0[x];
    counts[x] = static_cast<int>(std::floor(target));
    used += counts[x];
    rem[x] = {target - counts[x], x};
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (int k = 0; used < N; ++k, ++used) ++counts[rem[static_cast<std::size_t>(k) % d].second];
  std::vector<int> states;
  states.reserve(static_cast<std::size_t>(N));
  for (std::size_t x = 0; x < d; ++x) states.insert(states.end(), static_cast<std::size_t>(counts[x]), static_cast<int>(x));
  return states;
}

int Path::state_at(double t) const {
  int s = z0;
  for (const auto& j : jumps) {
    if (j.time > t) break;
    s = j.state;
  }
  return s;
}

Path simulate_system(const Feedback& feedback, const NoiseStream& noise, int z0, double T, double kappa, double M) {
  Path path{z0, {}};
  int x = z0;
  std::vector<double> rates;
  for (const auto& e : noise.events) {
    if (e.time > T) break;
    if (e.coord == x) continue;
    // The feedback may not know d; size the buffer from the largest coordinate seen.
    if (rates.size() <= static_cast<std::size_t>(std::max(e.coord, x))) rates.resize(static_cast<std::size_t>(std::max(e.coord, x)) + 1);
    std::fill(rates.begin(), rates.end(), 0.0);
    feedback(e.time, x, rates);
    const double r = rates[static_cast<std::size_t>(e.coord)];
    if (!(r >= kappa - 1e-12 && r <= M + 1e-12)) {
      std::ostringstream os;
      os << "t=" << e.time << " x=" << x << " y=" << e.coord << " rate=" << r;
      throw Error("sim", "simulate_system", "feedback outside the control box", os.str());
    }
    if (e.level < r) {
      x = e.coord;
      path.jumps.push_back({e.time, x});
    }
  }
  return path;
}

namespace {

struct PathResult {
  PathStatistics stats;
  Vec final_Y;
  std::vector<Vec> snapshots;
  std::vector<Path> Y, X, Xt;
};

class CoupledPath {
public:
  CoupledPath(const CoupledInputs& in, const BatchConfig& cfg) : in_(in), cfg_(cfg), spec_(*in.spec) {
    d_ = spec_.d();
    ds_ = static_cast<std::size_t>(d_);
    p_.resize(ds_);
    a_.resize(ds_);
    u_.resize(ds_);
    u2_.resize(ds_);
    n_.resize(ds_);
    mt_.resize(ds_);
    mY_.resize(ds_);
    mX_.resize(ds_);
  }

  PathResult run(std::uint64_t path, const SimplexPoint& m0) {
    const int N = cfg_.N;
    const unsigned sys = cfg_.systems;
    const bool doY = sys & kSystemY, doX = sys & kSystemX, doT = sys & kSystemXtilde;
    const bool lln = doY && in_.limit != nullptr;

    std::vector<int> z0 = cfg_.deterministic_initial ? deterministic_initial_states(N, m0) : std::vector<int>(static_cast<std::size_t>(N));
    if (!cfg_.deterministic_initial) {
      for (int j = 0; j < N; ++j) z0[static_cast<std::size_t>(j)] = draw_initial_state(cfg_.seed, path, static_cast<std::uint64_t>(j), m0);
    }
    const auto events = merged_noise(cfg_.seed, path, N, d_, spec_.M_bound(), spec_.T());

    Y_ = X_ = T_ = z0;
    cY_.assign(ds_, 0);
    for (int s : z0) ++cY_[static_cast<std::size_t>(s)];
    cX_ = cY_;

    PathResult res;
    if (cfg_.keep_paths) {
      auto init = [&](std::vector<Path>& v, bool on) {
        if (!on) return;
        v.resize(static_cast<std::size_t>(N));
        for (int j = 0; j < N; ++j) v[static_cast<std::size_t>(j)].z0 = z0[static_cast<std::size_t>(j)];
      };
      init(res.Y, doY);
      init(res.X, doX);
      init(res.Xt, doT);
    }

    std::vector<int> supYX(static_cast<std::size_t>(N), 0), supYT(static_cast<std::size_t>(N), 0);
    double sup_emp = 0.0, sup_lln = 0.0;
    int next_node = 0;  // next MFG node not yet compared
    auto compare_lln = [&](double t, bool at_node, int k) {
      measure(cY_, mY_);
      if (at_node) {
        const auto m = in_.limit->m.at(k);
        std::copy(m.begin(), m.end(), mt_.begin());
      } else {
        in_.limit->m.interpolate(t, mt_);
      }
      sup_lln = std::max(sup_lln, euclidean_diff(mY_, mt_));
    };
    // Nodes of the MFG grid strictly before t, then t itself.
    auto sweep_lln = [&](double t) {
      const TimeGrid& g = in_.limit->m.grid;
      while (next_node < g.n_nodes() && g.node(next_node) < t) {
        compare_lln(g.node(next_node), true, next_node);
        ++next_node;
      }
      compare_lln(t, false, 0);
    };
    if (lln) sweep_lln(0.0);

    const auto& snaps = cfg_.snapshot_times;
    std::size_t next_snap = 0;
    auto take_snapshots = [&](double t) {
      // The state at a snapshot time includes jumps at exactly that time.
      while (next_snap < snaps.size() && snaps[next_snap] < t) {
        res.snapshots.emplace_back(ds_);
        measure(cY_, res.snapshots.back());
        ++next_snap;
      }
    };
    for (const auto& e : events) {
      const auto j = static_cast<std::size_t>(e.player);
      if (doY) take_snapshots(e.time);
      const auto yz = static_cast<std::size_t>(e.coord);
      if (lln) sweep_lln(e.time);
      bool moved = false;
      if (doY && Y_[j] != e.coord && e.level < rate_Y(e.time, Y_[j], yz)) {
        move(Y_, cY_, j, e.coord);
        if (cfg_.keep_paths) res.Y[j].jumps.push_back({e.time, e.coord});
        moved = true;
      }
      if (doX && X_[j] != e.coord && e.level < rate_X(e.time, X_[j], yz)) {
        move(X_, cX_, j, e.coord);
        if (cfg_.keep_paths) res.X[j].jumps.push_back({e.time, e.coord});
        moved = true;
      }
      if (doT && T_[j] != e.coord && e.level < rate_T(e.time, T_[j], yz)) {
        T_[j] = e.coord;
        if (cfg_.keep_paths) res.Xt[j].jumps.push_back({e.time, e.coord});
        moved = true;
      }
      if (!moved) continue;
      if (doY && doX) {
        supYX[j] = std::max(supYX[j], std::abs(Y_[j] - X_[j]));
        measure(cY_, mY_);
        measure(cX_, mX_);
        sup_emp = std::max(sup_emp, euclidean_diff(mY_, mX_));
      }
      if (doY && doT) supYT[j] = std::max(supYT[j], std::abs(Y_[j] - T_[j]));
      if (lln) compare_lln(e.time, false, 0);
    }
    if (doY) take_snapshots(std::numeric_limits<double>::infinity());
    if (lln) {
      sweep_lln(spec_.T());
      const TimeGrid& g = in_.limit->m.grid;
      compare_lln(g.T(), true, g.n_steps());
    }

    res.stats.sup_yx = std::accumulate(supYX.begin(), supYX.end(), 0.0) / N;
    res.stats.sup_ytilde = std::accumulate(supYT.begin(), supYT.end(), 0.0) / N;
    res.stats.sup_emp_yx = sup_emp;
    res.stats.sup_lln = sup_lln;
    if (doY) {
      res.final_Y.resize(ds_);
      measure(cY_, res.final_Y);
    }
    return res;
  }

private:
  void measure(const std::vector<int>& counts, Vec& out) const {
    const double N = cfg_.N;
    for (std::size_t x = 0; x < ds_; ++x) out[x] = counts[x] / N;
  }
  static void move(std::vector<int>& state, std::vector<int>& counts, std::size_t j, int to) {
    --counts[static_cast<std::size_t>(state[j])];
    ++counts[static_cast<std::size_t>(to)];
    state[j] = to;
  }
  int others_rank(const SimplexGrid& grid, const std::vector<int>& counts, int x) {
    n_ = counts;
    --n_[static_cast<std::size_t>(x)];
    return grid.rank(n_);
  }

  double rate_Y(double t, int x, std::size_t y) {
    in_.nash->rates(t, x, others_rank(in_.nash->value().others, cY_, x), a_);
    return a_[y];
  }

  double rate_X(double t, int x, std::size_t y) {
    const MasterField& f = *in_.field;
    const int node = others_rank(f.grid, cX_, x);
    const TimeGrid& g = f.times;
    const int k = g.locate(t);
    const double s = std::clamp((t - g.node(k)) / g.dt(), 0.0, 1.0);
    f.values_at(k, node, u_);
    f.values_at(k + 1, node, u2_);
    for (std::size_t z = 0; z < ds_; ++z) u_[z] = (1.0 - s) * u_[z] + s * u2_[z];
    for (std::size_t z = 0; z < ds_; ++z) p_[z] = u_[z] - u_[static_cast<std::size_t>(x)];
    spec_.alpha_star(x, p_, a_);
    return a_[y];
  }

  double rate_T(double t, int x, std::size_t y) {
    in_.limit->u.interpolate(t, u_);
    for (std::size_t z = 0; z < ds_; ++z) p_[z] = u_[z] - u_[static_cast<std::size_t>(x)];
    spec_.alpha_star(x, p_, a_);
    return a_[y];
  }

  const CoupledInputs& in_;
  const BatchConfig& cfg_;
  const GameSpec& spec_;
  int d_ = 0;
  std::size_t ds_ = 0;
  Vec p_, a_, u_, u2_, mt_, mY_, mX_;
  std::vector<int> n_, Y_, X_, T_, cY_, cX_;
};

}  // namespace

TrajectoryBatch run_coupled_batch(const CoupledInputs& in, const SimplexPoint& m0, const BatchConfig& cfg) {
  if (!in.spec) throw Error("sim", "run_coupled_batch", "missing game specification");
  const int d = in.spec->d();
  if (m0.dim() != d) throw Error("sim", "run_coupled_batch", "m0 has the wrong dimension");
  if (cfg.N < 2) throw Error("sim", "run_coupled_batch", "need N >= 2 players", "N=" + std::to_string(cfg.N));
  if (cfg.paths < 1) throw Error("sim", "run_coupled_batch", "need at least one path");
  if ((cfg.systems & kSystemY) && !in.nash) throw Error("sim", "run_coupled_batch", "system Y needs the Nash feedback");
  if ((cfg.systems & kSystemX) && !in.field) throw Error("sim", "run_coupled_batch", "system X needs a master field");
  if ((cfg.systems & kSystemXtilde) && !in.limit) throw Error("sim", "run_coupled_batch", "system X~ needs the MFG limit");
  if (!std::is_sorted(cfg.snapshot_times.begin(), cfg.snapshot_times.end()) ||
      (!cfg.snapshot_times.empty() && (cfg.snapshot_times.front() < 0.0 || cfg.snapshot_times.back() > in.spec->T()))) {
    throw Error("sim", "run_coupled_batch", "snapshot times must be sorted inside [0, T]");
  }
  if (in.nash && in.nash->value().N != cfg.N) {
    throw Error("sim", "run_coupled_batch", "Nash feedback solved for another N",
                "nash_N=" + std::to_string(in.nash->value().N) + " N=" + std::to_string(cfg.N));
  }
  if ((cfg.systems & kSystemX) && in.field->grid.resolution() != cfg.N - 1) {
    throw Error("sim", "run_coupled_batch", "master field must be tabulated on the grid of spacing 1/(N-1)",
                "resolution=" + std::to_string(in.field->grid.resolution()));
  }

  TrajectoryBatch batch;
  batch.N = cfg.N;
  batch.paths = cfg.paths;
  batch.seed = cfg.seed;
  batch.systems = cfg.systems;
  std::vector<PathResult> results(static_cast<std::size_t>(cfg.paths));
  const std::size_t workers = static_cast<std::size_t>(std::max(1, thread_count()));
  const std::size_t chunk = (results.size() + workers - 1) / workers;
  // One simulator per worker; each path lands in its own slot, so the
  // outcome does not depend on scheduling.
  parallel_for(workers, [&](std::size_t w) {
    CoupledPath sim(in, cfg);
    for (std::size_t p = w * chunk; p < std::min(results.size(), (w + 1) * chunk); ++p) results[p] = sim.run(p, m0);
  });
  for (auto& r : results) {
    batch.stats.push_back(r.stats);
    batch.final_Y.push_back(std::move(r.final_Y));
    if (!cfg.snapshot_times.empty()) batch.snapshots_Y.push_back(std::move(r.snapshots));
    if (cfg.keep_paths) {
      batch.Y.push_back(std::move(r.Y));
      batch.X.push_back(std::move(r.X));
      batch.Xtilde.push_back(std::move(r.Xt));
    }
  }
  return batch;
}

Estimate mean_and_se(std::span<const double> samples) {
  if (samples.empty()) return {};
  const double n = static_cast<double>(samples.size());
  double mean = 0.0;
  for (double v : samples) mean += v;
  mean /= n;
  if (samples.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double v : samples) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / (n - 1.0) / n)};
}

ChaosEstimates chaos_estimates(const TrajectoryBatch& batch) {
  const std::size_t n = batch.stats.size();
  Vec a(n), b(n), c(n), e(n);
  for (std::size_t i = 0; i < n; ++i) {
    a[i] = batch.stats[i].sup_yx;
    b[i] = batch.stats[i].sup_emp_yx;
    c[i] = batch.stats[i].sup_ytilde;
    e[i] = batch.stats[i].sup_lln;
  }
  return {mean_and_se(a), mean_and_se(b), mean_and_se(c), mean_and_se(e)};
}

double wasserstein_gap(const SimplexPoint& x, const SimplexPoint& y) {
  if (x.dim() != y.dim()) throw Error("sim", "wasserstein_gap", "dimension mismatch");
  double cx = 0.0, cy = 0.0, s = 0.0;
  for (int k = 0; k + 1 < x.dim(); ++k) {
    cx += x[static_cast<std::size_t>(k)];
    cy += y[static_cast<std::size_t>(k)];
    s += std::abs(cx - cy);
  }
  return s;
}

double euclidean_gap(const SimplexPoint& x, const SimplexPoint& y) {
  if (x.dim() != y.dim()) throw Error("sim", "euclidean_gap", "dimension mismatch");
  return euclidean_diff(x.span(), y.span());
}

}  // namespace fsmfg
