#include "fsmfg/nplayer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "fsmfg/rng.hpp"
#include "fsmfg/sim.hpp"

namespace fsmfg {

namespace {

constexpr double kUnknownGuard = 1e6;
// Above this many stored doubles only the initial and terminal slices are kept.
constexpr double kStorageGuard = 5e7;

TimeGrid nplayer_grid(const GameSpec& spec, const NPlayerOptions& opt) {
  if (!(opt.dt_fraction > 0.0 && opt.dt_fraction <= 1.0)) {
    throw Error("nplayer", "solve", "dt_fraction must lie in (0, 1]");
  }
  return TimeGrid::with_step(0.0, spec.T(), opt.dt_fraction * spec.T());
}

// Backward RK4 for an autonomous system y' = f(y); `store(k, y)` sees every node.
template <typename Rhs, typename Store>
void backward_rk4(const TimeGrid& g, Vec& y, Rhs&& f, Store&& store, const char* op) {
  const std::size_t n = y.size();
  Vec k1(n), k2(n), k3(n), k4(n), st(n);
  const double dt = g.dt();
  store(g.n_steps(), y);
  for (int k = g.n_steps() - 1; k >= 0; --k) {
    f(y, k1);
    for (std::size_t i = 0; i < n; ++i) st[i] = y[i] - 0.5 * dt * k1[i];
    f(st, k2);
    for (std::size_t i = 0; i < n; ++i) st[i] = y[i] - 0.5 * dt * k2[i];
    f(st, k3);
    for (std::size_t i = 0; i < n; ++i) st[i] = y[i] - dt * k3[i];
    f(st, k4);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] -= dt / 6.0 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]);
      if (!std::isfinite(y[i])) {
        std::ostringstream os;
        os << "node=" << k << " t=" << g.node(k);
        throw Error("nplayer", op, "divergence in backward integration", os.str());
      }
    }
    store(k, y);
  }
}

// Ranks of n - e_y + e_z for every node and (y, z); -1 when n_y = 0.
std::vector<int> neighbour_table(const SimplexGrid& g) {
  const int d = g.d();
  std::vector<int> nb(static_cast<std::size_t>(g.size() * d * d), -1);
  for (int r = 0; r < g.size(); ++r) {
    for (int y = 0; y < d; ++y) {
      for (int z = 0; z < d; ++z) nb[static_cast<std::size_t>((r * d + y) * d + z)] = g.neighbour(r, y, z);
    }
  }
  return nb;
}

double log_multinomial(std::span<const int> n, std::span<const double> p) {
  int total = 0;
  double s = 0.0;
  for (std::size_t i = 0; i < n.size(); ++i) {
    total += n[i];
    if (n[i] > 0) {
      if (p[i] <= 0.0) return -std::numeric_limits<double>::infinity();
      s += n[i] * std::log(p[i]) - std::lgamma(n[i] + 1.0);
    }
  }
  return s + std::lgamma(total + 1.0);
}

}  // namespace

// ---------------------------------------------------------------------------

FullTensorValue::FullTensorValue(TimeGrid t, int players, int dim) : times(t), N(players), d(dim) {
  states = 1;
  for (int j = 0; j < N; ++j) states *= static_cast<std::size_t>(d);
  v.assign(static_cast<std::size_t>(t.n_nodes()) * static_cast<std::size_t>(N) * states, 0.0);
}

int FullTensorValue::digit(std::size_t code, int j) const {
  for (int i = 0; i < j; ++i) code /= static_cast<std::size_t>(d);
  return static_cast<int>(code % static_cast<std::size_t>(d));
}

std::size_t FullTensorValue::encode(std::span<const int> x) const {
  std::size_t code = 0;
  for (int j = N - 1; j >= 0; --j) code = code * static_cast<std::size_t>(d) + static_cast<std::size_t>(x[static_cast<std::size_t>(j)]);
  return code;
}

CountsValue::CountsValue(TimeGrid t, int players, int dim)
    : times(t), N(players), others(dim, players - 1),
      w(static_cast<std::size_t>(t.n_nodes()) * static_cast<std::size_t>(dim) * static_cast<std::size_t>(others.size()), 0.0) {}

void CountsValue::values_at(double t, int rank, std::span<double> out) const {
  const int k = times.locate(t);
  if (times.n_steps() == 0) {
    for (int x = 0; x < d(); ++x) out[static_cast<std::size_t>(x)] = value(0, x, rank);
    return;
  }
  const double s = std::clamp((t - times.node(k)) / times.dt(), 0.0, 1.0);
  for (int x = 0; x < d(); ++x) {
    out[static_cast<std::size_t>(x)] = (1.0 - s) * value(k, x, rank) + s * value(k + 1, x, rank);
  }
}

FullTensorValue solve_full_tensor(const GameSpec& spec, int N, const NPlayerOptions& opt) {
  if (N < 2) throw Error("nplayer", "solve_full_tensor", "need N >= 2 players", "N=" + std::to_string(N));
  const int d = spec.d();
  const double unknowns = N * std::pow(static_cast<double>(d), N);
  if (unknowns > kUnknownGuard) {
    throw Error("nplayer", "solve_full_tensor", "system too large", "unknowns=" + std::to_string(unknowns));
  }
  const TimeGrid g = nplayer_grid(spec, opt);
  const bool keep_all = unknowns * g.n_nodes() <= kStorageGuard;
  FullTensorValue out(keep_all ? g : TimeGrid(0.0, spec.T(), 1), N, d);
  const std::size_t S = out.states;
  const auto ds = static_cast<std::size_t>(d);

  // Decoded digits and powers of d, computed once.
  std::vector<int> digits(S * static_cast<std::size_t>(N));
  std::vector<std::size_t> power(static_cast<std::size_t>(N), 1);
  for (int j = 1; j < N; ++j) power[static_cast<std::size_t>(j)] = power[static_cast<std::size_t>(j - 1)] * ds;
  for (std::size_t c = 0; c < S; ++c) {
    for (int j = 0; j < N; ++j) digits[c * static_cast<std::size_t>(N) + static_cast<std::size_t>(j)] = out.digit(c, j);
  }
  auto empirical_others = [&](std::size_t c, int i, Vec& m) {
    std::fill(m.begin(), m.end(), 0.0);
    for (int j = 0; j < N; ++j) {
      if (j != i) m[static_cast<std::size_t>(digits[c * static_cast<std::size_t>(N) + static_cast<std::size_t>(j)])] += 1.0 / (N - 1);
    }
  };
  // Running costs do not depend on time.
  Vec Fcost(S * static_cast<std::size_t>(N)), m(ds);
  Vec y(S * static_cast<std::size_t>(N));
  for (std::size_t c = 0; c < S; ++c) {
    for (int i = 0; i < N; ++i) {
      empirical_others(c, i, m);
      const int xi = digits[c * static_cast<std::size_t>(N) + static_cast<std::size_t>(i)];
      Fcost[static_cast<std::size_t>(i) * S + c] = spec.running_cost(xi, m);
      y[static_cast<std::size_t>(i) * S + c] = spec.terminal_cost(xi, m);
    }
  }

  Vec p(ds), rates(static_cast<std::size_t>(N) * ds), ham(static_cast<std::size_t>(N));
  auto rhs = [&](const Vec& v, Vec& out_rhs) {
    for (std::size_t c = 0; c < S; ++c) {
      const int* x = digits.data() + c * static_cast<std::size_t>(N);
      for (int j = 0; j < N; ++j) {
        const std::size_t base = static_cast<std::size_t>(j) * S;
        for (std::size_t z = 0; z < ds; ++z) {
          const std::size_t cz = c + (z - static_cast<std::size_t>(x[j])) * power[static_cast<std::size_t>(j)];
          p[z] = v[base + cz] - v[base + c];
        }
        spec.alpha_star(x[j], p, std::span<double>(rates).subspan(static_cast<std::size_t>(j) * ds, ds));
        ham[static_cast<std::size_t>(j)] = spec.hamiltonian(x[j], p);
      }
      for (int i = 0; i < N; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * S;
        double s = ham[static_cast<std::size_t>(i)] - Fcost[base + c];
        for (int j = 0; j < N; ++j) {
          if (j == i) continue;
          for (std::size_t z = 0; z < ds; ++z) {
            if (static_cast<int>(z) == x[j]) continue;
            const std::size_t cz = c + (z - static_cast<std::size_t>(x[j])) * power[static_cast<std::size_t>(j)];
            s -= rates[static_cast<std::size_t>(j) * ds + z] * (v[base + cz] - v[base + c]);
          }
        }
        out_rhs[base + c] = s;
      }
    }
  };
  auto store = [&](int k, const Vec& v) {
    int slot = k;
    if (!keep_all) {
      if (k != 0 && k != g.n_steps()) return;
      slot = k == 0 ? 0 : 1;
    }
    std::copy(v.begin(), v.end(), out.v.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(slot) * v.size()));
  };
  backward_rk4(g, y, rhs, store, "solve_full_tensor");
  return out;
}

CountsValue solve_counts_reduced(const GameSpec& spec, int N, const NPlayerOptions& opt) {
  if (N < 2) throw Error("nplayer", "solve_counts_reduced", "need N >= 2 players", "N=" + std::to_string(N));
  const int d = spec.d();
  const double unknowns = d * static_cast<double>(SimplexGrid::node_count(d, N - 1));
  if (unknowns > kUnknownGuard) {
    throw Error("nplayer", "solve_counts_reduced", "system too large", "unknowns=" + std::to_string(unknowns));
  }
  const TimeGrid g = nplayer_grid(spec, opt);
  const bool keep_all = unknowns * g.n_nodes() <= kStorageGuard;
  CountsValue out(keep_all ? g : TimeGrid(0.0, spec.T(), 1), N, d);
  out.thinned = !keep_all;
  const SimplexGrid& grid = out.others;
  const auto R = static_cast<std::size_t>(grid.size());
  const auto ds = static_cast<std::size_t>(d);
  const std::vector<int> nb = neighbour_table(grid);
  auto nbr = [&](std::size_t r, std::size_t y, std::size_t z) { return static_cast<std::size_t>(nb[(r * ds + y) * ds + z]); };

  Vec Fcost(ds * R), y(ds * R);
  for (std::size_t r = 0; r < R; ++r) {
    const Vec m = grid.point(static_cast<int>(r));
    for (std::size_t x = 0; x < ds; ++x) {
      Fcost[x * R + r] = spec.running_cost(static_cast<int>(x), m);
      y[x * R + r] = spec.terminal_cost(static_cast<int>(x), m);
    }
  }
  Vec p(ds), a(ds);
  auto rhs = [&](const Vec& w, Vec& dw) {
    for (std::size_t r = 0; r < R; ++r) {
      const auto n = grid.composition(static_cast<int>(r));
      for (std::size_t x = 0; x < ds; ++x) {
        for (std::size_t z = 0; z < ds; ++z) p[z] = w[z * R + r] - w[x * R + r];
        double s = spec.hamiltonian(static_cast<int>(x), p) - Fcost[x * R + r];
        for (std::size_t yy = 0; yy < ds; ++yy) {
          if (n[yy] == 0) continue;
          // A player in state yy sees the others n - e_yy + e_x.
          const std::size_t r2 = nbr(r, yy, x);
          for (std::size_t z = 0; z < ds; ++z) p[z] = w[z * R + r2] - w[yy * R + r2];
          spec.alpha_star(static_cast<int>(yy), p, a);
          double flow = 0.0;
          for (std::size_t z = 0; z < ds; ++z) {
            if (z == yy) continue;
            flow += a[z] * (w[x * R + nbr(r, yy, z)] - w[x * R + r]);
          }
          s -= n[yy] * flow;
        }
        dw[x * R + r] = s;
      }
    }
  };
  auto store = [&](int k, const Vec& w) {
    int slot = k;
    if (!keep_all) {
      if (k != 0 && k != g.n_steps()) return;
      slot = k == 0 ? 0 : 1;
    }
    std::copy(w.begin(), w.end(), out.w.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(slot) * w.size()));
  };
  backward_rk4(g, y, rhs, store, "solve_counts_reduced");
  return out;
}

double representation_gap(const FullTensorValue& full, const CountsValue& counts) {
  if (full.times.n_steps() != counts.times.n_steps() || full.N != counts.N || full.d != counts.d()) {
    throw Error("nplayer", "representation_gap", "solutions are not comparable");
  }
  const int N = full.N, d = full.d;
  double sup = 0.0;
  std::vector<int> n(static_cast<std::size_t>(d));
  for (int k = 0; k < full.times.n_nodes(); ++k) {
    for (std::size_t c = 0; c < full.states; ++c) {
      for (int i = 0; i < N; ++i) {
        std::fill(n.begin(), n.end(), 0);
        for (int j = 0; j < N; ++j) {
          if (j != i) ++n[static_cast<std::size_t>(full.digit(c, j))];
        }
        const int rank = counts.others.rank(n);
        sup = std::max(sup, std::abs(full(k, i, c) - counts.value(k, full.digit(c, i), rank)));
      }
    }
  }
  return sup;
}

double permutation_defect(const FullTensorValue& full) {
  const int N = full.N;
  double sup = 0.0;
  std::vector<int> x(static_cast<std::size_t>(N));
  for (int k = 0; k < full.times.n_nodes(); ++k) {
    for (std::size_t c = 0; c < full.states; ++c) {
      for (int j = 0; j < N; ++j) x[static_cast<std::size_t>(j)] = full.digit(c, j);
      for (int a = 0; a < N; ++a) {
        for (int b = a + 1; b < N; ++b) {
          std::swap(x[static_cast<std::size_t>(a)], x[static_cast<std::size_t>(b)]);
          const std::size_t c2 = full.encode(x);
          std::swap(x[static_cast<std::size_t>(a)], x[static_cast<std::size_t>(b)]);
          for (int i = 0; i < N; ++i) {
            // Swapping two other players leaves v^i unchanged; swapping i with
            // b hands i's value to b.
            const int i2 = i == a ? b : (i == b ? a : i);
            sup = std::max(sup, std::abs(full(k, i, c) - full(k, i2, c2)));
          }
        }
      }
    }
  }
  return sup;
}

// ---------------------------------------------------------------------------

NashFeedback::NashFeedback(std::shared_ptr<const GameSpec> spec, std::shared_ptr<const CountsValue> value)
    : spec_(std::move(spec)), value_(std::move(value)) {
  if (!spec_ || !value_) throw Error("nplayer", "NashFeedback", "null input");
  if (spec_->d() != value_->d()) throw Error("nplayer", "NashFeedback", "dimension mismatch");
  if (value_->thinned) {
    throw Error("nplayer", "NashFeedback", "counts solution kept only its end slices",
                "N=" + std::to_string(value_->N));
  }
}

void NashFeedback::rates(double t, int x, int rank, std::span<double> out) const {
  const auto ds = static_cast<std::size_t>(spec_->d());
  double w[16], p[16];
  value_->values_at(t, rank, std::span<double>(w, ds));
  for (std::size_t z = 0; z < ds; ++z) p[z] = w[z] - w[static_cast<std::size_t>(x)];
  spec_->alpha_star(x, std::span<const double>(p, ds), out);
}

namespace {

// int_0^{t_k} L(x, a*(x, D^x w(s, ., n))) ds on the counts time grid.
Vec cumulative_lagrangian(const NashFeedback& nash) {
  const CountsValue& cv = nash.value();
  const GameSpec& spec = nash.spec();
  const int d = cv.d(), R = cv.others.size();
  const TimeGrid& g = cv.times;
  Vec cum(static_cast<std::size_t>(g.n_nodes()) * static_cast<std::size_t>(d * R), 0.0);
  Vec a(static_cast<std::size_t>(d));
  auto running = [&](int k, int x, int r) {
    nash.rates(g.node(k), x, r, a);
    return spec.lagrangian(x, a);
  };
  for (int x = 0; x < d; ++x) {
    for (int r = 0; r < R; ++r) {
      double prev = running(0, x, r);
      for (int k = 1; k < g.n_nodes(); ++k) {
        const double cur = running(k, x, r);
        cum[cv.index(k, x, r)] = cum[cv.index(k - 1, x, r)] + 0.5 * g.dt() * (prev + cur);
        prev = cur;
      }
    }
  }
  return cum;
}

double cumulative_at(const CountsValue& cv, const Vec& cum, double t, int x, int r) {
  const TimeGrid& g = cv.times;
  const int k = g.locate(t);
  const double s = std::clamp((t - g.node(k)) / g.dt(), 0.0, 1.0);
  return (1.0 - s) * cum[cv.index(k, x, r)] + s * cum[cv.index(k + 1, x, r)];
}

// Player 0's cost along one game; `deviation` (rates[x*d+y]) replaces the
// Nash feedback of player 0 when non-empty.
double play(const NashFeedback& nash, const Vec& cum, const std::vector<PlayerEvent>& events, std::vector<int> state,
            std::span<const double> deviation) {
  const GameSpec& spec = nash.spec();
  const CountsValue& cv = nash.value();
  const int d = spec.d(), N = cv.N;
  const auto ds = static_cast<std::size_t>(d);
  std::vector<int> counts(ds, 0);
  for (int s : state) ++counts[static_cast<std::size_t>(s)];
  const bool deviates = !deviation.empty();
  Vec m(ds), rate(ds);
  auto others_of = [&](int j, std::vector<int>& n) {
    n = counts;
    --n[static_cast<std::size_t>(state[static_cast<std::size_t>(j)])];
  };
  std::vector<int> n0(ds);
  auto measure0 = [&] {
    others_of(0, n0);
    for (std::size_t z = 0; z < ds; ++z) m[z] = static_cast<double>(n0[z]) / (N - 1);
  };
  double cost = 0.0, last = 0.0;
  auto accumulate = [&](double until) {
    if (until <= last) return;
    const int x0 = state[0];
    measure0();
    cost += spec.running_cost(x0, m) * (until - last);
    if (deviates) {
      cost += spec.lagrangian(x0, deviation.subspan(static_cast<std::size_t>(x0) * ds, ds)) * (until - last);
    } else {
      const int r = cv.others.rank(n0);
      cost += cumulative_at(cv, cum, until, x0, r) - cumulative_at(cv, cum, last, x0, r);
    }
    last = until;
  };
  std::vector<int> n(ds);
  for (const auto& e : events) {
    const int x = state[static_cast<std::size_t>(e.player)];
    if (e.coord == x) continue;
    double r;
    if (deviates && e.player == 0) {
      r = deviation[static_cast<std::size_t>(x) * ds + static_cast<std::size_t>(e.coord)];
    } else {
      others_of(e.player, n);
      nash.rates(e.time, x, cv.others.rank(n), rate);
      r = rate[static_cast<std::size_t>(e.coord)];
    }
    if (e.level < r) {
      accumulate(e.time);
      --counts[static_cast<std::size_t>(x)];
      ++counts[static_cast<std::size_t>(e.coord)];
      state[static_cast<std::size_t>(e.player)] = e.coord;
    }
  }
  accumulate(spec.T());
  measure0();
  return cost + spec.terminal_cost(state[0], m);
}

}  // namespace

PairedCost paired_deviation_cost(const NashFeedback& nash, const SimplexPoint& m0, std::span<const double> rates,
                                 int paths, std::uint64_t seed) {
  const GameSpec& spec = nash.spec();
  const int d = spec.d(), N = nash.value().N;
  if (paths < 2) throw Error("nplayer", "nash_gap_probe", "need at least 2 paths");
  if (static_cast<int>(rates.size()) != d * d) throw Error("nplayer", "nash_gap_probe", "deviation has wrong size");
  for (int x = 0; x < d; ++x) {
    for (int y = 0; y < d; ++y) {
      const double r = rates[static_cast<std::size_t>(x * d + y)];
      if (x != y && !(r >= spec.kappa() && r <= spec.M_bound())) {
        throw Error("nplayer", "nash_gap_probe", "deviation rate outside [kappa, M]",
                    "x=" + std::to_string(x) + " y=" + std::to_string(y) + " rate=" + std::to_string(r));
      }
    }
  }
  const Vec cum = cumulative_lagrangian(nash);
  Vec nash_cost(static_cast<std::size_t>(paths)), dev_cost(static_cast<std::size_t>(paths));
  parallel_for(static_cast<std::size_t>(paths), [&](std::size_t p) {
    const auto events = merged_noise(seed, p, N, d, spec.M_bound(), spec.T());
    std::vector<int> state(static_cast<std::size_t>(N));
    for (int j = 0; j < N; ++j) state[static_cast<std::size_t>(j)] = draw_initial_state(seed, p, static_cast<std::uint64_t>(j), m0);
    nash_cost[p] = play(nash, cum, events, state, {});
    dev_cost[p] = play(nash, cum, events, state, rates);
  });
  Vec diff(static_cast<std::size_t>(paths));
  for (std::size_t p = 0; p < diff.size(); ++p) diff[p] = nash_cost[p] - dev_cost[p];
  const auto g = mean_and_se(diff);
  return {mean_and_se(nash_cost).mean, mean_and_se(dev_cost).mean, g.mean, g.se};
}

NashGapReport nash_gap_probe(const NashFeedback& nash, const SimplexPoint& m0, int deviations, int paths,
                             std::uint64_t seed) {
  const GameSpec& spec = nash.spec();
  const int d = spec.d();
  const auto ds = static_cast<std::size_t>(d);
  if (deviations < 1) throw Error("nplayer", "nash_gap_probe", "need at least one deviation");
  NashGapReport rep;
  rep.max_gap = -std::numeric_limits<double>::infinity();
  Vec beta(ds * ds), zero(ds, 0.0), own(ds);
  for (int dv = 0; dv < deviations; ++dv) {
    CounterRng rng{seed, static_cast<std::uint64_t>(dv), 0xde7ULL};
    for (std::size_t x = 0; x < ds; ++x) {
      // The own-state entry carries no jump; give it the cost-free value.
      spec.alpha_star(static_cast<int>(x), zero, own);
      for (std::size_t y = 0; y < ds; ++y) beta[x * ds + y] = y == x ? own[x] : rng.uniform(spec.kappa(), spec.M_bound());
    }
    const auto pc = paired_deviation_cost(nash, m0, beta, paths, seed);
    rep.nash_cost = pc.nash;
    rep.gaps.push_back(pc.gap);
    rep.std_errors.push_back(pc.gap_se);
    if (pc.gap > rep.max_gap) {
      rep.max_gap = pc.gap;
      rep.std_error = pc.gap_se;
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------

ProjectionResidual projection_residual(const GameSpec& spec, const MasterEvaluator& U, int N,
                                       std::span<const double> times, double dt_fd) {
  if (N < 2) throw Error("nplayer", "projection_residual", "need N >= 2 players");
  const int d = spec.d();
  const auto ds = static_cast<std::size_t>(d);
  const SimplexGrid grid(d, N - 1);
  const auto R = static_cast<std::size_t>(grid.size());
  const std::vector<int> nb = neighbour_table(grid);
  auto nbr = [&](std::size_t r, std::size_t y, std::size_t z) { return static_cast<std::size_t>(nb[(r * ds + y) * ds + z]); };
  ProjectionResidual out;
  Vec U0(R * ds), dU(R * ds), p(ds), a(ds);
  std::vector<Matrix> D(R);
  for (double t : times) {
    if (t - dt_fd < 0.0 || t + dt_fd > spec.T()) {
      throw Error("nplayer", "projection_residual", "sample time too close to the ends", "t=" + std::to_string(t));
    }
    parallel_for(R, [&](std::size_t r) {
      const Vec m = grid.point(static_cast<int>(r));
      const auto c = U.evaluate(t, m);
      const auto up = U.evaluate(t + dt_fd, m);
      const auto dn = U.evaluate(t - dt_fd, m);
      for (std::size_t x = 0; x < ds; ++x) {
        U0[r * ds + x] = c.U[x];
        dU[r * ds + x] = (up.U[x] - dn.U[x]) / (2.0 * dt_fd);
      }
      D[r] = c.D;
    });
    for (std::size_t r = 0; r < R; ++r) {
      const auto n = grid.composition(static_cast<int>(r));
      const Vec m = grid.point(static_cast<int>(r));
      for (std::size_t x = 0; x < ds; ++x) {
        for (std::size_t z = 0; z < ds; ++z) p[z] = U0[r * ds + z] - U0[r * ds + x];
        double res = -dU[r * ds + x] + spec.hamiltonian(static_cast<int>(x), p) - spec.running_cost(static_cast<int>(x), m);
        for (std::size_t y = 0; y < ds; ++y) {
          if (n[y] == 0) continue;
          const std::size_t r2 = nbr(r, y, x);
          for (std::size_t z = 0; z < ds; ++z) p[z] = U0[r2 * ds + z] - U0[r2 * ds + y];
          spec.alpha_star(static_cast<int>(y), p, a);
          for (std::size_t z = 0; z < ds; ++z) {
            if (z == y) continue;
            const double delta = U0[nbr(r, y, z) * ds + x] - U0[r * ds + x];
            res -= n[y] * a[z] * delta;
            const double lin = derivative_entry(D[r], static_cast<int>(x), static_cast<int>(y), static_cast<int>(z)) / (N - 1);
            out.tau_sup = std::max(out.tau_sup, std::abs(delta - lin));
          }
        }
        out.r_sup = std::max(out.r_sup, std::abs(res));
      }
    }
  }
  return out;
}

Theorem1Gap theorem1_gap(const GameSpec& spec, const CountsValue& counts, const MasterEvaluator& U, double t0,
                         const SimplexPoint& m0) {
  const int d = spec.d(), N = counts.N;
  const auto ds = static_cast<std::size_t>(d);
  const TimeGrid& g = counts.times;
  const int k0 = g.n_steps() > 0 ? static_cast<int>(std::llround((t0 - g.t0()) / g.dt())) : 0;
  if (k0 < 0 || k0 > g.n_steps() || std::abs(g.node(k0) - t0) > 1e-9) {
    throw Error("nplayer", "theorem1_gap", "t0 is not a stored node of the counts solution", "t0=" + std::to_string(t0));
  }
  Theorem1Gap out;
  const SimplexGrid total(d, N);
  Vec gaps(static_cast<std::size_t>(total.size()), 0.0);
  parallel_for(static_cast<std::size_t>(total.size()), [&](std::size_t c) {
    const auto comp = total.composition(static_cast<int>(c));
    const auto P = U.evaluate(t0, total.point(static_cast<int>(c)));
    std::vector<int> n(comp.begin(), comp.end());
    double s = 0.0;
    for (std::size_t y = 0; y < ds; ++y) {
      if (comp[y] == 0) continue;
      --n[y];
      s += comp[y] * std::abs(counts.value(k0, static_cast<int>(y), counts.others.rank(n)) - P.U[y]);
      ++n[y];
    }
    gaps[c] = s / N;
  });
  out.avg_gap = *std::max_element(gaps.begin(), gaps.end());

  Vec expect(ds, 0.0);
  for (int r = 0; r < counts.others.size(); ++r) {
    const double lp = log_multinomial(counts.others.composition(r), m0.span());
    if (!std::isfinite(lp)) continue;
    const double prob = std::exp(lp);
    for (std::size_t x = 0; x < ds; ++x) expect[x] += prob * counts.value(k0, static_cast<int>(x), r);
  }
  const auto P0 = U.evaluate(t0, m0.span());
  for (std::size_t x = 0; x < ds; ++x) out.l1_gap += m0[x] * std::abs(expect[x] - P0.U[x]);
  return out;
}

}  // namespace fsmfg
