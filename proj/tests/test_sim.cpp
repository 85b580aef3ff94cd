#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "common.hpp"
#include "fsmfg/rng.hpp"
#include "fsmfg/sim.hpp"

using namespace fsmfg;

namespace {

Feedback constant_rate(double a) {
  return [a](double, int, std::span<double> r) { std::fill(r.begin(), r.end(), a); };
}

// Poisson pmf at k for mean lambda.
double poisson_pmf(int k, double lambda) { return std::exp(k * std::log(lambda) - lambda - std::lgamma(k + 1.0)); }

}  // namespace

TEST_CASE("noise streams are reproducible and ordered") {
  const auto a = NoiseStream::generate(4, 2, 9, 3, 1.5, 2.0);
  const auto b = NoiseStream::generate(4, 2, 9, 3, 1.5, 2.0);
  REQUIRE(a.events.size() == b.events.size());
  for (std::size_t i = 0; i < a.events.size(); ++i) {
    CHECK(a.events[i].time == b.events[i].time);
    CHECK(a.events[i].level == b.events[i].level);
    if (i > 0) CHECK(a.events[i].time > a.events[i - 1].time);
    CHECK(a.events[i].level < 1.5);
  }
  const auto merged = merged_noise(4, 2, 5, 3, 1.5, 2.0);
  for (std::size_t i = 1; i < merged.size(); ++i) CHECK(merged[i].time >= merged[i - 1].time);
}

TEST_CASE("constant rates give Poisson jump counts") {
  const int d = 3, trials = 100000;
  const double a = 1.0, T = 1.0, lambda = (d - 1) * a * T;
  std::vector<int> hist(8, 0);
  Vec counts(trials);
  for (int i = 0; i < trials; ++i) {
    const auto ns = NoiseStream::generate(21, static_cast<std::uint64_t>(i), 0, d, 1.5, T);
    const auto path = simulate_system(constant_rate(a), ns, 0, T, 0.5, 1.5);
    const int k = static_cast<int>(path.jumps.size());
    counts[static_cast<std::size_t>(i)] = k;
    ++hist[static_cast<std::size_t>(std::min(k, 7))];
  }
  const auto est = mean_and_se(counts);
  CHECK(std::abs(est.mean - lambda) <= 4.0 * est.se);
  double chi2 = 0.0, tail = 1.0;
  for (int k = 0; k < 8; ++k) {
    double p = k < 7 ? poisson_pmf(k, lambda) : tail;
    tail -= p;
    const double expect = trials * p;
    chi2 += (hist[static_cast<std::size_t>(k)] - expect) * (hist[static_cast<std::size_t>(k)] - expect) / expect;
  }
  MESSAGE("chi-square on 7 dof: " << chi2);
  CHECK(chi2 <= 18.48);  // 0.99 quantile
}

TEST_CASE("with kappa equal to M every off-state event is a jump") {
  const auto ns = NoiseStream::generate(3, 0, 0, 3, 1.0, 5.0);
  const auto path = simulate_system(constant_rate(1.0), ns, 1, 5.0, 1.0, 1.0);
  int x = 1;
  std::size_t expected = 0;
  for (const auto& e : ns.events) {
    if (e.coord != x) {
      x = e.coord;
      ++expected;
    }
  }
  CHECK(path.jumps.size() == expected);
  CHECK(path.state_at(5.0) == x);
}

TEST_CASE("feedback outside the box is an error") {
  const auto ns = NoiseStream::generate(3, 0, 0, 2, 1.5, 5.0);
  CHECK_THROWS_AS(simulate_system(constant_rate(2.0), ns, 0, 5.0, 0.5, 1.5), Error);
}

TEST_CASE("occupation of many independent players matches the two-state flow") {
  const int players = 10000;
  const double a = 1.0, T = 0.7;
  const SimplexPoint m0(Vec{0.9, 0.1});
  int in0 = 0;
  for (int i = 0; i < players; ++i) {
    const int z0 = draw_initial_state(8, 0, static_cast<std::uint64_t>(i), m0);
    const auto ns = NoiseStream::generate(8, 0, static_cast<std::uint64_t>(i), 2, 1.5, T);
    if (simulate_system(constant_rate(a), ns, z0, T, 0.5, 1.5).state_at(T) == 0) ++in0;
  }
  const double exact = 0.5 + 0.4 * std::exp(-2.0 * a * T);
  CHECK(std::abs(static_cast<double>(in0) / players - exact) <= 4.0 * 0.5 / std::sqrt(players));
}

TEST_CASE("deterministic initial states use largest remainders") {
  const auto s = deterministic_initial_states(10, SimplexPoint(Vec{0.34, 0.33, 0.33}));
  CHECK(std::count(s.begin(), s.end(), 0) == 4);
  CHECK(std::count(s.begin(), s.end(), 1) == 3);
  CHECK(std::is_sorted(s.begin(), s.end()));
}

TEST_CASE("coincident feedbacks give identical coupled paths") {
  auto q = fsmfg::testing::measure_free(2);
  const int N = 4;
  auto counts = std::make_shared<CountsValue>(solve_counts_reduced(*q, N, {.dt_fraction = 1e-2}));
  NashFeedback nash(q, counts);
  const auto field = build_master_field(q, SimplexGrid(2, N - 1), TimeGrid::with_step(0.0, 1.0, 1e-2));
  const SimplexPoint m0(Vec{0.7, 0.3});
  const auto limit = solve_mfg(*q, 0.0, m0, {.dt = 1e-2});
  CoupledInputs in{q, &nash, &field, &limit};
  BatchConfig cfg{.N = N, .paths = 200, .seed = 5, .keep_paths = true};
  const auto batch = run_coupled_batch(in, m0, cfg);
  const auto est = chaos_estimates(batch);
  CHECK(est.e_yx.mean == 0.0);
  CHECK(est.e_emp_yx.mean == 0.0);
  CHECK(est.e_chaos.mean == 0.0);
  CHECK(est.e_lln.mean > 0.0);
  for (int p = 0; p < cfg.paths; ++p)
    for (int i = 0; i < N; ++i) {
      CHECK(batch.Y[static_cast<std::size_t>(p)][static_cast<std::size_t>(i)] ==
            batch.X[static_cast<std::size_t>(p)][static_cast<std::size_t>(i)]);
      CHECK(batch.Y[static_cast<std::size_t>(p)][static_cast<std::size_t>(i)] ==
            batch.Xtilde[static_cast<std::size_t>(p)][static_cast<std::size_t>(i)]);
    }
}

TEST_CASE("coupled batches are deterministic and validated") {
  auto q = fsmfg::testing::own_mass();
  const int N = 6;
  auto counts = std::make_shared<CountsValue>(solve_counts_reduced(*q, N, {.dt_fraction = 1e-2}));
  NashFeedback nash(q, counts);
  const auto field = build_master_field(q, SimplexGrid(2, N - 1), TimeGrid::with_step(0.0, 1.0, 1e-2));
  const SimplexPoint m0(Vec{0.7, 0.3});
  const auto limit = solve_mfg(*q, 0.0, m0, {.dt = 1e-2});
  CoupledInputs in{q, &nash, &field, &limit};
  BatchConfig cfg{.N = N, .paths = 100, .seed = 9, .snapshot_times = {0.5, 1.0}};
  const auto a = run_coupled_batch(in, m0, cfg);
  const auto b = run_coupled_batch(in, m0, cfg);
  for (std::size_t p = 0; p < a.stats.size(); ++p) {
    CHECK(a.stats[p].sup_yx == b.stats[p].sup_yx);
    CHECK(a.stats[p].sup_lln == b.stats[p].sup_lln);
    CHECK(a.final_Y[p] == b.final_Y[p]);
    CHECK(a.snapshots_Y[p].size() == 2);
    CHECK(a.snapshots_Y[p][1] == a.final_Y[p]);
  }
  cfg.seed = 10;
  const auto c = run_coupled_batch(in, m0, cfg);
  bool differs = false;
  for (std::size_t p = 0; p < a.stats.size(); ++p) differs = differs || a.final_Y[p] != c.final_Y[p];
  CHECK(differs);

  BatchConfig wrong = cfg;
  wrong.N = N + 1;
  CHECK_THROWS_AS(run_coupled_batch(in, m0, wrong), Error);
  BatchConfig unsorted = cfg;
  unsorted.snapshot_times = {0.8, 0.2};
  CHECK_THROWS_AS(run_coupled_batch(in, m0, unsorted), Error);
}

TEST_CASE("Wasserstein distance on a line of states") {
  CHECK(wasserstein_gap(SimplexPoint::vertex(3, 0), SimplexPoint::vertex(3, 2)) == 2.0);
  CHECK(wasserstein_gap(SimplexPoint::vertex(3, 1), SimplexPoint::vertex(3, 1)) == 0.0);
  CHECK(wasserstein_gap(SimplexPoint(Vec{0.5, 0.5, 0.0}), SimplexPoint(Vec{0.0, 0.5, 0.5})) ==
        doctest::Approx(1.0));
  CHECK(euclidean_gap(SimplexPoint::vertex(2, 0), SimplexPoint::vertex(2, 1)) == doctest::Approx(std::sqrt(2.0)));
}

TEST_CASE("Wasserstein agrees with the transport LP") {
  CounterRng rng{99};
  for (int trial = 0; trial < 100; ++trial) {
    const int d = 2 + rng.below(4);
    const SimplexPoint x(rng.simplex(d)), y(rng.simplex(d));
    const double w = wasserstein_gap(x, y);
    // The monotone (quantile) coupling is optimal on a line.
    Vec rx = x.weights(), ry = y.weights();
    double quantile = 0.0;
    for (int i = 0, j = 0; i < d && j < d;) {
      const double mass = std::min(rx[static_cast<std::size_t>(i)], ry[static_cast<std::size_t>(j)]);
      quantile += mass * std::abs(i - j);
      rx[static_cast<std::size_t>(i)] -= mass;
      ry[static_cast<std::size_t>(j)] -= mass;
      if (rx[static_cast<std::size_t>(i)] <= 1e-15) ++i;
      else ++j;
    }
    CHECK(std::abs(w - quantile) <= 1e-12);
    // Any feasible plan costs at least as much: greedy fills in random order.
    for (int rep = 0; rep < 5; ++rep) {
      Vec ax = x.weights(), ay = y.weights();
      double cost = 0.0;
      for (int step = 0; step < 4 * d * d; ++step) {
        const int i = rng.below(d), j = rng.below(d);
        const double mass = std::min(ax[static_cast<std::size_t>(i)], ay[static_cast<std::size_t>(j)]);
        cost += mass * std::abs(i - j);
        ax[static_cast<std::size_t>(i)] -= mass;
        ay[static_cast<std::size_t>(j)] -= mass;
      }
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
          const double mass = std::min(ax[static_cast<std::size_t>(i)], ay[static_cast<std::size_t>(j)]);
          cost += mass * std::abs(i - j);
          ax[static_cast<std::size_t>(i)] -= mass;
          ay[static_cast<std::size_t>(j)] -= mass;
        }
      CHECK(cost >= w - 1e-12);
    }
  }
}

TEST_CASE("mean and standard error") {
  const Vec s{1.0, 2.0, 3.0, 4.0};
  const auto e = mean_and_se(s);
  CHECK(e.mean == 2.5);
  CHECK(e.se == doctest::Approx(std::sqrt(5.0 / 3.0 / 4.0)));
}
