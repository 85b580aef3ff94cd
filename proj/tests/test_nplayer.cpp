#include <doctest.h>

#include <cmath>

#include "common.hpp"
#include "fsmfg/nplayer.hpp"

using namespace fsmfg;
using fsmfg::testing::own_mass;

TEST_CASE("full tensor and counts reduction agree") {
  const NPlayerOptions opt{.dt_fraction = 1e-2};
  for (int d : {2, 3}) {
    auto q = own_mass(d);
    for (int N = 2; N <= (d == 2 ? 5 : 4); ++N) {
      const auto full = solve_full_tensor(*q, N, opt);
      const auto counts = solve_counts_reduced(*q, N, opt);
      CHECK(representation_gap(full, counts) <= 1e-12);
      CHECK(permutation_defect(full) <= 1e-12);
    }
  }
}

TEST_CASE("full tensor encoding round-trips") {
  FullTensorValue f(TimeGrid(0.0, 1.0, 1), 4, 3);
  CHECK(f.states == 81);
  const std::vector<int> x{2, 0, 1, 2};
  const auto code = f.encode(x);
  for (int j = 0; j < 4; ++j) CHECK(f.digit(code, j) == x[static_cast<std::size_t>(j)]);
}

TEST_CASE("zero costs give a zero value") {
  auto q = fsmfg::testing::with_costs(LinearCost::zero(3), LinearCost::zero(3), 3);
  const auto w = solve_counts_reduced(*q, 6, {.dt_fraction = 1e-2});
  CHECK(sup_norm(w.w) == 0.0);
}

TEST_CASE("values respect the uniform bound") {
  auto q = own_mass(3);
  const auto w = solve_counts_reduced(*q, 10, {.dt_fraction = 1e-2});
  CHECK(sup_norm(w.w) <= q->value_bound());
}

TEST_CASE("degenerate and oversized inputs are rejected") {
  auto q = own_mass();
  CHECK_THROWS_AS(solve_counts_reduced(*q, 1), Error);
  CHECK_THROWS_AS(solve_full_tensor(*q, 1), Error);
  CHECK_THROWS_AS(solve_full_tensor(*q, 25), Error);
  CHECK_THROWS_AS(solve_counts_reduced(*q, 4, {.dt_fraction = 0.0}), Error);
}

TEST_CASE("no profitable constant deviation from the Nash feedback") {
  auto q = own_mass();
  auto w = std::make_shared<CountsValue>(solve_counts_reduced(*q, 8, {.dt_fraction = 1e-2}));
  NashFeedback nash(q, w);
  const auto rep = nash_gap_probe(nash, SimplexPoint(Vec{0.7, 0.3}), 5, 2000, 11);
  MESSAGE("max Nash gap " << rep.max_gap << " +- " << rep.std_error);
  CHECK(rep.max_gap <= 3.0 * rep.std_error);
  CHECK(rep.gaps.size() == 5);
  // The Monte Carlo cost of the Nash player is close to E[w(0, X_1, n)].
  CHECK(std::isfinite(rep.nash_cost));
}

TEST_CASE("paired costs are reproducible and consistent") {
  auto q = own_mass();
  auto w = std::make_shared<CountsValue>(solve_counts_reduced(*q, 4, {.dt_fraction = 1e-2}));
  NashFeedback nash(q, w);
  const Vec rates{0.0, 1.5, 0.5, 0.0};
  const SimplexPoint m0(Vec{0.7, 0.3});
  const auto a = paired_deviation_cost(nash, m0, rates, 500, 3);
  const auto b = paired_deviation_cost(nash, m0, rates, 500, 3);
  CHECK(a.gap == b.gap);
  CHECK(std::abs(a.gap - (a.nash - a.deviated)) <= 1e-12);
  CHECK(a.gap <= 3.0 * a.gap_se);
  const Vec bad{0.0, 3.0, 0.5, 0.0};
  CHECK_THROWS_AS(paired_deviation_cost(nash, m0, bad, 10, 3), Error);
}

TEST_CASE("measure-free game: projection is exact") {
  auto q = fsmfg::testing::measure_free(3);
  CharacteristicEvaluator U(q, 1e-3);
  const Vec times{0.2, 0.5, 0.8};
  const auto pr = projection_residual(*q, U, 6, times);
  MESSAGE("measure-free projection residual " << pr.r_sup);
  CHECK(pr.tau_sup == 0.0);
  CHECK(pr.r_sup <= 1e-5);

  const auto counts = solve_counts_reduced(*q, 6, {.dt_fraction = 1e-3});
  const auto gap = theorem1_gap(*q, counts, U, 0.0, SimplexPoint(Vec{0.5, 0.3, 0.2}));
  CHECK(gap.avg_gap <= 1e-9);
  CHECK(gap.l1_gap <= 1e-9);
}

TEST_CASE("reference game: gaps shrink with N") {
  auto q = own_mass();
  CharacteristicEvaluator U(q, 1e-3);
  const SimplexPoint m0(Vec{0.7, 0.3});
  double prev_avg = 1e300, prev_l1 = 1e300;
  for (int N : {4, 8, 16}) {
    const auto counts = solve_counts_reduced(*q, N);
    const auto g = theorem1_gap(*q, counts, U, 0.0, m0);
    CHECK(g.avg_gap < prev_avg);
    CHECK(g.l1_gap < prev_l1);
    CHECK(g.l1_gap <= g.avg_gap + 1e-12);
    prev_avg = g.avg_gap;
    prev_l1 = g.l1_gap;
  }
  CHECK_THROWS_AS(theorem1_gap(*q, solve_counts_reduced(*q, 4, {.dt_fraction = 0.1}), U, 0.05, m0), Error);
}

TEST_CASE("projection residual needs room for the time difference") {
  auto q = own_mass();
  CharacteristicEvaluator U(q, 1e-2);
  const Vec bad{0.0};
  CHECK_THROWS_AS(projection_residual(*q, U, 4, bad), Error);
}

TEST_CASE("thinned storage cannot drive a feedback") {
  auto q = own_mass(3);
  // 3 * C(61, 2) unknowns over 10001 nodes exceeds the storage guard.
  auto w = std::make_shared<CountsValue>(solve_counts_reduced(*q, 60, {.dt_fraction = 1e-4}));
  CHECK(w->thinned);
  CHECK(w->times.n_steps() == 1);
  CHECK_THROWS_AS(NashFeedback(q, w), Error);
  const auto small = solve_counts_reduced(*q, 4, {.dt_fraction = 1e-2});
  CHECK_FALSE(small.thinned);
}
