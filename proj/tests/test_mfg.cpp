#include <doctest.h>

#include <cmath>

#include "common.hpp"
#include "fsmfg/mfg.hpp"

using namespace fsmfg;
using fsmfg::testing::own_mass;

namespace {

const SimplexPoint kM0(Vec{0.7, 0.3});

// sup over the nodes of a coarse grid of |a - b|, where b lives on a grid
// refined by `factor`.
double coarse_gap(const ValueFlow& a, const ValueFlow& b, int factor) {
  double s = 0.0;
  for (int k = 0; k < a.grid.n_nodes(); ++k) s = std::max(s, sup_diff(a.at(k), b.at(k * factor)));
  return s;
}

}  // namespace

TEST_CASE("reference game: residuals, mass and box") {
  auto q = own_mass();
  const auto sol = solve_mfg(*q, 0.0, kM0);
  CHECK(sol.residual.hjb <= 1e-6);
  CHECK(sol.residual.kfp <= 1e-6);
  CHECK(sol.uniqueness_guaranteed);
  for (int k = 0; k < sol.m.grid.n_nodes(); ++k) {
    const auto m = sol.m.at(k);
    CHECK(std::abs(m[0] + m[1] - 1.0) <= 1e-12);
    CHECK(m[0] >= 0.0);
    CHECK(m[1] >= 0.0);
  }
  // Terminal condition holds exactly.
  const int n = sol.u.grid.n_steps();
  for (int x = 0; x < 2; ++x) CHECK(sol.u(n, x) == q->terminal_cost(x, sol.m.at(n)));
}

TEST_CASE("halving the step shrinks the error by a fourth-order factor") {
  auto q = own_mass();
  MfgOptions opt;
  opt.tol = 1e-14;
  opt.dt = 0.1;
  const auto a = solve_mfg(*q, 0.0, kM0, opt);
  opt.dt = 0.05;
  const auto b = solve_mfg(*q, 0.0, kM0, opt);
  opt.dt = 0.025;
  const auto c = solve_mfg(*q, 0.0, kM0, opt);
  const double e1 = coarse_gap(a.u, b.u, 2);
  const double e2 = coarse_gap(b.u, c.u, 2);
  MESSAGE("step-halving differences " << e1 << " " << e2);
  CHECK(e1 / e2 >= 3.5);
}

TEST_CASE("two starts reach the same fixed point") {
  auto q = own_mass();
  const auto rep = two_start_check(*q, TimeGrid::with_step(0.0, 1.0, 1e-2), kM0);
  CHECK(rep.distance <= 1e-7);
  CHECK(rep.uniqueness_guaranteed);
}

TEST_CASE("decoupled game has the closed-form flow") {
  auto q = fsmfg::testing::with_costs(LinearCost::zero(2), LinearCost::zero(2));
  const auto sol = solve_mfg(*q, 0.0, kM0);
  CHECK(sol.iterations <= 2);
  double worst = 0.0;
  for (int k = 0; k < sol.m.grid.n_nodes(); ++k) {
    const double t = sol.m.grid.node(k);
    const double exact = 0.5 + 0.2 * std::exp(-2.0 * 1.0 * t);
    worst = std::max(worst, std::abs(sol.m.at(k)[0] - exact));
    CHECK(sol.u(k, 0) == 0.0);
  }
  CHECK(worst <= 1e-10);
}

TEST_CASE("starting at the horizon returns the terminal data") {
  auto q = own_mass();
  const auto sol = solve_mfg(*q, 1.0, kM0);
  CHECK(sol.u.grid.n_steps() == 0);
  CHECK(sol.u(0, 0) == q->terminal_cost(0, kM0.span()));
  CHECK(sol.u(0, 1) == q->terminal_cost(1, kM0.span()));
  CHECK(sol.m.at(0)[0] == 0.7);
}

TEST_CASE("a corrupted value flow has a visible residual") {
  auto q = own_mass();
  const auto sol = solve_mfg(*q, 0.0, kM0, {.dt = 1e-2});
  ValueFlow bad = sol.u;
  for (int k = 0; k < bad.grid.n_nodes(); ++k) bad.at(k)[0] += 1e-2 * std::sin(20.0 * bad.grid.node(k));
  const auto r = mfg_residual(*q, bad, sol.m);
  CHECK(r.hjb >= 1e-4);
}

TEST_CASE("shooting and Picard agree") {
  for (int d : {2, 3}) {
    auto q = own_mass(d);
    Vec w(static_cast<std::size_t>(d));
    for (int x = 0; x < d; ++x) w[static_cast<std::size_t>(x)] = (x + 1.0) / (d * (d + 1) / 2.0);
    const SimplexPoint m0(w);
    MfgOptions opt{.dt = 1e-2};
    const auto picard = solve_mfg(*q, 0.0, m0, opt);
    opt.method = MfgMethod::shooting;
    const auto shoot = solve_mfg(*q, 0.0, m0, opt);
    CHECK(sup_diff(picard.u.u, shoot.u.u) <= 1e-8);
    CHECK(sup_diff(picard.m.m, shoot.m.m) <= 1e-8);
  }
}

TEST_CASE("tangent du/dm matches a difference of Picard solves") {
  auto q = own_mass(3);
  const Vec m0{0.5, 0.3, 0.2};
  const int n = 100;
  CharacteristicSolver solver(*q);
  const auto res = solver.solve(0.0, n, m0);
  CHECK(res.residual <= 1e-10);
  const double h = 1e-4;
  MfgOptions opt{.dt = 1.0 / n, .tol = 1e-14};
  for (auto [y, z] : {std::pair{0, 1}, std::pair{2, 0}}) {
    const TangentVector mu = TangentVector::edge(3, y, z);
    Vec plus = m0, minus = m0;
    for (int i = 0; i < 3; ++i) {
      plus[static_cast<std::size_t>(i)] += h * mu[static_cast<std::size_t>(i)];
      minus[static_cast<std::size_t>(i)] -= h * mu[static_cast<std::size_t>(i)];
    }
    const auto up = solve_mfg(*q, 0.0, SimplexPoint(plus), opt);
    const auto dn = solve_mfg(*q, 0.0, SimplexPoint(minus), opt);
    for (int x = 0; x < 3; ++x) {
      double tangent = 0.0;
      for (int i = 0; i < 3; ++i) tangent += res.du_dm(x, i) * mu[static_cast<std::size_t>(i)];
      const double fd = (up.u(0, x) - dn.u(0, x)) / (2.0 * h);
      CHECK(std::abs(tangent - fd) <= 1e-6);
    }
  }
}

TEST_CASE("shooting value at t0 matches the Picard flow") {
  auto q = own_mass();
  CharacteristicSolver solver(*q);
  const auto res = solver.solve(0.25, 75, kM0.span());
  const auto sol = solve_mfg(*q, 0.25, kM0, {.dt = 1e-2, .tol = 1e-14});
  CHECK(sup_diff(res.u0, sol.u.at(0)) <= 1e-9);
}

TEST_CASE("a priori estimate is Lipschitz in the initial measure") {
  auto q = own_mass();
  const auto near = a_priori_check(*q, kM0, SimplexPoint(Vec{0.69, 0.31}), {.dt = 1e-2});
  const auto far = a_priori_check(*q, kM0, SimplexPoint(Vec{0.5, 0.5}), {.dt = 1e-2});
  CHECK(near.du > 0.0);
  CHECK(near.ratio_u <= 2.0);
  CHECK(near.ratio_m <= 1.0 + 1e-12);
  CHECK(far.ratio_u <= 2.0);
  const auto same = a_priori_check(*q, kM0, kM0, {.dt = 1e-2});
  CHECK(same.du == 0.0);
  CHECK(same.dm == 0.0);
}

TEST_CASE("non-monotone costs are flagged, not rejected") {
  auto q = fsmfg::testing::with_costs(LinearCost::own_mass(2, -0.2), LinearCost::zero(2));
  const auto sol = solve_mfg(*q, 0.0, kM0, {.dt = 1e-2});
  CHECK_FALSE(sol.uniqueness_guaranteed);
  CHECK(sol.residual.hjb <= 1e-4);
}

TEST_CASE("input validation") {
  auto q = own_mass();
  CHECK_THROWS_AS(solve_mfg(*q, 0.0, SimplexPoint(Vec{0.2, 0.3, 0.5})), Error);
  CHECK_THROWS_AS(solve_mfg(*q, 0.0, kM0, {.damping = 0.0}), Error);
  CHECK_THROWS_AS(solve_mfg(*q, TimeGrid(0.0, 2.0, 10), kM0), Error);
  CHECK_THROWS_AS(SimplexPoint(Vec{0.6, 0.6}), Error);
  CHECK_THROWS_AS(TimeGrid::with_step(0.0, 1.0, 0.0), Error);
}

TEST_CASE("Hermite interpolation reproduces node values") {
  auto q = own_mass();
  const auto sol = solve_mfg(*q, 0.0, kM0, {.dt = 1e-2});
  Vec out(2);
  sol.u.interpolate(sol.u.grid.node(37), out);
  CHECK(sup_diff(out, sol.u.at(37)) <= 1e-14);
  sol.m.interpolate(0.375, out);
  Vec lo(2), hi(2);
  sol.m.interpolate(0.37, lo);
  sol.m.interpolate(0.38, hi);
  CHECK(std::abs(out[0] - 0.5 * (lo[0] + hi[0])) <= 1e-5);
  CHECK(sol.m.lipschitz_constant() <= 2.0 * 1.5);
}
