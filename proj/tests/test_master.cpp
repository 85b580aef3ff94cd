#include <doctest.h>

#include <cmath>
#include <set>

#include "common.hpp"
#include "fsmfg/master.hpp"
#include "fsmfg/rng.hpp"

using namespace fsmfg;
using fsmfg::testing::own_mass;

TEST_CASE("simplex grid ranks, neighbours and stencils") {
  for (auto [d, n] : {std::pair{2, 5}, std::pair{3, 6}, std::pair{4, 3}}) {
    SimplexGrid g(d, n);
    CHECK(static_cast<std::size_t>(g.size()) == SimplexGrid::node_count(d, n));
    std::set<std::vector<int>> seen;
    for (int i = 0; i < g.size(); ++i) {
      const auto k = g.composition(i);
      CHECK(g.rank(k) == i);
      int s = 0;
      for (int v : k) s += v;
      CHECK(s == n);
      seen.insert(std::vector<int>(k.begin(), k.end()));
      for (int y = 0; y < d; ++y) {
        for (int z = 0; z < d; ++z) {
          if (y == z) continue;
          const int j = g.neighbour(i, y, z);
          if (k[static_cast<std::size_t>(y)] == 0) {
            CHECK(j == -1);
          } else {
            REQUIRE(j >= 0);
            const auto kj = g.composition(j);
            CHECK(kj[static_cast<std::size_t>(y)] == k[static_cast<std::size_t>(y)] - 1);
            CHECK(kj[static_cast<std::size_t>(z)] == k[static_cast<std::size_t>(z)] + 1);
          }
        }
      }
    }
    CHECK(static_cast<int>(seen.size()) == g.size());

    // Stencils reproduce the point they were built for.
    CounterRng rng{17, static_cast<std::uint64_t>(d)};
    for (int trial = 0; trial < 50; ++trial) {
      const Vec m = rng.simplex(d);
      const auto st = g.locate(m);
      Vec back(static_cast<std::size_t>(d), 0.0);
      double wsum = 0.0;
      for (int s = 0; s < st.size; ++s) {
        CHECK(st.weights[s] > 0.0);
        wsum += st.weights[s];
        const Vec p = g.point(st.nodes[s]);
        for (int x = 0; x < d; ++x) back[static_cast<std::size_t>(x)] += st.weights[s] * p[static_cast<std::size_t>(x)];
      }
      CHECK(std::abs(wsum - 1.0) <= 1e-12);
      CHECK(sup_diff(back, m) <= 1e-12);
    }
  }
  CHECK(SimplexGrid::node_count(3, 20) == 231);
}

TEST_CASE("measure-free costs give a zero measure derivative") {
  auto q = fsmfg::testing::measure_free(3);
  const auto f = build_master_field(q, SimplexGrid(3, 4), TimeGrid::with_step(0.0, 1.0, 0.05));
  double worst = 0.0;
  for (double v : f.D1) worst = std::max(worst, std::abs(v));
  CHECK(worst <= 1e-10);
  // U does not depend on m either.
  for (int k = 0; k < f.times.n_nodes(); ++k)
    for (int x = 0; x < 3; ++x)
      for (int i = 1; i < f.grid.size(); ++i) CHECK(std::abs(f.value(k, x, i) - f.value(k, x, 0)) <= 1e-10);
}

TEST_CASE("at the horizon U is the terminal cost") {
  auto q = own_mass();
  const auto f = build_master_field(q, SimplexGrid(2, 10), TimeGrid::with_step(0.0, 1.0, 0.05));
  const int K = f.times.n_steps();
  for (int i = 0; i < f.grid.size(); ++i) {
    const Vec m = f.grid.point(i);
    for (int x = 0; x < 2; ++x) CHECK(f.value(K, x, i) == q->terminal_cost(x, m));
    // D^m G(x, m, 1) . e_z = delta_{xz} - delta_{x0} for own-mass G.
    CHECK(f.derivative(K, 1, i, 0, 1) == doctest::Approx(1.0));
    CHECK(f.derivative(K, 0, i, 0, 1) == doctest::Approx(-1.0));
  }
}

TEST_CASE("reference field: identity, finite differences, residual") {
  auto q = own_mass(3);
  const int n = 8;
  const double dt = 1e-2;
  const auto f = build_master_field(q, SimplexGrid(3, n), TimeGrid::with_step(0.0, 1.0, dt));
  CHECK(f.uniqueness_guaranteed);
  const auto id = derivative_identity_check(f);
  CHECK(id.identity <= 1e-8);
  CHECK(id.direction <= 1e-8);
  const double h = 1.0 / n;
  const double fd = finite_difference_gap(f);
  MESSAGE("finite-difference gap " << fd << " against h^2 " << h * h);
  CHECK(fd <= h * h + 2e-12);
  const double res = master_residual(*q, f);
  MESSAGE("master residual " << res);
  CHECK(res <= 0.1);
  const auto reg = regularity_probe(f);
  CHECK(std::isfinite(reg.lip_U));
  CHECK(std::isfinite(reg.lip_DmU));
}

TEST_CASE("a corrupted field has a larger residual") {
  auto q = own_mass();
  auto f = build_master_field(q, SimplexGrid(2, 10), TimeGrid::with_step(0.0, 1.0, 0.02));
  const double clean = master_residual(*q, f);
  for (int k = 0; k < f.times.n_nodes(); ++k)
    for (int i = 0; i < f.grid.size(); ++i) f.U[f.index(k, 0, i)] += 0.05 * std::sin(7.0 * f.times.node(k));
  const double bad = master_residual(*q, f);
  CHECK(bad >= clean + 0.1);
}

TEST_CASE("linearized system matches the shooting tangent") {
  for (int d : {2, 3}) {
    auto q = own_mass(d);
    Vec w(static_cast<std::size_t>(d), 0.0);
    for (int x = 0; x < d; ++x) w[static_cast<std::size_t>(x)] = (x + 1.0) / (d * (d + 1) / 2.0);
    const SimplexPoint m0(w);
    const int steps = 100;
    const auto base = solve_mfg(*q, TimeGrid(0.0, 1.0, steps), m0, {.tol = 1e-14});
    CharacteristicSolver solver(*q);
    const auto shoot = solver.solve(0.0, steps, m0.span());
    const TangentVector mu = TangentVector::edge(d, 0, d - 1);
    const auto lin = solve_linearized(*q, base, mu, {.tol = 1e-14});
    for (int x = 0; x < d; ++x) {
      double tangent = 0.0;
      for (int z = 0; z < d; ++z) tangent += shoot.du_dm(x, z) * mu[static_cast<std::size_t>(z)];
      CHECK(std::abs(lin.v_at(0)[static_cast<std::size_t>(x)] - tangent) <= 1e-8);
    }
    // Linear in mu0: doubling the direction doubles v.
    Vec twice = mu.components();
    for (double& v : twice) v *= 2.0;
    const auto lin2 = solve_linearized(*q, base, TangentVector(twice), {.tol = 1e-14});
    for (int x = 0; x < d; ++x)
      CHECK(std::abs(lin2.v_at(0)[static_cast<std::size_t>(x)] - 2.0 * lin.v_at(0)[static_cast<std::size_t>(x)]) <=
            1e-10);
    const auto lin0 = solve_linearized(*q, base, TangentVector::zero(d));
    CHECK(sup_norm(lin0.v) == 0.0);
    CHECK(sup_norm(lin0.mu) == 0.0);
  }
}

TEST_CASE("tabulated and characteristic evaluators agree at grid nodes") {
  auto q = own_mass(3);
  const double dt = 1e-2;
  const auto f = build_master_field(q, SimplexGrid(3, 6), TimeGrid::with_step(0.0, 1.0, dt));
  CharacteristicEvaluator ev(q, dt);
  for (int node : {0, 7, 13, f.grid.size() - 1}) {
    const Vec m = f.grid.point(node);
    for (int k : {0, 30, 99}) {
      const double t = f.times.node(k);
      const auto a = f.evaluate(t, m);
      const auto b = ev.evaluate(t, m);
      CHECK(sup_diff(a.U, b.U) <= 1e-9);
      CHECK((a.D - b.D).cwiseAbs().maxCoeff() <= 1e-8);
      CHECK(a.D.col(0).cwiseAbs().maxCoeff() == 0.0);
    }
  }
}

TEST_CASE("direction independence of mu . DmU(m, y)") {
  auto q = own_mass(3);
  CharacteristicEvaluator ev(q, 1e-2);
  const Vec m{0.2, 0.5, 0.3};
  const auto p = ev.evaluate(0.3, m);
  const TangentVector mu(Vec{0.3, -0.1, -0.2});
  for (int x = 0; x < 3; ++x) {
    double ref = 0.0;
    for (int y = 0; y < 3; ++y) {
      double s = 0.0;
      for (int z = 0; z < 3; ++z) s += derivative_entry(p.D, x, y, z) * mu[static_cast<std::size_t>(z)];
      if (y == 0) ref = s;
      CHECK(std::abs(s - ref) <= 1e-12);
    }
  }
}

TEST_CASE("evaluation rejects points off the simplex") {
  auto q = own_mass();
  const auto f = build_master_field(q, SimplexGrid(2, 4), TimeGrid::with_step(0.0, 1.0, 0.1));
  CHECK_THROWS_AS(f.evaluate(0.5, Vec{0.7, 0.7}), Error);
  CHECK_THROWS_AS(f.evaluate(1.5, Vec{0.5, 0.5}), Error);
}
