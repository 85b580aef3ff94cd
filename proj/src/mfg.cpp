#include "fsmfg/mfg.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace fsmfg {

namespace {

constexpr double kNegativityTolerance = 1e-12;

std::string node_context(int k, double t) {
  std::ostringstream os;
  os << "node=" << k << " t=" << t;
  return os.str();
}

// Cubic Hermite interpolation between nodes k and k+1 at fraction s.
void hermite(const Vec& val, const Vec& der, int d, int k, double s, double dt, std::span<double> out) {
  const double s2 = s * s, s3 = s2 * s;
  const double h00 = 2 * s3 - 3 * s2 + 1, h10 = s3 - 2 * s2 + s, h01 = -2 * s3 + 3 * s2, h11 = s3 - s2;
  const std::size_t a = static_cast<std::size_t>(k * d), b = static_cast<std::size_t>((k + 1) * d);
  for (std::size_t x = 0; x < static_cast<std::size_t>(d); ++x) {
    out[x] = h00 * val[a + x] + h10 * dt * der[a + x] + h01 * val[b + x] + h11 * dt * der[b + x];
  }
}

// Hermite value at the midpoint of [k, k+1].
void hermite_mid(const Vec& val, const Vec& der, int d, int k, double dt, std::span<double> out) {
  const std::size_t a = static_cast<std::size_t>(k * d), b = static_cast<std::size_t>((k + 1) * d);
  for (std::size_t x = 0; x < static_cast<std::size_t>(d); ++x) {
    out[x] = 0.5 * (val[a + x] + val[b + x]) + dt / 8.0 * (der[a + x] - der[b + x]);
  }
}

void interpolate_flow(const TimeGrid& g, int d, const Vec& val, const Vec& der, double t, std::span<double> out) {
  if (g.n_steps() == 0) {
    std::copy_n(val.begin(), d, out.begin());
    return;
  }
  const int k = g.locate(t);
  const double s = std::clamp((t - g.node(k)) / g.dt(), 0.0, 1.0);
  hermite(val, der, d, k, s, g.dt(), out);
}

// du/dt = H(x, D^x u) - F(x, m).
class HjbRhs {
public:
  explicit HjbRhs(const GameSpec& spec) : spec_(spec), p_(static_cast<std::size_t>(spec.d())) {}

  void operator()(std::span<const double> u, std::span<const double> m, std::span<double> out) {
    const int d = spec_.d();
    for (int x = 0; x < d; ++x) {
      for (int y = 0; y < d; ++y) p_[static_cast<std::size_t>(y)] = u[static_cast<std::size_t>(y)] - u[static_cast<std::size_t>(x)];
      out[static_cast<std::size_t>(x)] = spec_.hamiltonian(x, p_) - spec_.running_cost(x, m);
    }
  }

private:
  const GameSpec& spec_;
  Vec p_;
};

// dm_x/dt = sum_{y != x} m_y a*_x(y) - m_x sum_{z != x} a*_z(x).
class KfpRhs {
public:
  explicit KfpRhs(const GameSpec& spec)
      : spec_(spec), p_(static_cast<std::size_t>(spec.d())),
        rates_(static_cast<std::size_t>(spec.d() * spec.d())) {}

  void operator()(std::span<const double> m, std::span<const double> u, std::span<double> out) {
    const std::size_t d = static_cast<std::size_t>(spec_.d());
    for (std::size_t x = 0; x < d; ++x) {
      for (std::size_t y = 0; y < d; ++y) p_[y] = u[y] - u[x];
      spec_.alpha_star(static_cast<int>(x), p_, std::span<double>(rates_).subspan(x * d, d));
    }
    for (std::size_t x = 0; x < d; ++x) {
      double in = 0.0, outflow = 0.0;
      for (std::size_t y = 0; y < d; ++y) {
        if (y == x) continue;
        in += m[y] * rates_[y * d + x];
        outflow += rates_[x * d + y];
      }
      out[x] = in - m[x] * outflow;
    }
  }

private:
  const GameSpec& spec_;
  Vec p_;
  Vec rates_;
};

void clip_measure(std::span<double> m, int k, double t) {
  double sum = 0.0;
  bool clipped = false;
  for (double& v : m) {
    if (!std::isfinite(v)) throw Error("mfg", "solve_kfp_forward", "non-finite mass", node_context(k, t));
    if (v < 0.0) {
      if (v < -kNegativityTolerance) {
        throw Error("mfg", "solve_kfp_forward", "negative mass beyond tolerance", node_context(k, t));
      }
      v = 0.0;
      clipped = true;
    }
    sum += v;
  }
  if (clipped) {
    for (double& v : m) v /= sum;
  }
}

void check_same_grid(const TimeGrid& a, const TimeGrid& b, const char* op) {
  if (a.n_steps() != b.n_steps() || a.t0() != b.t0() || a.T() != b.T()) {
    throw Error("mfg", op, "flows live on different time grids");
  }
}

}  // namespace

ValueFlow::ValueFlow(TimeGrid g, int dim)
    : grid(g), d(dim), u(static_cast<std::size_t>(g.n_nodes() * dim), 0.0),
      du(static_cast<std::size_t>(g.n_nodes() * dim), 0.0) {}

void ValueFlow::interpolate(double t, std::span<double> out) const { interpolate_flow(grid, d, u, du, t, out); }

MeasureFlow::MeasureFlow(TimeGrid g, int dim)
    : grid(g), d(dim), m(static_cast<std::size_t>(g.n_nodes() * dim), 0.0),
      dm(static_cast<std::size_t>(g.n_nodes() * dim), 0.0) {}

MeasureFlow MeasureFlow::constant(TimeGrid g, const SimplexPoint& m0) {
  MeasureFlow f(g, m0.dim());
  for (int k = 0; k < g.n_nodes(); ++k) std::copy(m0.weights().begin(), m0.weights().end(), f.at(k).begin());
  return f;
}

void MeasureFlow::interpolate(double t, std::span<double> out) const { interpolate_flow(grid, d, m, dm, t, out); }

double MeasureFlow::lipschitz_constant() const {
  double best = 0.0;
  for (int k = 0; k < grid.n_nodes(); ++k) {
    for (int j = k + 1; j < grid.n_nodes(); ++j) {
      best = std::max(best, euclidean_diff(at(k), at(j)) / (grid.node(j) - grid.node(k)));
    }
  }
  return best;
}

ValueFlow solve_hjb_backward(const GameSpec& spec, const MeasureFlow& m) {
  const TimeGrid& g = m.grid;
  const int d = spec.d();
  if (m.d != d) throw Error("mfg", "solve_hjb_backward", "measure flow has wrong dimension");
  ValueFlow v(g, d);
  HjbRhs f(spec);
  const int n = g.n_steps();
  {
    auto uT = v.at(n);
    for (int x = 0; x < d; ++x) uT[static_cast<std::size_t>(x)] = spec.terminal_cost(x, m.at(n));
    f(uT, m.at(n), std::span<double>(v.du).subspan(static_cast<std::size_t>(n * d), static_cast<std::size_t>(d)));
  }
  const std::size_t ds = static_cast<std::size_t>(d);
  Vec mid(ds), k1(ds), k2(ds), k3(ds), k4(ds), stage(ds);
  const double dt = g.dt();
  for (int k = n - 1; k >= 0; --k) {
    hermite_mid(m.m, m.dm, d, k, dt, mid);
    const auto up = v.at(k + 1);
    std::copy_n(v.du.begin() + static_cast<std::ptrdiff_t>((k + 1) * d), d, k1.begin());
    for (std::size_t x = 0; x < ds; ++x) stage[x] = up[x] - 0.5 * dt * k1[x];
    f(stage, mid, k2);
    for (std::size_t x = 0; x < ds; ++x) stage[x] = up[x] - 0.5 * dt * k2[x];
    f(stage, mid, k3);
    for (std::size_t x = 0; x < ds; ++x) stage[x] = up[x] - dt * k3[x];
    f(stage, m.at(k), k4);
    auto uk = v.at(k);
    for (std::size_t x = 0; x < ds; ++x) {
      uk[x] = up[x] - dt / 6.0 * (k1[x] + 2 * k2[x] + 2 * k3[x] + k4[x]);
      if (!std::isfinite(uk[x])) {
        throw Error("mfg", "solve_hjb_backward", "divergence in HJB integration", node_context(k, g.node(k)));
      }
    }
    f(uk, m.at(k), std::span<double>(v.du).subspan(static_cast<std::size_t>(k * d), ds));
  }
  return v;
}

MeasureFlow solve_kfp_forward(const GameSpec& spec, const ValueFlow& u, const SimplexPoint& m0) {
  const TimeGrid& g = u.grid;
  const int d = spec.d();
  if (u.d != d || m0.dim() != d) throw Error("mfg", "solve_kfp_forward", "dimension mismatch");
  MeasureFlow mf(g, d);
  KfpRhs f(spec);
  const std::size_t ds = static_cast<std::size_t>(d);
  std::copy(m0.weights().begin(), m0.weights().end(), mf.at(0).begin());
  f(mf.at(0), u.at(0), std::span<double>(mf.dm).subspan(0, ds));
  Vec mid(ds), k1(ds), k2(ds), k3(ds), k4(ds), stage(ds);
  const double dt = g.dt();
  for (int k = 0; k < g.n_steps(); ++k) {
    hermite_mid(u.u, u.du, d, k, dt, mid);
    const auto mk = mf.at(k);
    std::copy_n(mf.dm.begin() + static_cast<std::ptrdiff_t>(k * d), d, k1.begin());
    for (std::size_t x = 0; x < ds; ++x) stage[x] = mk[x] + 0.5 * dt * k1[x];
    f(stage, mid, k2);
    for (std::size_t x = 0; x < ds; ++x) stage[x] = mk[x] + 0.5 * dt * k2[x];
    f(stage, mid, k3);
    for (std::size_t x = 0; x < ds; ++x) stage[x] = mk[x] + dt * k3[x];
    f(stage, u.at(k + 1), k4);
    auto next = mf.at(k + 1);
    for (std::size_t x = 0; x < ds; ++x) next[x] = mk[x] + dt / 6.0 * (k1[x] + 2 * k2[x] + 2 * k3[x] + k4[x]);
    clip_measure(next, k + 1, g.node(k + 1));
    f(next, u.at(k + 1), std::span<double>(mf.dm).subspan(static_cast<std::size_t>((k + 1) * d), ds));
  }
  return mf;
}

namespace {

MfgSolution finish(const GameSpec& spec, ValueFlow u, MeasureFlow m, int iterations, double update) {
  MfgSolution sol{std::move(u), std::move(m), iterations, update, {}, spec.monotone()};
  sol.residual = mfg_residual(spec, sol.u, sol.m);
  return sol;
}

MfgSolution solve_by_shooting(const GameSpec& spec, const TimeGrid& grid, const SimplexPoint& m0,
                              const MfgOptions& opt) {
  CharacteristicSolver solver(spec, opt.tol, std::max(opt.max_iter, 1));
  const auto r = solver.solve(grid.t0(), grid.n_steps(), m0.span());
  ValueFlow u(grid, spec.d());
  MeasureFlow m(grid, spec.d());
  solver.trajectory(grid.t0(), grid.n_steps(), r.u0, m0.span(), u.u, m.m);
  HjbRhs hf(spec);
  KfpRhs kf(spec);
  const std::size_t ds = static_cast<std::size_t>(spec.d());
  for (int k = 0; k < grid.n_nodes(); ++k) {
    clip_measure(m.at(k), k, grid.node(k));
    hf(u.at(k), m.at(k), std::span<double>(u.du).subspan(static_cast<std::size_t>(k) * ds, ds));
    kf(m.at(k), u.at(k), std::span<double>(m.dm).subspan(static_cast<std::size_t>(k) * ds, ds));
  }
  return finish(spec, std::move(u), std::move(m), r.iterations, r.residual);
}

}  // namespace

MfgSolution solve_mfg(const GameSpec& spec, const TimeGrid& grid, const SimplexPoint& m0, const MfgOptions& opt,
                      const MeasureFlow* guess) {
  if (m0.dim() != spec.d()) throw Error("mfg", "solve_mfg", "initial measure has wrong dimension");
  if (!(opt.damping > 0.0 && opt.damping <= 1.0)) {
    throw Error("mfg", "solve_mfg", "damping must lie in (0, 1]", "damping=" + std::to_string(opt.damping));
  }
  if (!(opt.tol > 0.0)) throw Error("mfg", "solve_mfg", "tolerance must be positive");
  if (std::abs(grid.T() - spec.T()) > 1e-12) throw Error("mfg", "solve_mfg", "grid must end at the horizon T");

  if (grid.n_steps() == 0) {
    MeasureFlow m = MeasureFlow::constant(grid, m0);
    ValueFlow u = solve_hjb_backward(spec, m);
    return finish(spec, std::move(u), std::move(m), 0, 0.0);
  }
  if (opt.method == MfgMethod::shooting) return solve_by_shooting(spec, grid, m0, opt);

  MeasureFlow flow = MeasureFlow::constant(grid, m0);
  if (guess) {
    check_same_grid(guess->grid, grid, "solve_mfg");
    flow = *guess;
    std::copy(m0.weights().begin(), m0.weights().end(), flow.at(0).begin());
  }
  const double theta = opt.damping;
  std::optional<MeasureFlow> previous_image;
  double update = std::numeric_limits<double>::infinity();
  for (int it = 1; it <= opt.max_iter; ++it) {
    ValueFlow u = solve_hjb_backward(spec, flow);
    MeasureFlow image = solve_kfp_forward(spec, u, m0);
    const double gap = sup_diff(image.m, flow.m);
    update = previous_image ? sup_diff(image.m, previous_image->m) : gap;
    if (gap < opt.tol) return finish(spec, std::move(u), std::move(image), it, gap);
    if (update < opt.tol) {
      // The image has stopped moving: take it undamped and confirm.
      ValueFlow u2 = solve_hjb_backward(spec, image);
      MeasureFlow check = solve_kfp_forward(spec, u2, m0);
      const double fixed = sup_diff(check.m, image.m);
      if (fixed < opt.tol) return finish(spec, std::move(u2), std::move(image), it, fixed);
      flow = std::move(check);
      previous_image.reset();
      continue;
    }
    for (std::size_t i = 0; i < flow.m.size(); ++i) {
      flow.m[i] = (1.0 - theta) * flow.m[i] + theta * image.m[i];
      flow.dm[i] = (1.0 - theta) * flow.dm[i] + theta * image.dm[i];
    }
    previous_image = std::move(image);
  }
  std::ostringstream os;
  os << "last_update=" << update << " max_iter=" << opt.max_iter;
  throw Error("mfg", "solve_mfg", "Picard iteration did not converge", os.str());
}

MfgSolution solve_mfg(const GameSpec& spec, double t0, const SimplexPoint& m0, const MfgOptions& opt) {
  return solve_mfg(spec, TimeGrid::with_step(t0, spec.T(), opt.dt), m0, opt);
}

MfgResidual mfg_residual(const GameSpec& spec, const ValueFlow& u, const MeasureFlow& m) {
  check_same_grid(u.grid, m.grid, "mfg_residual");
  const TimeGrid& g = u.grid;
  MfgResidual r;
  if (g.n_steps() < 2) return r;
  const std::size_t ds = static_cast<std::size_t>(spec.d());
  HjbRhs hf(spec);
  KfpRhs kf(spec);
  Vec fu(ds), fm(ds);
  const double inv = 1.0 / (2.0 * g.dt());
  for (int k = 1; k < g.n_steps(); ++k) {
    hf(u.at(k), m.at(k), fu);
    kf(m.at(k), u.at(k), fm);
    for (std::size_t x = 0; x < ds; ++x) {
      r.hjb = std::max(r.hjb, std::abs((u.at(k + 1)[x] - u.at(k - 1)[x]) * inv - fu[x]));
      r.kfp = std::max(r.kfp, std::abs((m.at(k + 1)[x] - m.at(k - 1)[x]) * inv - fm[x]));
    }
  }
  return r;
}

MfgResidual mfg_residual(const GameSpec& spec, const MfgSolution& sol) { return mfg_residual(spec, sol.u, sol.m); }

APrioriEstimate a_priori_check(const GameSpec& spec, const SimplexPoint& m0a, const SimplexPoint& m0b,
                               const MfgOptions& opt, double t0) {
  const auto grid = TimeGrid::with_step(t0, spec.T(), opt.dt);
  const auto a = solve_mfg(spec, grid, m0a, opt);
  const auto b = solve_mfg(spec, grid, m0b, opt);
  APrioriEstimate est;
  est.du = sup_diff(a.u.u, b.u.u);
  est.dm = sup_diff(a.m.m, b.m.m);
  const double gap = euclidean_diff(m0a.span(), m0b.span());
  if (gap > 0.0) {
    est.ratio_u = est.du / gap;
    est.ratio_m = est.dm / gap;
  }
  return est;
}

TwoStartReport two_start_check(const GameSpec& spec, const TimeGrid& grid, const SimplexPoint& m0,
                               const MfgOptions& opt) {
  const auto a = solve_mfg(spec, grid, m0, opt);
  MeasureFlow uniform = MeasureFlow::constant(grid, SimplexPoint::uniform(spec.d()));
  const auto b = solve_mfg(spec, grid, m0, opt, &uniform);
  return {std::max(sup_diff(a.m.m, b.m.m), sup_diff(a.u.u, b.u.u)), spec.monotone()};
}

// ---------------------------------------------------------------------------

struct CharacteristicSolver::Workspace {
  explicit Workspace(int d)
      : d(d), n(2 * d), p(static_cast<std::size_t>(d)), rates(static_cast<std::size_t>(d * d)),
        jac(static_cast<std::size_t>(d * d * d)), dF(static_cast<std::size_t>(d * d)),
        Df(static_cast<std::size_t>(4 * d * d)), unit(static_cast<std::size_t>(d), 0.0) {
    const std::size_t zs = static_cast<std::size_t>(n), ps = static_cast<std::size_t>(n * n);
    for (auto* v : {&z, &zs1, &k1, &k2, &k3, &k4}) v->resize(zs);
    for (auto* v : {&phi, &phis, &q1, &q2, &q3, &q4}) v->resize(ps);
  }
  int d, n;
  Vec p, rates, jac, dF, Df, unit;
  Vec z, zs1, k1, k2, k3, k4;
  Vec phi, phis, q1, q2, q3, q4;
};

CharacteristicSolver::CharacteristicSolver(const GameSpec& spec, double tol, int max_iter)
    : spec_(spec), tol_(tol), max_iter_(max_iter) {}

void CharacteristicSolver::rhs(Workspace& w, const double* z, const double* phi, double* dz, double* dphi) const {
  const int d = w.d;
  const std::size_t ds = static_cast<std::size_t>(d);
  const double* u = z;
  const std::span<const double> m(z + d, ds);
  for (std::size_t x = 0; x < ds; ++x) {
    for (std::size_t y = 0; y < ds; ++y) w.p[y] = u[y] - u[x];
    spec_.alpha_star(static_cast<int>(x), w.p, std::span<double>(w.rates).subspan(x * ds, ds));
    dz[x] = spec_.hamiltonian(static_cast<int>(x), w.p) - spec_.running_cost(static_cast<int>(x), m);
    if (phi) spec_.alpha_star_jacobian(static_cast<int>(x), w.p, std::span<double>(w.jac).subspan(x * ds * ds, ds * ds));
  }
  for (std::size_t x = 0; x < ds; ++x) {
    double in = 0.0, out = 0.0;
    for (std::size_t y = 0; y < ds; ++y) {
      if (y == x) continue;
      in += m[y] * w.rates[y * ds + x];
      out += w.rates[x * ds + y];
    }
    dz[ds + x] = in - m[x] * out;
  }
  if (!phi) return;

  // Df, row-major 2d x 2d.
  const std::size_t n = 2 * ds;
  std::fill(w.Df.begin(), w.Df.end(), 0.0);
  auto D = [&](std::size_t r, std::size_t c) -> double& { return w.Df[r * n + c]; };
  for (std::size_t zc = 0; zc < ds; ++zc) {
    w.unit[zc] = 1.0;
    for (std::size_t x = 0; x < ds; ++x) w.dF[x * ds + zc] = spec_.running_cost_derivative(static_cast<int>(x), m, w.unit);
    w.unit[zc] = 0.0;
  }
  // d a*_c(y) / d u_v, with p^y_k = u_k - u_y.
  auto drate = [&](std::size_t y, std::size_t c, std::size_t v) {
    const double* J = w.jac.data() + y * ds * ds + c * ds;
    double val = J[v];
    if (v == y) {
      for (std::size_t k = 0; k < ds; ++k) val -= J[k];
    }
    return val;
  };
  for (std::size_t x = 0; x < ds; ++x) {
    double out = 0.0;
    for (std::size_t y = 0; y < ds; ++y) {
      if (y == x) continue;
      D(x, y) = -w.rates[x * ds + y];
      out += w.rates[x * ds + y];
      D(ds + x, ds + y) = w.rates[y * ds + x];
    }
    D(x, x) = out;
    D(ds + x, ds + x) = -out;
    for (std::size_t zc = 0; zc < ds; ++zc) D(x, ds + zc) = -w.dF[x * ds + zc];
    for (std::size_t v = 0; v < ds; ++v) {
      double val = 0.0;
      for (std::size_t y = 0; y < ds; ++y) {
        if (y == x) continue;
        val += m[y] * drate(y, x, v);
        val -= m[x] * drate(x, y, v);
      }
      D(ds + x, v) = val;
    }
  }
  // dphi = Df * phi, phi column-major.
  for (std::size_t c = 0; c < n; ++c) {
    const double* col = phi + c * n;
    double* dcol = dphi + c * n;
    for (std::size_t r = 0; r < n; ++r) {
      double s = 0.0;
      const double* row = w.Df.data() + r * n;
      for (std::size_t k = 0; k < n; ++k) s += row[k] * col[k];
      dcol[r] = s;
    }
  }
}

double CharacteristicSolver::integrate(Workspace& w, double t0, int n_steps, std::span<const double> u0,
                                       std::span<const double> m0, bool tangent, Vec& residual, Matrix* Ru,
                                       Matrix* Rm) const {
  const std::size_t ds = static_cast<std::size_t>(w.d), n = 2 * ds;
  std::copy(u0.begin(), u0.end(), w.z.begin());
  std::copy(m0.begin(), m0.end(), w.z.begin() + static_cast<std::ptrdiff_t>(ds));
  if (tangent) {
    std::fill(w.phi.begin(), w.phi.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) w.phi[i * n + i] = 1.0;
  }
  const double dt = n_steps > 0 ? (spec_.T() - t0) / n_steps : 0.0;
  double* P = tangent ? w.phi.data() : nullptr;
  double* PS = tangent ? w.phis.data() : nullptr;
  auto q = [&](Vec& v) { return tangent ? v.data() : nullptr; };
  for (int s = 0; s < n_steps; ++s) {
    rhs(w, w.z.data(), P, w.k1.data(), q(w.q1));
    for (std::size_t i = 0; i < n; ++i) w.zs1[i] = w.z[i] + 0.5 * dt * w.k1[i];
    if (tangent) for (std::size_t i = 0; i < n * n; ++i) PS[i] = P[i] + 0.5 * dt * w.q1[i];
    rhs(w, w.zs1.data(), PS, w.k2.data(), q(w.q2));
    for (std::size_t i = 0; i < n; ++i) w.zs1[i] = w.z[i] + 0.5 * dt * w.k2[i];
    if (tangent) for (std::size_t i = 0; i < n * n; ++i) PS[i] = P[i] + 0.5 * dt * w.q2[i];
    rhs(w, w.zs1.data(), PS, w.k3.data(), q(w.q3));
    for (std::size_t i = 0; i < n; ++i) w.zs1[i] = w.z[i] + dt * w.k3[i];
    if (tangent) for (std::size_t i = 0; i < n * n; ++i) PS[i] = P[i] + dt * w.q3[i];
    rhs(w, w.zs1.data(), PS, w.k4.data(), q(w.q4));
    for (std::size_t i = 0; i < n; ++i) w.z[i] += dt / 6.0 * (w.k1[i] + 2 * w.k2[i] + 2 * w.k3[i] + w.k4[i]);
    if (tangent) {
      for (std::size_t i = 0; i < n * n; ++i) P[i] += dt / 6.0 * (w.q1[i] + 2 * w.q2[i] + 2 * w.q3[i] + w.q4[i]);
    }
  }
  const std::span<const double> mT(w.z.data() + ds, ds);
  residual.resize(ds);
  double sup = 0.0;
  for (std::size_t x = 0; x < ds; ++x) {
    residual[x] = w.z[x] - spec_.terminal_cost(static_cast<int>(x), mT);
    if (!std::isfinite(residual[x])) return std::numeric_limits<double>::infinity();
    sup = std::max(sup, std::abs(residual[x]));
  }
  if (tangent) {
    Matrix DG(static_cast<Eigen::Index>(ds), static_cast<Eigen::Index>(ds));
    for (std::size_t zc = 0; zc < ds; ++zc) {
      w.unit[zc] = 1.0;
      for (std::size_t x = 0; x < ds; ++x) {
        DG(static_cast<Eigen::Index>(x), static_cast<Eigen::Index>(zc)) =
            spec_.terminal_cost_derivative(static_cast<int>(x), mT, w.unit);
      }
      w.unit[zc] = 0.0;
    }
    const Eigen::Map<const Matrix> Phi(w.phi.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    const auto d = static_cast<Eigen::Index>(ds);
    *Ru = Phi.block(0, 0, d, d) - DG * Phi.block(d, 0, d, d);
    *Rm = Phi.block(0, d, d, d) - DG * Phi.block(d, d, d, d);
  }
  return sup;
}

CharacteristicSolver::Result CharacteristicSolver::solve(double t0, int n_steps, std::span<const double> m0,
                                                         const Result* warm) const {
  const int d = spec_.d();
  const auto ds = static_cast<std::size_t>(d);
  if (m0.size() != ds) throw Error("mfg", "solve_mfg", "initial measure has wrong dimension");
  Workspace w(d);
  Result r;
  Matrix Ru(d, d), Rm(d, d);
  Vec R;
  if (n_steps == 0) {
    r.u0.resize(ds);
    for (int x = 0; x < d; ++x) r.u0[static_cast<std::size_t>(x)] = spec_.terminal_cost(x, m0);
    integrate(w, t0, 0, r.u0, m0, true, R, &Ru, &Rm);
    r.jacobian = Ru;
    r.du_dm = -Ru.partialPivLu().solve(Rm);
    return r;
  }

  Vec u0(ds);
  Eigen::PartialPivLU<Matrix> lu;
  bool fresh = false;
  if (warm && warm->u0.size() == ds) {
    u0 = warm->u0;
    lu.compute(warm->jacobian);
  } else {
    for (int x = 0; x < d; ++x) u0[static_cast<std::size_t>(x)] = spec_.terminal_cost(x, m0);
    integrate(w, t0, n_steps, u0, m0, true, R, &Ru, &Rm);
    lu.compute(Ru);
    fresh = true;
  }

  // Chord/Newton down to `polish`, then one Newton step with the matrix from
  // the final tangent pass, which is needed for du/dm anyway.
  const double polish = std::max(tol_, 1e-9);
  double res = integrate(w, t0, n_steps, u0, m0, false, R, nullptr, nullptr);
  int it = 0;
  Vec trial(ds), Rtrial;
  while (res >= polish) {
    if (++it > max_iter_) {
      std::ostringstream os;
      os << "residual=" << res << " t0=" << t0;
      throw Error("mfg", "solve_mfg", "shooting did not converge", os.str());
    }
    const Eigen::VectorXd step = lu.solve(Eigen::Map<const Eigen::VectorXd>(R.data(), d));
    double lambda = 1.0, res_trial = 0.0;
    for (int tries = 0; tries < 40; ++tries) {
      for (std::size_t x = 0; x < ds; ++x) trial[x] = u0[x] - lambda * step(static_cast<Eigen::Index>(x));
      res_trial = integrate(w, t0, n_steps, trial, m0, false, Rtrial, nullptr, nullptr);
      if (res_trial < res) break;
      if (!fresh) break;
      lambda *= 0.5;
    }
    if (res_trial < res) {
      // A stale matrix that only crawls is refreshed.
      const bool slow = res_trial > 0.1 * res;
      u0 = trial;
      R = Rtrial;
      res = res_trial;
      fresh = false;
      if (slow && res >= polish) {
        integrate(w, t0, n_steps, u0, m0, true, R, &Ru, &Rm);
        lu.compute(Ru);
        fresh = true;
      }
      continue;
    }
    if (!fresh) {
      integrate(w, t0, n_steps, u0, m0, true, R, &Ru, &Rm);
      lu.compute(Ru);
      fresh = true;
      continue;
    }
    // Roundoff floor: Newton with a fresh matrix cannot improve further.
    if (res < 1e3 * polish) break;
    std::ostringstream os;
    os << "residual=" << res << " t0=" << t0;
    throw Error("mfg", "solve_mfg", "shooting stalled", os.str());
  }
  r.residual = integrate(w, t0, n_steps, u0, m0, true, R, &Ru, &Rm);
  if (r.residual >= tol_) {
    const Eigen::VectorXd step = Ru.partialPivLu().solve(Eigen::Map<const Eigen::VectorXd>(R.data(), d));
    for (std::size_t x = 0; x < ds; ++x) u0[x] -= step(static_cast<Eigen::Index>(x));
    ++it;
    // Quadratic convergence: the remaining error is of order |step|^2.
    r.residual = step.squaredNorm();
  }
  r.u0 = u0;
  r.iterations = it;
  r.jacobian = Ru;
  r.du_dm = -Ru.partialPivLu().solve(Rm);
  return r;
}

void CharacteristicSolver::trajectory(double t0, int n_steps, std::span<const double> u0,
                                      std::span<const double> m0, Vec& u_out, Vec& m_out) const {
  const int d = spec_.d();
  const auto ds = static_cast<std::size_t>(d);
  Workspace w(d);
  u_out.assign(static_cast<std::size_t>(n_steps + 1) * ds, 0.0);
  m_out.assign(static_cast<std::size_t>(n_steps + 1) * ds, 0.0);
  std::copy(u0.begin(), u0.end(), w.z.begin());
  std::copy(m0.begin(), m0.end(), w.z.begin() + static_cast<std::ptrdiff_t>(ds));
  const double dt = n_steps > 0 ? (spec_.T() - t0) / n_steps : 0.0;
  const std::size_t n = 2 * ds;
  auto store = [&](int k) {
    std::copy_n(w.z.begin(), ds, u_out.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(k) * ds));
    std::copy_n(w.z.begin() + static_cast<std::ptrdiff_t>(ds), ds,
                m_out.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(k) * ds));
  };
  store(0);
  for (int s = 0; s < n_steps; ++s) {
    rhs(w, w.z.data(), nullptr, w.k1.data(), nullptr);
    for (std::size_t i = 0; i < n; ++i) w.zs1[i] = w.z[i] + 0.5 * dt * w.k1[i];
    rhs(w, w.zs1.data(), nullptr, w.k2.data(), nullptr);
    for (std::size_t i = 0; i < n; ++i) w.zs1[i] = w.z[i] + 0.5 * dt * w.k2[i];
    rhs(w, w.zs1.data(), nullptr, w.k3.data(), nullptr);
    for (std::size_t i = 0; i < n; ++i) w.zs1[i] = w.z[i] + dt * w.k3[i];
    rhs(w, w.zs1.data(), nullptr, w.k4.data(), nullptr);
    for (std::size_t i = 0; i < n; ++i) w.z[i] += dt / 6.0 * (w.k1[i] + 2 * w.k2[i] + 2 * w.k3[i] + w.k4[i]);
    store(s + 1);
  }
}

}  // namespace fsmfg
