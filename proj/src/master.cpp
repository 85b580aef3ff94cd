#include "fsmfg/master.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace fsmfg {

// ---------------------------------------------------------------------------
// SimplexGrid

std::size_t SimplexGrid::node_count(int d, int n) {
  // C(n + d - 1, d - 1), computed incrementally to stay exact.
  std::size_t c = 1;
  for (int i = 1; i <= d - 1; ++i) c = c * static_cast<std::size_t>(n + i) / static_cast<std::size_t>(i);
  return c;
}

SimplexGrid::SimplexGrid(int d, int n) : d_(d), n_(n) {
  if (d < 2 || d > 15) throw Error("master", "SimplexGrid", "dimension must lie in [2, 15]", "d=" + std::to_string(d));
  if (n < 1) throw Error("master", "SimplexGrid", "resolution must be >= 1", "n=" + std::to_string(n));
  count_ = node_count(d, n);
  if (count_ > 5'000'000) throw Error("master", "SimplexGrid", "grid too large", "nodes=" + std::to_string(count_));
  binom_.assign(static_cast<std::size_t>(n + 1), std::vector<std::size_t>(static_cast<std::size_t>(d + 1), 0));
  for (int s = 0; s <= n; ++s) {
    binom_[static_cast<std::size_t>(s)][0] = s == 0 ? 1 : 0;
    for (int p = 1; p <= d; ++p) binom_[static_cast<std::size_t>(s)][static_cast<std::size_t>(p)] = node_count(p, s);
  }
  comps_.reserve(count_ * static_cast<std::size_t>(d));
  std::vector<int> k(static_cast<std::size_t>(d), 0);
  auto rec = [&](auto& self, int pos, int left) -> void {
    if (pos == d - 1) {
      k[static_cast<std::size_t>(pos)] = left;
      comps_.insert(comps_.end(), k.begin(), k.end());
      return;
    }
    for (int v = 0; v <= left; ++v) {
      k[static_cast<std::size_t>(pos)] = v;
      self(self, pos + 1, left - v);
    }
  };
  rec(rec, 0, n);
}

Vec SimplexGrid::point(int node) const {
  const auto k = composition(node);
  Vec m(static_cast<std::size_t>(d_));
  for (int i = 0; i < d_; ++i) m[static_cast<std::size_t>(i)] = static_cast<double>(k[static_cast<std::size_t>(i)]) / n_;
  return m;
}

bool SimplexGrid::interior(int node) const {
  const auto k = composition(node);
  return std::all_of(k.begin(), k.end(), [](int v) { return v >= 1; });
}

int SimplexGrid::rank(std::span<const int> k) const {
  std::size_t r = 0;
  int left = n_;
  for (int i = 0; i < d_ - 1; ++i) {
    const int ki = k[static_cast<std::size_t>(i)];
    for (int v = 0; v < ki; ++v) r += binom_[static_cast<std::size_t>(left - v)][static_cast<std::size_t>(d_ - i - 1)];
    left -= ki;
  }
  return static_cast<int>(r);
}

int SimplexGrid::neighbour(int node, int y, int z) const {
  if (y == z) return node;
  int k[16];
  const auto c = composition(node);
  std::copy(c.begin(), c.end(), k);
  if (k[y] == 0) return -1;
  --k[y];
  ++k[z];
  return rank(std::span<const int>(k, static_cast<std::size_t>(d_)));
}

SimplexGrid::Stencil SimplexGrid::locate(std::span<const double> m) const {
  const int d = d_;
  double y[16], frac[16];
  int base[16], order[16];
  double acc = 0.0;
  for (int j = 0; j < d - 1; ++j) {
    acc += m[static_cast<std::size_t>(j)];
    y[j] = std::clamp(acc * n_, j > 0 ? y[j - 1] : 0.0, static_cast<double>(n_));
    base[j] = std::min(static_cast<int>(std::floor(y[j])), n_);
    frac[j] = y[j] - base[j];
    order[j] = j;
  }
  // Descending fractions; ties broken toward the larger index so that
  // every vertex keeps nondecreasing cumulative coordinates.
  std::sort(order, order + d - 1, [&](int a, int b) { return frac[a] > frac[b] || (frac[a] == frac[b] && a > b); });
  Stencil st;
  int cur[16];
  std::copy(base, base + d - 1, cur);
  auto emit = [&](double w) {
    if (w <= 0.0) return;
    int k[16];
    int prev = 0;
    for (int j = 0; j < d - 1; ++j) {
      k[j] = cur[j] - prev;
      prev = cur[j];
    }
    k[d - 1] = n_ - prev;
    for (int j = 0; j < d; ++j) {
      if (k[j] < 0) throw Error("master", "locate", "point lies outside the simplex");
    }
    st.nodes[st.size] = rank(std::span<const int>(k, static_cast<std::size_t>(d)));
    st.weights[st.size] = w;
    ++st.size;
  };
  emit(d > 1 ? 1.0 - frac[order[0]] : 1.0);
  for (int j = 0; j < d - 1; ++j) {
    ++cur[order[j]];
    emit(j + 1 < d - 1 ? frac[order[j]] - frac[order[j + 1]] : frac[order[j]]);
  }
  return st;
}

// ---------------------------------------------------------------------------
// MasterField

MasterField::MasterField(SimplexGrid g, TimeGrid t)
    : grid(std::move(g)), times(t),
      U(static_cast<std::size_t>(t.n_nodes()) * static_cast<std::size_t>(grid.d()) * static_cast<std::size_t>(grid.size()), 0.0),
      D1(U.size() * static_cast<std::size_t>(grid.d()), 0.0) {}

void MasterField::values_at(int k, int node, std::span<double> out) const {
  for (int x = 0; x < grid.d(); ++x) out[static_cast<std::size_t>(x)] = value(k, x, node);
}

namespace {

// Evaluation points may carry roundoff from empirical measures; anything
// further off the simplex is a caller error.
void require_on_simplex(std::span<const double> m) {
  double s = 0.0;
  for (double v : m) {
    if (!(v >= -1e-9)) throw Error("master", "evaluate", "measure has a negative entry");
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-9) throw Error("master", "evaluate", "measure does not sum to one", "sum=" + std::to_string(s));
}

}  // namespace

MasterPoint MasterField::evaluate(double t, std::span<const double> m) const {
  const int d = grid.d();
  if (static_cast<int>(m.size()) != d) throw Error("master", "evaluate", "measure has wrong dimension");
  require_on_simplex(m);
  if (t < times.t0() - 1e-12 || t > times.T() + 1e-12) {
    throw Error("master", "evaluate", "time outside the tabulated range", "t=" + std::to_string(t));
  }
  const auto st = grid.locate(m);
  int k0 = times.locate(t), k1 = k0;
  double s = 0.0;
  if (times.n_steps() > 0) {
    k1 = k0 + 1;
    s = std::clamp((t - times.node(k0)) / times.dt(), 0.0, 1.0);
  }
  MasterPoint p{Vec(static_cast<std::size_t>(d), 0.0), Matrix::Zero(d, d)};
  for (int i = 0; i < st.size; ++i) {
    for (int x = 0; x < d; ++x) {
      const double a = value(k0, x, st.nodes[i]), b = value(k1, x, st.nodes[i]);
      p.U[static_cast<std::size_t>(x)] += st.weights[i] * ((1.0 - s) * a + s * b);
      for (int z = 0; z < d; ++z) {
        const double da = D1[index(k0, x, st.nodes[i]) * static_cast<std::size_t>(d) + static_cast<std::size_t>(z)];
        const double db = D1[index(k1, x, st.nodes[i]) * static_cast<std::size_t>(d) + static_cast<std::size_t>(z)];
        p.D(x, z) += st.weights[i] * ((1.0 - s) * da + s * db);
      }
    }
  }
  return p;
}

MasterField build_master_field(std::shared_ptr<const GameSpec> spec, const SimplexGrid& grid, const TimeGrid& times,
                               const MasterOptions& opt) {
  if (!spec) throw Error("master", "build_master_field", "null model");
  if (grid.d() != spec->d()) throw Error("master", "build_master_field", "grid dimension differs from the model");
  if (std::abs(times.T() - spec->T()) > 1e-12) throw Error("master", "build_master_field", "time grid must end at T");
  MasterField field(grid, times);
  field.uniqueness_guaranteed = spec->monotone();
  const CharacteristicSolver solver(*spec, opt.tol, opt.max_iter);
  const int d = spec->d();
  const int nT = times.n_steps();
  parallel_for(static_cast<std::size_t>(grid.size()), [&](std::size_t idx) {
    const int node = static_cast<int>(idx);
    const Vec m0 = grid.point(node);
    CharacteristicSolver::Result prev, prevprev, guess;
    int have = 0;
    for (int k = nT; k >= 0; --k) {
      const CharacteristicSolver::Result* warm = nullptr;
      if (have >= 1) {
        guess = prev;
        if (have >= 2) {
          for (std::size_t x = 0; x < guess.u0.size(); ++x) guess.u0[x] = 2.0 * prev.u0[x] - prevprev.u0[x];
        }
        warm = &guess;
      }
      CharacteristicSolver::Result r;
      try {
        r = solver.solve(times.node(k), nT - k, m0, warm);
      } catch (const Error& e) {
        std::ostringstream os;
        os << "node=" << node << " t0=" << times.node(k) << " " << e.context();
        throw Error("master", "build_master_field", e.what(), os.str());
      }
      for (int x = 0; x < d; ++x) {
        field.U[field.index(k, x, node)] = r.u0[static_cast<std::size_t>(x)];
        const std::size_t base = field.index(k, x, node) * static_cast<std::size_t>(d);
        for (int z = 0; z < d; ++z) field.D1[base + static_cast<std::size_t>(z)] = r.du_dm(x, z) - r.du_dm(x, 0);
      }
      prevprev = std::move(prev);
      prev = std::move(r);
      ++have;
    }
  });
  return field;
}

double master_residual(const GameSpec& spec, const MasterField& field) {
  const int d = field.grid.d();
  const auto ds = static_cast<std::size_t>(d);
  const TimeGrid& g = field.times;
  double sup = 0.0;
  Vec u(ds), up(ds), um(ds), p(ds), rates(ds * ds);
  for (int node = 0; node < field.grid.size(); ++node) {
    if (!field.grid.interior(node)) continue;
    const Vec m = field.grid.point(node);
    for (int k = 1; k < g.n_steps(); ++k) {
      field.values_at(k, node, u);
      field.values_at(k + 1, node, up);
      field.values_at(k - 1, node, um);
      for (std::size_t y = 0; y < ds; ++y) {
        for (std::size_t z = 0; z < ds; ++z) p[z] = u[z] - u[y];
        spec.alpha_star(static_cast<int>(y), p, std::span<double>(rates).subspan(y * ds, ds));
      }
      for (int x = 0; x < d; ++x) {
        for (std::size_t z = 0; z < ds; ++z) p[z] = u[z] - u[static_cast<std::size_t>(x)];
        double transport = 0.0;
        for (int y = 0; y < d; ++y) {
          double dot = 0.0;
          for (int z = 0; z < d; ++z) dot += field.derivative(k, x, node, y, z) * rates[static_cast<std::size_t>(y * d + z)];
          transport += m[static_cast<std::size_t>(y)] * dot;
        }
        const double dUdt = (up[static_cast<std::size_t>(x)] - um[static_cast<std::size_t>(x)]) / (2.0 * g.dt());
        const double r = -dUdt + spec.hamiltonian(x, p) - transport - spec.running_cost(x, m);
        sup = std::max(sup, std::abs(r));
      }
    }
  }
  return sup;
}

IdentityReport derivative_identity_check(const MasterField& field) {
  const int d = field.grid.d();
  IdentityReport rep;
  Vec mu(static_cast<std::size_t>(d));
  for (int z = 0; z < d; ++z) mu[static_cast<std::size_t>(z)] = std::cos(1.0 + z);
  const double mean = std::accumulate(mu.begin(), mu.end(), 0.0) / d;
  for (double& v : mu) v -= mean;
  for (int k = 0; k < field.times.n_nodes(); ++k) {
    for (int node = 0; node < field.grid.size(); ++node) {
      for (int x = 0; x < d; ++x) {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (int y = 0; y < d; ++y) {
          double dot = 0.0;
          for (int z = 0; z < d; ++z) {
            dot += mu[static_cast<std::size_t>(z)] * field.derivative(k, x, node, y, z);
            for (int w = 0; w < d; ++w) {
              const double gap = field.derivative(k, x, node, y, z) - field.derivative(k, x, node, w, z) -
                                 field.derivative(k, x, node, y, w);
              rep.identity = std::max(rep.identity, std::abs(gap));
            }
          }
          lo = std::min(lo, dot);
          hi = std::max(hi, dot);
        }
        rep.direction = std::max(rep.direction, hi - lo);
      }
    }
  }
  return rep;
}

double finite_difference_gap(const MasterField& field) {
  const int d = field.grid.d();
  const double h = field.grid.h();
  double sup = 0.0;
  for (int node = 0; node < field.grid.size(); ++node) {
    if (!field.grid.interior(node)) continue;
    for (int z = 1; z < d; ++z) {
      const int plus = field.grid.neighbour(node, 0, z);
      const int minus = field.grid.neighbour(node, z, 0);
      for (int k = 0; k < field.times.n_nodes(); ++k) {
        for (int x = 0; x < d; ++x) {
          const double fd = (field.value(k, x, plus) - field.value(k, x, minus)) / (2.0 * h);
          sup = std::max(sup, std::abs(fd - field.derivative(k, x, node, 0, z)));
        }
      }
    }
  }
  return sup;
}

RegularityReport regularity_probe(const MasterField& field) {
  const int d = field.grid.d();
  const double dist = field.grid.h() * std::sqrt(2.0);
  RegularityReport rep;
  for (int node = 0; node < field.grid.size(); ++node) {
    for (int y = 0; y < d; ++y) {
      for (int z = 0; z < d; ++z) {
        const int other = y == z ? -1 : field.grid.neighbour(node, y, z);
        if (other < node) continue;  // each pair once
        for (int k = 0; k < field.times.n_nodes(); ++k) {
          for (int x = 0; x < d; ++x) {
            for (int w = 0; w < d; ++w) {
              const double a = field.value(k, w, node) - field.value(k, x, node);
              const double b = field.value(k, w, other) - field.value(k, x, other);
              rep.lip_U = std::max(rep.lip_U, std::abs(a - b) / dist);
              const double da = field.derivative(k, x, node, 0, w), db = field.derivative(k, x, other, 0, w);
              rep.lip_DmU = std::max(rep.lip_DmU, std::abs(da - db) / dist);
            }
          }
        }
      }
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Linearized system

LinearizedSolution::LinearizedSolution(TimeGrid g, int dim)
    : grid(g), d(dim), v(static_cast<std::size_t>(g.n_nodes() * dim), 0.0),
      mu(static_cast<std::size_t>(g.n_nodes() * dim), 0.0) {}

namespace {

// Coefficients of the linearized pair frozen at one time (node or midpoint).
struct LinCoefficients {
  Vec m;      // d
  Vec rates;  // d*d, rates[x*d + y] = a*_y(x, D^x u)
  Vec jac;    // d*d*d, jac[x*d*d + y*d + k] = d a*_y(x, p) / d p_k
  Vec dF;     // d*d, dF[x*d + z] = d F(x, m) / d m_z
};

class LinearizedOperator {
public:
  LinearizedOperator(const GameSpec& spec, const MfgSolution& base) : spec_(spec), d_(spec.d()), grid_(base.u.grid) {
    const int n = grid_.n_steps();
    coeff_.resize(static_cast<std::size_t>(2 * n + 1));
    const auto ds = static_cast<std::size_t>(d_);
    Vec u(ds), m(ds);
    for (int i = 0; i <= 2 * n; ++i) {
      const double t = grid_.t0() + 0.5 * i * grid_.dt();
      if (i % 2 == 0) {
        const auto uk = base.u.at(i / 2), mk = base.m.at(i / 2);
        std::copy(uk.begin(), uk.end(), u.begin());
        std::copy(mk.begin(), mk.end(), m.begin());
      } else {
        base.u.interpolate(t, u);
        base.m.interpolate(t, m);
      }
      coeff_[static_cast<std::size_t>(i)] = make(u, m);
    }
    dG_.resize(ds * ds);
    Vec unit(ds, 0.0);
    for (std::size_t z = 0; z < ds; ++z) {
      unit[z] = 1.0;
      for (std::size_t x = 0; x < ds; ++x) dG_[x * ds + z] = spec.terminal_cost_derivative(static_cast<int>(x), base.m.at(n), unit);
      unit[z] = 0.0;
    }
  }

  int d() const { return d_; }
  const TimeGrid& grid() const { return grid_; }
  const LinCoefficients& at(int half_index) const { return coeff_[static_cast<std::size_t>(half_index)]; }
  const Vec& dG() const { return dG_; }

  // v' = -a*(x).D^x v - DF(x) mu
  void backward(const LinCoefficients& c, std::span<const double> v, std::span<const double> mu,
                std::span<double> out) const {
    const auto ds = static_cast<std::size_t>(d_);
    for (std::size_t x = 0; x < ds; ++x) {
      double s = 0.0;
      for (std::size_t y = 0; y < ds; ++y) {
        if (y != x) s -= c.rates[x * ds + y] * (v[y] - v[x]);
        s -= c.dF[x * ds + y] * mu[y];
      }
      out[x] = s;
    }
  }

  // mu_x' = sum_y mu_y Gamma_{y,x} + sum_y m_y [J_y D^y v]_x
  void forward(const LinCoefficients& c, std::span<const double> mu, std::span<const double> v,
               std::span<double> out) const {
    const auto ds = static_cast<std::size_t>(d_);
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t x = 0; x < ds; ++x) {
      double in = 0.0, leave = 0.0;
      for (std::size_t y = 0; y < ds; ++y) {
        if (y == x) continue;
        in += mu[y] * c.rates[y * ds + x];
        leave += c.rates[x * ds + y];
      }
      out[x] += in - mu[x] * leave;
    }
    for (std::size_t y = 0; y < ds; ++y) {
      double total = 0.0;
      for (std::size_t x = 0; x < ds; ++x) {
        if (x == y) continue;
        double r = 0.0;
        for (std::size_t k = 0; k < ds; ++k) r += c.jac[y * ds * ds + x * ds + k] * (v[k] - v[y]);
        out[x] += c.m[y] * r;
        total += r;
      }
      out[y] -= c.m[y] * total;
    }
  }

private:
  LinCoefficients make(std::span<const double> u, std::span<const double> m) const {
    const auto ds = static_cast<std::size_t>(d_);
    LinCoefficients c{Vec(m.begin(), m.end()), Vec(ds * ds), Vec(ds * ds * ds), Vec(ds * ds)};
    Vec p(ds), unit(ds, 0.0);
    for (std::size_t x = 0; x < ds; ++x) {
      for (std::size_t y = 0; y < ds; ++y) p[y] = u[y] - u[x];
      spec_.alpha_star(static_cast<int>(x), p, std::span<double>(c.rates).subspan(x * ds, ds));
      spec_.alpha_star_jacobian(static_cast<int>(x), p, std::span<double>(c.jac).subspan(x * ds * ds, ds * ds));
    }
    for (std::size_t z = 0; z < ds; ++z) {
      unit[z] = 1.0;
      for (std::size_t x = 0; x < ds; ++x) c.dF[x * ds + z] = spec_.running_cost_derivative(static_cast<int>(x), m, unit);
      unit[z] = 0.0;
    }
    return c;
  }

  const GameSpec& spec_;
  int d_;
  TimeGrid grid_;
  std::vector<LinCoefficients> coeff_;
  Vec dG_;
};

// Flow values at nodes plus derivatives, for Hermite midpoints.
struct Flow {
  Vec val;
  Vec der;
};

void mid(const Flow& f, int d, int k, double dt, std::span<double> out) {
  const auto a = static_cast<std::size_t>(k * d), b = static_cast<std::size_t>((k + 1) * d);
  for (std::size_t x = 0; x < static_cast<std::size_t>(d); ++x) {
    out[x] = 0.5 * (f.val[a + x] + f.val[b + x]) + dt / 8.0 * (f.der[a + x] - f.der[b + x]);
  }
}

std::span<const double> row(const Vec& v, int d, int k) {
  return {v.data() + static_cast<std::size_t>(k * d), static_cast<std::size_t>(d)};
}
std::span<double> row(Vec& v, int d, int k) { return {v.data() + static_cast<std::size_t>(k * d), static_cast<std::size_t>(d)}; }

Flow integrate_backward(const LinearizedOperator& op, const Flow& mu) {
  const int d = op.d(), n = op.grid().n_steps();
  const double dt = op.grid().dt();
  const auto ds = static_cast<std::size_t>(d);
  Flow v{Vec(mu.val.size(), 0.0), Vec(mu.val.size(), 0.0)};
  auto vT = row(v.val, d, n);
  for (std::size_t x = 0; x < ds; ++x) {
    double s = 0.0;
    for (std::size_t z = 0; z < ds; ++z) s += op.dG()[x * ds + z] * row(mu.val, d, n)[z];
    vT[x] = s;
  }
  op.backward(op.at(2 * n), vT, row(mu.val, d, n), row(v.der, d, n));
  Vec mm(ds), k1(ds), k2(ds), k3(ds), k4(ds), st(ds);
  for (int k = n - 1; k >= 0; --k) {
    mid(mu, d, k, dt, mm);
    const auto up = row(v.val, d, k + 1);
    std::copy(row(v.der, d, k + 1).begin(), row(v.der, d, k + 1).end(), k1.begin());
    for (std::size_t x = 0; x < ds; ++x) st[x] = up[x] - 0.5 * dt * k1[x];
    op.backward(op.at(2 * k + 1), st, mm, k2);
    for (std::size_t x = 0; x < ds; ++x) st[x] = up[x] - 0.5 * dt * k2[x];
    op.backward(op.at(2 * k + 1), st, mm, k3);
    for (std::size_t x = 0; x < ds; ++x) st[x] = up[x] - dt * k3[x];
    op.backward(op.at(2 * k), st, row(mu.val, d, k), k4);
    auto vk = row(v.val, d, k);
    for (std::size_t x = 0; x < ds; ++x) {
      vk[x] = up[x] - dt / 6.0 * (k1[x] + 2 * k2[x] + 2 * k3[x] + k4[x]);
      if (!std::isfinite(vk[x])) {
        throw Error("master", "solve_linearized", "divergence in the backward equation", "node=" + std::to_string(k));
      }
    }
    op.backward(op.at(2 * k), vk, row(mu.val, d, k), row(v.der, d, k));
  }
  return v;
}

Flow integrate_forward(const LinearizedOperator& op, const Flow& v, std::span<const double> mu0) {
  const int d = op.d(), n = op.grid().n_steps();
  const double dt = op.grid().dt();
  const auto ds = static_cast<std::size_t>(d);
  Flow mu{Vec(v.val.size(), 0.0), Vec(v.val.size(), 0.0)};
  std::copy(mu0.begin(), mu0.end(), mu.val.begin());
  op.forward(op.at(0), row(mu.val, d, 0), row(v.val, d, 0), row(mu.der, d, 0));
  Vec vm(ds), k1(ds), k2(ds), k3(ds), k4(ds), st(ds);
  for (int k = 0; k < n; ++k) {
    mid(v, d, k, dt, vm);
    const auto mk = row(mu.val, d, k);
    std::copy(row(mu.der, d, k).begin(), row(mu.der, d, k).end(), k1.begin());
    for (std::size_t x = 0; x < ds; ++x) st[x] = mk[x] + 0.5 * dt * k1[x];
    op.forward(op.at(2 * k + 1), st, vm, k2);
    for (std::size_t x = 0; x < ds; ++x) st[x] = mk[x] + 0.5 * dt * k2[x];
    op.forward(op.at(2 * k + 1), st, vm, k3);
    for (std::size_t x = 0; x < ds; ++x) st[x] = mk[x] + dt * k3[x];
    op.forward(op.at(2 * k + 2), st, row(v.val, d, k + 1), k4);
    auto next = row(mu.val, d, k + 1);
    for (std::size_t x = 0; x < ds; ++x) {
      next[x] = mk[x] + dt / 6.0 * (k1[x] + 2 * k2[x] + 2 * k3[x] + k4[x]);
      if (!std::isfinite(next[x])) {
        throw Error("master", "solve_linearized", "divergence in the forward equation", "node=" + std::to_string(k + 1));
      }
    }
    op.forward(op.at(2 * k + 2), next, row(v.val, d, k + 1), row(mu.der, d, k + 1));
  }
  return mu;
}

}  // namespace

LinearizedSolution solve_linearized(const GameSpec& spec, const MfgSolution& base, const TangentVector& mu0,
                                    const LinearizedOptions& opt) {
  const int d = spec.d();
  if (mu0.dim() != d) throw Error("master", "solve_linearized", "direction has wrong dimension");
  if (!(opt.damping > 0.0 && opt.damping <= 1.0)) throw Error("master", "solve_linearized", "damping must lie in (0, 1]");
  const TimeGrid& g = base.u.grid;
  LinearizedSolution out(g, d);
  const LinearizedOperator op(spec, base);

  Flow flow{Vec(static_cast<std::size_t>(g.n_nodes() * d)), Vec(static_cast<std::size_t>(g.n_nodes() * d), 0.0)};
  for (int k = 0; k < g.n_nodes(); ++k) std::copy(mu0.components().begin(), mu0.components().end(), row(flow.val, d, k).begin());
  const double scale = std::max(1.0, sup_norm(mu0.span()));
  const double tol = opt.tol * scale;
  auto accept = [&](Flow v, Flow mu, int it) {
    out.v = std::move(v.val);
    out.mu = std::move(mu.val);
    out.iterations = it;
    return out;
  };
  std::optional<Flow> previous_image;
  double update = std::numeric_limits<double>::infinity();
  for (int it = 1; it <= opt.max_iter; ++it) {
    Flow v = integrate_backward(op, flow);
    Flow image = integrate_forward(op, v, mu0.span());
    const double gap = sup_diff(image.val, flow.val);
    update = previous_image ? sup_diff(image.val, previous_image->val) : gap;
    if (gap < tol) return accept(std::move(v), std::move(image), it);
    if (update < tol) {
      Flow v2 = integrate_backward(op, image);
      Flow check = integrate_forward(op, v2, mu0.span());
      if (sup_diff(check.val, image.val) < tol) return accept(std::move(v2), std::move(image), it);
      flow = std::move(check);
      previous_image.reset();
      continue;
    }
    for (std::size_t i = 0; i < flow.val.size(); ++i) {
      flow.val[i] = (1.0 - opt.damping) * flow.val[i] + opt.damping * image.val[i];
      flow.der[i] = (1.0 - opt.damping) * flow.der[i] + opt.damping * image.der[i];
    }
    previous_image = std::move(image);
  }
  std::ostringstream os;
  os << "last_update=" << update;
  throw Error("master", "solve_linearized", "Picard iteration did not converge", os.str());
}

// ---------------------------------------------------------------------------

CharacteristicEvaluator::CharacteristicEvaluator(std::shared_ptr<const GameSpec> spec, double dt, double tol)
    : spec_(std::move(spec)), dt_(dt), solver_(*spec_, tol) {
  if (!(dt > 0.0)) throw Error("master", "CharacteristicEvaluator", "time step must be positive");
}

MasterPoint CharacteristicEvaluator::evaluate(double t, std::span<const double> m) const {
  const int d = spec_->d();
  if (static_cast<int>(m.size()) != d) throw Error("master", "evaluate", "measure has wrong dimension");
  if (t > spec_->T() || t < 0.0) throw Error("master", "evaluate", "time outside [0, T]");
  require_on_simplex(m);
  int n = static_cast<int>(std::llround((spec_->T() - t) / dt_));
  if (n == 0 && spec_->T() - t > 1e-14) n = 1;
  const auto r = solver_.solve(t, n, m);
  MasterPoint p{r.u0, Matrix(d, d)};
  for (int x = 0; x < d; ++x) {
    for (int z = 0; z < d; ++z) p.D(x, z) = r.du_dm(x, z) - r.du_dm(x, 0);
  }
  return p;
}

}  // namespace fsmfg
