#include "fsmfg/asymptotics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "fsmfg/rng.hpp"

namespace fsmfg {

namespace {

constexpr double kKinkBand = 1e-6;

void check_interior(const char* op, std::span<const double> m) {
  for (double v : m) {
    if (!(v > 0.0)) throw Error("asymptotics", op, "measure must lie in the interior of the simplex");
  }
}

double standard_normal(CounterRng& rng) {
  // Box-Muller, one variate per call.
  const double u1 = 1.0 - rng.uniform();
  const double u2 = rng.uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace

Matrix gamma_matrix(const GameSpec& spec, const MasterPoint& P) {
  const int d = spec.d();
  Matrix G(d, d);
  Vec p(static_cast<std::size_t>(d)), a(static_cast<std::size_t>(d));
  for (int x = 0; x < d; ++x) {
    for (int z = 0; z < d; ++z) p[static_cast<std::size_t>(z)] = P.U[static_cast<std::size_t>(z)] - P.U[static_cast<std::size_t>(x)];
    spec.alpha_star(x, p, a);
    double row = 0.0;
    for (int y = 0; y < d; ++y) {
      if (y == x) continue;
      G(x, y) = a[static_cast<std::size_t>(y)];
      row += G(x, y);
    }
    G(x, x) = -row;
  }
  return G;
}

Matrix gamma_matrix(const GameSpec& spec, const MasterEvaluator& U, double t, std::span<const double> m) {
  return gamma_matrix(spec, U.evaluate(t, m));
}

Matrix gamma_derivative(const GameSpec& spec, const MasterPoint& P, std::span<const double> mu) {
  const int d = spec.d();
  const auto ds = static_cast<std::size_t>(d);
  // s_x = D^m U(t, x, m, 1) . mu
  Vec s(ds, 0.0), p(ds), dp(ds), J(ds * ds);
  for (int x = 0; x < d; ++x) {
    for (int z = 0; z < d; ++z) s[static_cast<std::size_t>(x)] += P.D(x, z) * mu[static_cast<std::size_t>(z)];
  }
  Matrix DG(d, d);
  for (int x = 0; x < d; ++x) {
    const auto xs = static_cast<std::size_t>(x);
    for (std::size_t z = 0; z < ds; ++z) {
      p[z] = P.U[z] - P.U[xs];
      dp[z] = s[z] - s[xs];
    }
    spec.alpha_star_jacobian(x, p, J);
    double row = 0.0;
    for (std::size_t y = 0; y < ds; ++y) {
      if (y == xs) continue;
      double v = 0.0;
      for (std::size_t z = 0; z < ds; ++z) v += J[y * ds + z] * dp[z];
      DG(x, static_cast<int>(y)) = v;
      row += v;
    }
    DG(x, x) = -row;
  }
  return DG;
}

Matrix sigma2_matrix(const Matrix& Gamma, std::span<const double> m) {
  const auto d = Gamma.rows();
  Matrix S = Matrix::Zero(d, d);
  for (Eigen::Index x = 0; x < d; ++x) {
    for (Eigen::Index y = 0; y < d; ++y) {
      if (x == y) continue;
      const double flux = m[static_cast<std::size_t>(x)] * Gamma(x, y) + m[static_cast<std::size_t>(y)] * Gamma(y, x);
      S(x, y) = -flux;
      S(x, x) += flux;
    }
  }
  return S;
}

Matrix drift_operator(const GameSpec& spec, const MasterPoint& P, std::span<const double> m) {
  const int d = spec.d();
  Matrix A = gamma_matrix(spec, P).transpose();
  Vec e(static_cast<std::size_t>(d), 0.0);
  for (int z = 0; z < d; ++z) {
    e[static_cast<std::size_t>(z)] = 1.0;
    const Matrix DG = gamma_derivative(spec, P, e);
    for (int y = 0; y < d; ++y) {
      for (int x = 0; x < d; ++x) A(y, z) += m[static_cast<std::size_t>(x)] * DG(x, y);
    }
    e[static_cast<std::size_t>(z)] = 0.0;
  }
  return A;
}

CltCoefficients clt_coefficients(const GameSpec& spec, const MasterEvaluator& U, double t, const SimplexPoint& m,
                                 const TangentVector& mu) {
  const int d = spec.d();
  if (m.dim() != d || mu.dim() != d) throw Error("asymptotics", "clt_coefficients", "dimension mismatch");
  check_interior("clt_coefficients", m.span());
  const MasterPoint P = U.evaluate(t, m.span());
  const Matrix G = gamma_matrix(spec, P);
  const Matrix DG = gamma_derivative(spec, P, mu.span());
  CltCoefficients out;
  out.b.assign(static_cast<std::size_t>(d), 0.0);
  out.drift.assign(static_cast<std::size_t>(d), 0.0);
  for (int y = 0; y < d; ++y) {
    double b = 0.0, g = 0.0;
    for (int x = 0; x < d; ++x) {
      b += m[static_cast<std::size_t>(x)] * DG(x, y);
      g += G(x, y) * mu[static_cast<std::size_t>(x)];
    }
    out.b[static_cast<std::size_t>(y)] = b;
    out.drift[static_cast<std::size_t>(y)] = g + b;
  }
  out.sigma2 = sigma2_matrix(G, m.span());
  for (int x = 0; x < d; ++x) {
    for (int y = 0; y < d; ++y) {
      if (x == y) continue;
      const double r = G(x, y);
      if (r - spec.kappa() < kKinkBand || spec.M_bound() - r < kKinkBand) out.near_kink = true;
    }
  }
  return out;
}

Matrix sigma_sqrt(const Matrix& sigma2) {
  if (sigma2.rows() != sigma2.cols()) throw Error("asymptotics", "sigma_sqrt", "matrix is not square");
  const double scale = std::max(1.0, sigma2.cwiseAbs().maxCoeff());
  if ((sigma2 - sigma2.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) {
    throw Error("asymptotics", "sigma_sqrt", "matrix is not symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (sigma2 + sigma2.transpose()));
  Eigen::VectorXd ev = es.eigenvalues();
  if (ev.minCoeff() < -1e-10 * scale) {
    std::ostringstream os;
    os << "min_eigenvalue=" << ev.minCoeff();
    throw Error("asymptotics", "sigma_sqrt", "matrix is not positive semidefinite", os.str());
  }
  for (Eigen::Index i = 0; i < ev.size(); ++i) ev(i) = std::sqrt(std::max(0.0, ev(i)));
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

Matrix multinomial_covariance(const SimplexPoint& m0) {
  const int d = m0.dim();
  Matrix C(d, d);
  for (int x = 0; x < d; ++x) {
    for (int y = 0; y < d; ++y) C(x, y) = (x == y ? m0[static_cast<std::size_t>(x)] : 0.0) - m0[static_cast<std::size_t>(x)] * m0[static_cast<std::size_t>(y)];
  }
  return C;
}

namespace {

// A and sigma2 along the MFG flow, at the nodes and midpoints of a grid.
struct FlowCoefficients {
  TimeGrid grid;
  std::vector<Matrix> A, S;  // index 2k for node k, 2k+1 for the midpoint

  FlowCoefficients(const GameSpec& spec, const MasterEvaluator& U, const SimplexPoint& m0, double dt, double mfg_dt)
      : grid(TimeGrid::with_step(0.0, spec.T(), dt)) {
    MfgOptions mo;
    mo.dt = mfg_dt;
    const MfgSolution flow = solve_mfg(spec, 0.0, m0, mo);
    const std::size_t n = static_cast<std::size_t>(2 * grid.n_steps() + 1);
    A.resize(n);
    S.resize(n);
    parallel_for(n, [&](std::size_t i) {
      const double t = grid.node(static_cast<int>(i / 2)) + (i % 2 ? 0.5 * grid.dt() : 0.0);
      Vec m(static_cast<std::size_t>(spec.d()));
      flow.m.interpolate(t, m);
      const MasterPoint P = U.evaluate(t, m);
      A[i] = drift_operator(spec, P, m);
      S[i] = sigma2_matrix(gamma_matrix(spec, P), m);
    });
  }
};

void check_covariance(const Matrix& C, double t) {
  const Matrix sym = 0.5 * (C + C.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> es(sym, Eigen::EigenvaluesOnly);
  if (es.eigenvalues().minCoeff() < -1e-10) {
    std::ostringstream os;
    os << "t=" << t << " min_eigenvalue=" << es.eigenvalues().minCoeff();
    throw Error("asymptotics", "evolve_fluctuation_law", "covariance lost positive semidefiniteness", os.str());
  }
}

}  // namespace

FluctuationLaw evolve_fluctuation_law(const GameSpec& spec, const MasterEvaluator& U, const SimplexPoint& m0,
                                      const Matrix& cov0, const FluctuationOptions& opt, std::span<const double> mean0) {
  const int d = spec.d();
  if (cov0.rows() != d || cov0.cols() != d) throw Error("asymptotics", "evolve_fluctuation_law", "cov0 has wrong shape");
  if ((cov0 - cov0.transpose()).cwiseAbs().maxCoeff() > 1e-12) {
    throw Error("asymptotics", "evolve_fluctuation_law", "cov0 is not symmetric");
  }
  if (cov0.rowwise().sum().cwiseAbs().maxCoeff() > 1e-10) {
    throw Error("asymptotics", "evolve_fluctuation_law", "cov0 rows must sum to zero");
  }
  check_covariance(cov0, 0.0);
  if (!mean0.empty() && static_cast<int>(mean0.size()) != d) {
    throw Error("asymptotics", "evolve_fluctuation_law", "mean0 has wrong dimension");
  }
  const FlowCoefficients fc(spec, U, m0, opt.dt, opt.mfg_dt);
  const TimeGrid& g = fc.grid;
  const double h = g.dt();
  FluctuationLaw law{g, {}, {}};
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
  if (!mean0.empty()) {
    for (int x = 0; x < d; ++x) mean(x) = mean0[static_cast<std::size_t>(x)];
  }
  Matrix C = cov0;
  auto push = [&] {
    law.mean.emplace_back(mean.data(), mean.data() + d);
    law.cov.push_back(C);
  };
  push();
  auto fcov = [&](std::size_t i, const Matrix& X) -> Matrix {
    return fc.A[i] * X + X * fc.A[i].transpose() + fc.S[i];
  };
  for (int k = 0; k < g.n_steps(); ++k) {
    const auto i0 = static_cast<std::size_t>(2 * k), im = i0 + 1, i1 = i0 + 2;
    const Matrix c1 = fcov(i0, C);
    const Matrix c2 = fcov(im, C + 0.5 * h * c1);
    const Matrix c3 = fcov(im, C + 0.5 * h * c2);
    const Matrix c4 = fcov(i1, C + h * c3);
    C += h / 6.0 * (c1 + 2.0 * c2 + 2.0 * c3 + c4);
    C = 0.5 * (C + C.transpose());
    const Eigen::VectorXd m1 = fc.A[i0] * mean;
    const Eigen::VectorXd m2 = fc.A[im] * (mean + 0.5 * h * m1);
    const Eigen::VectorXd m3 = fc.A[im] * (mean + 0.5 * h * m2);
    const Eigen::VectorXd m4 = fc.A[i1] * (mean + h * m3);
    mean += h / 6.0 * (m1 + 2.0 * m2 + 2.0 * m3 + m4);
    check_covariance(C, g.node(k + 1));
    push();
  }
  return law;
}

std::vector<Vec> sample_fluctuation_paths(const GameSpec& spec, const MasterEvaluator& U, const SimplexPoint& m0,
                                          std::span<const double> rho0, int paths, double dt, std::uint64_t seed) {
  const int d = spec.d();
  if (static_cast<int>(rho0.size()) != d) throw Error("asymptotics", "sample_fluctuation_paths", "rho0 has wrong dimension");
  if (paths < 1) throw Error("asymptotics", "sample_fluctuation_paths", "need at least one path");
  const FlowCoefficients fc(spec, U, m0, dt, std::min(dt, 1e-3));
  const TimeGrid& g = fc.grid;
  std::vector<Matrix> sigma(static_cast<std::size_t>(g.n_nodes()));
  for (int k = 0; k < g.n_nodes(); ++k) sigma[static_cast<std::size_t>(k)] = sigma_sqrt(fc.S[static_cast<std::size_t>(2 * k)]);
  std::vector<Vec> out(static_cast<std::size_t>(paths));
  parallel_for(out.size(), [&](std::size_t p) {
    CounterRng rng{seed, p, 0x636c74ULL};
    Vec& path = out[p];
    path.resize(static_cast<std::size_t>(g.n_nodes() * d));
    Eigen::VectorXd rho(d), dB(d);
    for (int x = 0; x < d; ++x) rho(x) = rho0[static_cast<std::size_t>(x)];
    std::copy(rho.data(), rho.data() + d, path.begin());
    const double sq = std::sqrt(g.dt());
    for (int k = 0; k < g.n_steps(); ++k) {
      for (int x = 0; x < d; ++x) dB(x) = sq * standard_normal(rng);
      rho += g.dt() * (fc.A[static_cast<std::size_t>(2 * k)] * rho) + sigma[static_cast<std::size_t>(k)] * dB;
      std::copy(rho.data(), rho.data() + d, path.begin() + static_cast<std::ptrdiff_t>((k + 1) * d));
    }
  });
  return out;
}

// ---------------------------------------------------------------------------

double local_rate(double r) {
  if (r < 0.0) return kInfinity;
  if (r == 0.0) return 1.0;
  return r * std::log(r) - r + 1.0;
}

double psi(const Matrix& Gamma, std::span<const double> m, std::span<const double> theta) {
  const auto d = Gamma.rows();
  double s = 0.0;
  for (Eigen::Index x = 0; x < d; ++x) {
    for (Eigen::Index y = 0; y < d; ++y) {
      if (x == y) continue;
      s += m[static_cast<std::size_t>(x)] * Gamma(x, y) *
           std::expm1(theta[static_cast<std::size_t>(y)] - theta[static_cast<std::size_t>(x)]);
    }
  }
  return s;
}

RateEval big_lambda(const Matrix& Gamma, std::span<const double> m, std::span<const double> mu) {
  const auto d = static_cast<int>(Gamma.rows());
  if (static_cast<int>(m.size()) != d || static_cast<int>(mu.size()) != d) {
    throw Error("asymptotics", "big_lambda", "dimension mismatch");
  }
  check_interior("big_lambda", m);
  double musum = 0.0;
  for (double v : mu) musum += v;
  if (std::abs(musum) > 1e-10) throw Error("asymptotics", "big_lambda", "mu must sum to zero");

  const int r = d - 1;  // theta_d is pinned at zero
  Vec theta(static_cast<std::size_t>(d), 0.0), trial(static_cast<std::size_t>(d));
  auto objective = [&](std::span<const double> th) {
    double s = 0.0;
    for (int x = 0; x < d; ++x) s += th[static_cast<std::size_t>(x)] * mu[static_cast<std::size_t>(x)];
    return s - psi(Gamma, m, th);
  };
  Matrix q = Matrix::Zero(d, d);
  auto plan = [&](std::span<const double> th) {
    for (int x = 0; x < d; ++x) {
      for (int y = 0; y < d; ++y) {
        q(x, y) = x == y ? 0.0
                         : m[static_cast<std::size_t>(x)] * Gamma(x, y) *
                               std::exp(th[static_cast<std::size_t>(y)] - th[static_cast<std::size_t>(x)]);
      }
    }
  };
  Eigen::VectorXd grad(r), step(r);
  Matrix H(r, r);
  RateEval out;
  double f = objective(theta);
  int it = 0;
  for (;; ++it) {
    plan(theta);
    // grad_k = mu_k - (inflow_k - outflow_k); H = -sum q (e_y - e_x)(e_y - e_x)^T.
    grad.setZero();
    H.setZero();
    for (int k = 0; k < r; ++k) grad(k) = mu[static_cast<std::size_t>(k)];
    for (int x = 0; x < d; ++x) {
      for (int y = 0; y < d; ++y) {
        if (x == y) continue;
        const double v = q(x, y);
        if (y < r) grad(y) -= v;
        if (x < r) grad(x) += v;
        if (y < r) H(y, y) -= v;
        if (x < r) H(x, x) -= v;
        if (x < r && y < r) {
          H(x, y) += v;
          H(y, x) += v;
        }
      }
    }
    out.gradient_norm = grad.cwiseAbs().maxCoeff();
    if (out.gradient_norm <= 1e-12 * std::max(1.0, q.cwiseAbs().maxCoeff())) break;
    if (it >= 100) {
      std::ostringstream os;
      os << "gradient_norm=" << out.gradient_norm << " value=" << f;
      throw Error("asymptotics", "big_lambda", "dual Newton did not converge", os.str());
    }
    step = H.ldlt().solve(-grad);
    const double slope = grad.dot(step);
    if (slope <= 1e-14 * std::max(1.0, std::abs(f))) {
      // Newton decrement below roundoff in f: the full step is safe and the
      // objective can no longer tell steps apart.
      for (int k = 0; k < r; ++k) theta[static_cast<std::size_t>(k)] += step(k);
      f = objective(theta);
      continue;
    }
    double s = 1.0;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls, s *= 0.5) {
      for (int k = 0; k < r; ++k) trial[static_cast<std::size_t>(k)] = theta[static_cast<std::size_t>(k)] + s * step(k);
      trial[static_cast<std::size_t>(r)] = 0.0;
      const double ft = objective(trial);
      if (std::isfinite(ft) && ft >= f + 1e-4 * s * slope - 1e-15 * std::abs(f)) {
        theta = trial;
        f = ft;
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      // Already at the optimum up to roundoff.
      break;
    }
  }
  plan(theta);
  out.iterations = it;
  out.theta_opt = theta;
  out.q_opt = q;
  out.psi_val = psi(Gamma, m, theta);
  out.big_lambda_dual = objective(theta);
  double primal = 0.0;
  for (int x = 0; x < d; ++x) {
    for (int y = 0; y < d; ++y) {
      if (x == y) continue;
      const double c = m[static_cast<std::size_t>(x)] * Gamma(x, y);
      primal += c * local_rate(q(x, y) / c);
    }
  }
  out.lambda_val = primal;
  out.big_lambda = primal;
  return out;
}

RateEval big_lambda(const GameSpec& spec, const MasterEvaluator& U, double t, const SimplexPoint& m,
                    const TangentVector& mu) {
  if (m.dim() != spec.d() || mu.dim() != spec.d()) throw Error("asymptotics", "big_lambda", "dimension mismatch");
  check_interior("big_lambda", m.span());
  return big_lambda(gamma_matrix(spec, U, t, m.span()), m.span(), mu.span());
}

RateFunctional rate_functional(const GameSpec& spec, const MasterEvaluator& U, const MeasureFlow& gamma,
                               const SimplexPoint& m0) {
  const int d = spec.d();
  const auto ds = static_cast<std::size_t>(d);
  if (gamma.d != d || m0.dim() != d) throw Error("asymptotics", "rate_functional", "dimension mismatch");
  const TimeGrid& g = gamma.grid;
  RateFunctional out;
  if (sup_diff(gamma.at(0), m0.span()) > 1e-9) {
    out.value = kInfinity;
    return out;
  }
  for (double v : gamma.m) {
    if (v < -1e-12) {
      out.value = kInfinity;
      return out;
    }
  }
  if (g.n_steps() < 2) throw Error("asymptotics", "rate_functional", "flow needs at least three nodes");
  const int n = g.n_steps();
  out.integrand.assign(static_cast<std::size_t>(g.n_nodes()), 0.0);
  parallel_for(static_cast<std::size_t>(g.n_nodes()), [&](std::size_t kk) {
    const int k = static_cast<int>(kk);
    Vec vel(ds), m(ds);
    for (std::size_t x = 0; x < ds; ++x) {
      if (k == 0) {
        vel[x] = (-3.0 * gamma.at(0)[x] + 4.0 * gamma.at(1)[x] - gamma.at(2)[x]) / (2.0 * g.dt());
      } else if (k == n) {
        vel[x] = (3.0 * gamma.at(n)[x] - 4.0 * gamma.at(n - 1)[x] + gamma.at(n - 2)[x]) / (2.0 * g.dt());
      } else {
        vel[x] = (gamma.at(k + 1)[x] - gamma.at(k - 1)[x]) / (2.0 * g.dt());
      }
      m[x] = std::max(0.0, gamma.at(k)[x]);
    }
    double s = 0.0;
    for (double v : vel) s += v;
    for (double& v : vel) v -= s / d;
    out.integrand[kk] = big_lambda(gamma_matrix(spec, U, g.node(k), m), m, vel).big_lambda;
  });
  double total = 0.0;
  for (int k = 0; k < n; ++k) total += 0.5 * g.dt() * (out.integrand[static_cast<std::size_t>(k)] + out.integrand[static_cast<std::size_t>(k + 1)]);
  out.value = total;
  return out;
}

}  // namespace fsmfg
