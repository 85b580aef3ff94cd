#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "fsmfg/core.hpp"
#include "fsmfg/master.hpp"
#include "fsmfg/mfg.hpp"
#include "fsmfg/model.hpp"

namespace fsmfg {

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

/// Gamma(t, m): off-diagonal a*_y(x, D^x U(t, x, m)), rows summing to zero.
Matrix gamma_matrix(const GameSpec& spec, const MasterPoint& P);
Matrix gamma_matrix(const GameSpec& spec, const MasterEvaluator& U, double t, std::span<const double> m);

/// D^m Gamma(t, m, 1) . mu by the chain rule through the Jacobian of a* and
/// the stored D^m U. Diagonal entries keep rows summing to zero.
Matrix gamma_derivative(const GameSpec& spec, const MasterPoint& P, std::span<const double> mu);

struct CltCoefficients {
  Vec drift;      // Gamma^T mu + b(mu)
  Vec b;          // b(t, m, mu)
  Matrix sigma2;
  /// Some rate sits within 1e-6 of a clamp face, where a* has a kink.
  bool near_kink = false;
};

CltCoefficients clt_coefficients(const GameSpec& spec, const MasterEvaluator& U, double t, const SimplexPoint& m,
                                 const TangentVector& mu);

/// sigma2 built from Gamma and m alone.
Matrix sigma2_matrix(const Matrix& Gamma, std::span<const double> m);

/// Linear drift operator A with A mu = Gamma^T mu + b(mu).
Matrix drift_operator(const GameSpec& spec, const MasterPoint& P, std::span<const double> m);

/// Symmetric PSD square root by eigendecomposition.
Matrix sigma_sqrt(const Matrix& sigma2);

struct FluctuationLaw {
  TimeGrid times;
  std::vector<Vec> mean;
  std::vector<Matrix> cov;
};

struct FluctuationOptions {
  double dt = 1e-2;      // covariance ODE step
  double mfg_dt = 1e-3;  // step of the underlying MFG solve
};

/// Integrates d mean = A mean and d cov = A cov + cov A^T + sigma2 along the
/// MFG flow started at m0.
FluctuationLaw evolve_fluctuation_law(const GameSpec& spec, const MasterEvaluator& U, const SimplexPoint& m0,
                                      const Matrix& cov0, const FluctuationOptions& opt = {},
                                      std::span<const double> mean0 = {});

/// diag(m0) - m0 m0^T.
Matrix multinomial_covariance(const SimplexPoint& m0);

/// Euler-Maruyama paths of the limiting fluctuation SDE with rho(0) = rho0.
/// Returns [path][k*d + x] on a grid of step dt.
std::vector<Vec> sample_fluctuation_paths(const GameSpec& spec, const MasterEvaluator& U, const SimplexPoint& m0,
                                          std::span<const double> rho0, int paths, double dt, std::uint64_t seed);

/// r log r - r + 1, 1 at zero, infinity for negative r.
double local_rate(double r);

struct RateEval {
  double lambda_val = 0.0;       // primal value sum c lambda(q / c)
  double psi_val = 0.0;          // Psi at the optimal theta
  double big_lambda = 0.0;       // primal value at the recovered plan
  double big_lambda_dual = 0.0;  // theta . mu - Psi(theta)
  Vec theta_opt;                 // theta_d = 0
  Matrix q_opt;                  // recovered plan, zero diagonal
  int iterations = 0;
  double gradient_norm = 0.0;
};

/// Psi(theta) = sum_{x != y} c_xy (exp(theta_y - theta_x) - 1) with c_xy = m_x Gamma_xy.
double psi(const Matrix& Gamma, std::span<const double> m, std::span<const double> theta);

/// Lambda(m, mu) from the dual by damped Newton on theta with theta_d = 0.
RateEval big_lambda(const Matrix& Gamma, std::span<const double> m, std::span<const double> mu);
RateEval big_lambda(const GameSpec& spec, const MasterEvaluator& U, double t, const SimplexPoint& m,
                    const TangentVector& mu);

struct RateFunctional {
  double value = 0.0;
  Vec integrand;  // Lambda at each node of the flow
};

/// Trapezoidal I(gamma) with central-difference velocities; infinite when
/// gamma(0) differs from m0 or leaves the simplex.
RateFunctional rate_functional(const GameSpec& spec, const MasterEvaluator& U, const MeasureFlow& gamma,
                               const SimplexPoint& m0);

}  // namespace fsmfg
