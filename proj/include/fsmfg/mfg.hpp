#pragma once

#include <optional>
#include <span>

#include "fsmfg/core.hpp"
#include "fsmfg/model.hpp"

namespace fsmfg {

/// u(t_k, x) on a time grid, with the time derivative stored at each node so
/// that midpoints can be recovered by cubic Hermite interpolation.
struct ValueFlow {
  TimeGrid grid;
  int d = 0;
  Vec u;   // [k*d + x]
  Vec du;  // du/dt at the nodes

  ValueFlow(TimeGrid g, int dim);

  std::span<const double> at(int k) const { return {u.data() + static_cast<std::size_t>(k * d), static_cast<std::size_t>(d)}; }
  std::span<double> at(int k) { return {u.data() + static_cast<std::size_t>(k * d), static_cast<std::size_t>(d)}; }
  double operator()(int k, int x) const { return u[static_cast<std::size_t>(k * d + x)]; }

  /// Hermite interpolant at an arbitrary time in [t0, T].
  void interpolate(double t, std::span<double> out) const;
};

/// m(t_k) on a time grid, with dm/dt at the nodes.
struct MeasureFlow {
  TimeGrid grid;
  int d = 0;
  Vec m;
  Vec dm;

  MeasureFlow(TimeGrid g, int dim);

  /// m(t) = m0 for all t.
  static MeasureFlow constant(TimeGrid g, const SimplexPoint& m0);

  std::span<const double> at(int k) const { return {m.data() + static_cast<std::size_t>(k * d), static_cast<std::size_t>(d)}; }
  std::span<double> at(int k) { return {m.data() + static_cast<std::size_t>(k * d), static_cast<std::size_t>(d)}; }
  SimplexPoint point(int k) const { return SimplexPoint(Vec(at(k).begin(), at(k).end())); }

  void interpolate(double t, std::span<double> out) const;
  /// Largest |m(t)-m(s)| / |t-s| over node pairs (Euclidean norm).
  double lipschitz_constant() const;
};

enum class MfgMethod { picard, shooting };

struct MfgOptions {
  double dt = 1e-3;
  double damping = 0.5;
  double tol = 1e-12;
  int max_iter = 5000;
  MfgMethod method = MfgMethod::picard;
};

struct MfgResidual {
  double hjb = 0.0;
  double kfp = 0.0;
};

struct MfgSolution {
  ValueFlow u;
  MeasureFlow m;
  int iterations = 0;
  double last_update = 0.0;
  MfgResidual residual;
  /// False when the costs are not known to be monotone.
  bool uniqueness_guaranteed = true;
};

/// Backward RK4 for du/dt = H(x, D^x u) - F(x, m(t)), u(T) = G(x, m(T)).
ValueFlow solve_hjb_backward(const GameSpec& spec, const MeasureFlow& m);

/// Forward RK4 for the Kolmogorov equation driven by the feedback of u.
MeasureFlow solve_kfp_forward(const GameSpec& spec, const ValueFlow& u, const SimplexPoint& m0);

/// Picard iteration m <- (1-damping) m + damping KFP(HJB(m)) starting from
/// `guess` (m = m0 constant when absent), or Newton shooting when requested.
MfgSolution solve_mfg(const GameSpec& spec, const TimeGrid& grid, const SimplexPoint& m0,
                      const MfgOptions& opt = {}, const MeasureFlow* guess = nullptr);
MfgSolution solve_mfg(const GameSpec& spec, double t0, const SimplexPoint& m0, const MfgOptions& opt = {});

/// Central-difference residuals of both equations, sup over interior nodes.
MfgResidual mfg_residual(const GameSpec& spec, const ValueFlow& u, const MeasureFlow& m);
MfgResidual mfg_residual(const GameSpec& spec, const MfgSolution& sol);

struct APrioriEstimate {
  double du = 0.0;
  double dm = 0.0;
  double ratio_u = 0.0;
  double ratio_m = 0.0;
};

/// Sup distances between the solutions started from two initial measures at
/// time t0, and their ratios to |m0a - m0b|.
APrioriEstimate a_priori_check(const GameSpec& spec, const SimplexPoint& m0a, const SimplexPoint& m0b,
                               const MfgOptions& opt = {}, double t0 = 0.0);

struct TwoStartReport {
  double distance = 0.0;
  bool uniqueness_guaranteed = true;
};

/// Solves twice, from m = m0 and from m = uniform, and reports the sup
/// distance between the two fixed points. Disagreement is reported, not thrown.
TwoStartReport two_start_check(const GameSpec& spec, const TimeGrid& grid, const SimplexPoint& m0,
                               const MfgOptions& opt = {});

/// Forward shooting on the joint flow z = (u, m). The unknown is u(t0); the
/// condition u(T) = G(m(T)) is solved by Newton. Along the converged
/// trajectory the fundamental matrix gives du(t0)/dm0 as well.
class CharacteristicSolver {
public:
  CharacteristicSolver(const GameSpec& spec, double tol = 1e-12, int max_iter = 50);

  struct Result {
    Vec u0;        // u(t0, .)
    Matrix du_dm;  // d x d, d u(t0, x) / d m0_z (extended off the simplex linearly)
    Matrix jacobian;  // d R / d u0 with R = u(T) - G(m(T)); reused as a warm start
    int iterations = 0;
    double residual = 0.0;
  };

  /// Solves from (t0, m0) with n_steps RK4 steps up to T. `warm` supplies an
  /// initial guess for u0 and the Newton matrix (chord iteration).
  Result solve(double t0, int n_steps, std::span<const double> m0, const Result* warm = nullptr) const;

  /// Integrates the joint flow only, writing u(t) and m(t) at every node.
  void trajectory(double t0, int n_steps, std::span<const double> u0, std::span<const double> m0,
                  Vec& u_out, Vec& m_out) const;

private:
  struct Workspace;
  void rhs(Workspace& w, const double* z, const double* phi, double* dz, double* dphi) const;
  double integrate(Workspace& w, double t0, int n_steps, std::span<const double> u0, std::span<const double> m0,
                   bool tangent, Vec& residual, Matrix* Ru, Matrix* Rm) const;

  const GameSpec& spec_;
  double tol_;
  int max_iter_;
};

}  // namespace fsmfg
